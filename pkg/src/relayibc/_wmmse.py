"""Weighted sum-MSE machinery shared by both hops.

Everything here runs on a leading batch axis so that many independent
problems (initializations, realizations, timesharing values) advance in
one vectorized pass; members that converge drop out of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rates import Hop, HopState, NumericalBreakdown, ctrans, hermitian, hop_state, inv_pd, owner_sum
from .topology import crandn

# eigenvalues below this fraction of the largest one span the null space
_NULL_RTOL = 1e-12
BISECT_MAX_ITER = 200
NEWTON_MAX_ITER = 100


class BracketError(ArithmeticError):
    """The power multiplier could not be bracketed."""


@dataclass
class TraceRecord:
    phase: str
    iteration: int
    objective_bits: float
    max_delta: float

    def as_dict(self) -> dict:
        return {
            "phase": self.phase,
            "iteration": self.iteration,
            "objective_bits": self.objective_bits,
            "max_delta": self.max_delta,
        }


@dataclass
class SolveResult:
    precoders: np.ndarray
    state: HopState
    objective: float
    initial_objective: float
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.trace)


def random_precoders(rng, owner, n_owners, n_tx, d, budget, batch=()) -> np.ndarray:
    """Complex Gaussian precoders scaled so each owner spends its full
    budget, split evenly over the links it serves."""
    owner = np.asarray(owner)
    F = crandn(rng, tuple(batch) + (owner.size, n_tx, d))
    counts = np.bincount(owner, minlength=n_owners)
    budget = np.broadcast_to(np.asarray(budget, dtype=float), (n_owners,))
    target = budget[owner] / counts[owner]
    norms2 = np.sum(np.abs(F) ** 2, axis=(-2, -1))
    return F * np.sqrt(target / norms2)[..., None, None]


def project_power(F, owner, n_owners, budget) -> np.ndarray:
    """Scale each owner's precoders down (never up) onto its budget."""
    F = np.asarray(F, dtype=complex)
    used = owner_sum(np.sum(np.abs(F) ** 2, axis=(-2, -1)), owner, n_owners)
    budget = np.broadcast_to(np.asarray(budget, dtype=float), used.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        scale = np.where(used > budget, np.sqrt(budget / used), 1.0)
    return F * scale[..., owner][..., None, None]


def multiplier_power(lam, eig, z2):
    """``sum_i z2_i / (eig_i + lam)^2``: owner power at multiplier ``lam``.

    Null directions carry ``z2 = 0`` and contribute nothing.
    """
    denom = (eig + np.asarray(lam)[..., None]) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(z2 > 0, z2 / denom, 0.0)
    return terms.sum(axis=-1)


def bisect_multipliers(eig, z2, budget, max_iter: int = BISECT_MAX_ITER):
    """Reference root finder: bracket by doubling from 1, then bisect.

    Returns the feasible (upper) endpoint, so power never exceeds budget.
    """
    budget = np.broadcast_to(np.asarray(budget, dtype=float), eig.shape[:-1])
    lam = np.zeros(eig.shape[:-1])
    active = ~(multiplier_power(lam, eig, z2) <= budget)
    if not active.any():
        return lam
    lo = np.zeros_like(lam)
    hi = np.ones_like(lam)
    for _ in range(2100):
        over = active & (multiplier_power(hi, eig, z2) > budget)
        if not over.any():
            break
        lo[over] = hi[over]
        hi[over] *= 2.0
    else:
        raise BracketError("could not bracket the power multiplier")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        over = multiplier_power(mid, eig, z2) > budget
        lo = np.where(active & over, mid, lo)
        hi = np.where(active & ~over, mid, hi)
        if np.all(hi[active] - lo[active] <= 1e-15 * hi[active]):
            break
    lam[active] = hi[active]
    return lam


def solve_multipliers(eig, z2, budget, max_iter: int = NEWTON_MAX_ITER):
    """Complementary-slackness multipliers, one per owner.

    ``lam = 0`` when the unconstrained precoders fit the budget. Otherwise
    Newton's method runs on ``phi(lam) = power(lam)^{-1/2} - budget^{-1/2}``,
    which is concave and increasing, so iterates started at 0 rise
    monotonically to the root. Falls back to bisection if Newton stalls.
    """
    budget = np.broadcast_to(np.asarray(budget, dtype=float), eig.shape[:-1])
    lam = np.zeros(eig.shape[:-1])
    p = multiplier_power(lam, eig, z2)
    active = ~(p <= budget)
    if not active.any():
        return lam
    if not np.all(np.isfinite(p[active])):
        return bisect_multipliers(eig, z2, budget)
    target = budget ** -0.5
    for _ in range(max_iter):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            denom = eig + lam[..., None]
            p = np.where(z2 > 0, z2 / denom**2, 0.0).sum(axis=-1)
            dp = np.where(z2 > 0, z2 / denom**3, 0.0).sum(axis=-1)
            phi = p**-0.5
            gap = target - phi
            step = gap / (p**-1.5 * dp)
        # phi is accurate to a few ulps, so stop once the gap is at that level
        active &= gap > 1e-14 * target
        if not active.any():
            break
        lam = np.where(active, lam + np.maximum(step, 0.0), lam)
    else:
        return bisect_multipliers(eig, z2, budget)
    return lam


def precoder_update(hop: Hop, filters, weights, budget):
    """Minimize the weighted sum-MSE over precoders for fixed filters and
    weights, subject to one sum-power constraint per transmitting node.

    Returns ``(F, multipliers)`` with
    ``F_l = (A_{o(l)} + lam_{o(l)} I)^{-1} C_{l,o(l)}^H W_l V_l`` and
    ``A_j = sum_r C_{r,j}^H W_r V_r W_r^H C_{r,j}``.
    """
    owner = hop.owner
    C = hop.channel
    CH = ctrans(C)
    WV = filters @ weights
    M = hermitian(WV @ ctrans(filters))  # (..., L, Nr, Nr)
    A = hermitian(np.sum(CH @ M[..., :, None, :, :] @ C, axis=-4))  # (..., K, Nt, Nt)
    idx = np.arange(hop.n_links)
    B = CH[..., idx, owner, :, :] @ WV  # (..., L, Nt, d)

    eig, Q = np.linalg.eigh(A)
    eig = np.clip(eig, 0.0, None)
    null = eig <= _NULL_RTOL * eig[..., -1:]
    Qo = Q[..., owner, :, :]
    Z = ctrans(Qo) @ B
    Z = np.where(null[..., owner, :, None], 0.0, Z)
    zl = np.sum(np.abs(Z) ** 2, axis=-1)  # (..., L, Nt)
    z2 = np.swapaxes(owner_sum(np.swapaxes(zl, -1, -2), owner, hop.n_owners), -1, -2)

    lam = solve_multipliers(eig, z2, budget)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(null, 0.0, 1.0 / (eig + lam[..., None]))
    F = Qo @ (scale[..., owner, :, None] * Z)
    # Newton approaches the root from below; trim the last ulp of excess
    return project_power(F, owner, hop.n_owners, budget), lam


def inverse_mse_weights(state: HopState):
    """``E0^{-1}``, the sum-rate weight; singular MSE matrices get a
    ``1e-12 I`` ridge."""
    try:
        return inv_pd(state.mse)
    except NumericalBreakdown:
        return inv_pd(state.mse + 1e-12 * np.eye(state.mse.shape[-1]))


def _take(a, sel):
    # members of a batched operand; size-1 batch axes broadcast
    a = np.asarray(a)
    return a if a.shape[0] == 1 else a[sel]


@dataclass
class BatchResult:
    """Outcome of :func:`alternate` for a batch of ``B`` problems."""

    precoders: np.ndarray  # (B, L, Nt, d), best iterate per member
    objective: np.ndarray  # (B,)
    initial_objective: np.ndarray  # (B,)
    iterations: np.ndarray  # (B,)
    converged: np.ndarray  # (B,)
    history: list = field(repr=False, default_factory=list)
    phase: str = ""
    # reported objective = scale * internal objective (per member)
    objective_scale: np.ndarray | None = None

    def _scale(self, member: int) -> float:
        return 1.0 if self.objective_scale is None else float(self.objective_scale[member])

    def trace(self, member: int) -> list:
        c = self._scale(member)
        out = []
        for n, (members, obj, delta, _load) in enumerate(self.history, start=1):
            pos = np.searchsorted(members, member)
            if pos < members.size and members[pos] == member:
                out.append(TraceRecord(self.phase, n, c * float(obj[pos]), float(delta[pos])))
        return out

    def power_load(self, member: int) -> np.ndarray:
        """Largest ``used / budget`` over owners after every update."""
        out = []
        for members, _obj, _delta, load in self.history:
            pos = np.searchsorted(members, member)
            if pos < members.size and members[pos] == member:
                out.append(load[pos])
        return np.array(out)

    def objective_history(self, member: int) -> np.ndarray:
        c = self._scale(member)
        return np.array([c * self.initial_objective[member]] + [r.objective_bits for r in self.trace(member)])


def alternate(
    hop: Hop,
    F0,
    budget,
    weight_fn: Callable[[HopState, np.ndarray], np.ndarray],
    objective_fn: Callable[[HopState, np.ndarray], np.ndarray],
    *,
    phase: str,
    max_iter: int,
    tol: float,
) -> BatchResult:
    """Filter -> weight -> precoder block updates until the objective moves
    by less than ``tol`` or ``max_iter`` updates have run.

    ``F0`` has shape ``(B, L, Nt, d)``; ``hop.channel`` and ``budget`` have
    a leading axis of size ``B`` or 1. The callbacks receive the state of
    the still-active members and their indices into the batch.
    """
    F0 = np.asarray(F0, dtype=complex)
    B = F0.shape[0]
    channel = hop.channel
    budget = np.asarray(budget, dtype=float)
    if budget.ndim < 2:
        budget = np.broadcast_to(budget, (1, hop.n_owners))

    active = np.arange(B)
    F = project_power(F0, hop.owner, hop.n_owners, budget)
    state = hop_state(hop, F)
    obj = np.asarray(objective_fn(state, active), dtype=float)
    initial = obj.copy()
    best_obj = obj.copy()
    best_F = F.copy()
    iterations = np.zeros(B, dtype=int)
    converged = np.zeros(B, dtype=bool)
    history = []

    cur_hop = hop
    for _ in range(max_iter):
        if active.size == 0:
            break
        sub_budget = _take(budget, active) if budget.shape[0] == B else budget
        weights = weight_fn(state, active)
        F_new, _lam = precoder_update(cur_hop, state.filters, weights, sub_budget)
        state = hop_state(cur_hop, F_new)
        obj_new = np.asarray(objective_fn(state, active), dtype=float)
        delta = np.max(np.abs(F_new - F), axis=(-3, -2, -1))
        used = owner_sum(np.sum(np.abs(F_new) ** 2, axis=(-2, -1)), hop.owner, hop.n_owners)
        load = np.max(used / np.broadcast_to(sub_budget, used.shape), axis=-1)
        history.append((active.copy(), obj_new.copy(), delta, load))
        iterations[active] += 1

        better = obj_new >= best_obj[active]
        best_obj[active[better]] = obj_new[better]
        best_F[active[better]] = F_new[better]

        done = np.abs(obj_new - obj) < tol
        converged[active[done]] = True
        keep = ~done
        if not keep.all():
            active = active[keep]
            F_new = F_new[keep]
            obj_new = obj_new[keep]
            state = HopState(*(getattr(state, f)[keep] for f in ("desired", "interference", "filters", "mse", "rates")))
            if channel.shape[0] == B:
                cur_hop = Hop(channel[active], hop.owner, hop.noise)
        F = F_new
        obj = obj_new

    return BatchResult(
        precoders=best_F,
        objective=best_obj,
        initial_objective=initial,
        iterations=iterations,
        converged=converged,
        history=history,
        phase=phase,
    )


def batch_hop(hop: Hop) -> Hop:
    """Give a single-instance hop a leading batch axis of size 1."""
    if hop.channel.ndim == 4:
        return Hop(hop.channel[None], hop.owner, hop.noise)
    return hop


def single_result(hop: Hop, res: BatchResult, member: int = 0) -> SolveResult:
    """Collapse one member of a batch run into a :class:`SolveResult`."""
    channel = hop.channel[member] if hop.channel.ndim == 5 and hop.channel.shape[0] > 1 else hop.channel
    if channel.ndim == 5:
        channel = channel[0]
    F = res.precoders[member]
    return SolveResult(
        precoders=F,
        state=hop_state(Hop(channel, hop.owner, hop.noise), F),
        objective=res._scale(member) * float(res.objective[member]),
        initial_objective=res._scale(member) * float(res.initial_objective[member]),
        trace=res.trace(member),
        converged=bool(res.converged[member]),
    )
