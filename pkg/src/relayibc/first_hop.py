"""Phase 2: transmitter precoders for the smoothed end-to-end utility.

The end-to-end rate of relay ``k`` is ``min(t R1_k, (1-t) R2_sum_k)``. Its
kink at the rate-matching SINR ``eta_k`` is replaced by a twice
differentiable utility, and the resulting sum-utility problem is solved by
weighted sum-MSE minimization where the weight of link ``k`` is the
gradient of ``g_k(E) = -(ln 2 / t) u_k(1/det E - 1)``, i.e. the inverse MMSE
matrix shrunk by ``alpha(det E)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _wmmse
from .rates import LN2, Hop, first_hop, hop_state, inv_pd, logdet_pd
from .topology import ChannelSet, SystemSpec, Topology

__all__ = [
    "RateMatchTargets",
    "rate_matching_sinr",
    "utility_u",
    "utility_derivatives",
    "g_value",
    "weight_alpha",
    "gradient_weight",
    "first_hop_filter_update",
    "first_hop_precoder_update",
    "solve_first_hop",
    "solve_first_hop_batch",
    "init_first_hop",
    "FirstHopResult",
]


def rate_matching_sinr(xi2_bar, t: float):
    """First-hop SINR whose normalized rate equals the relay's normalized
    second-hop sum-rate: ``(1 + xi2)^((1-t)/t) - 1``."""
    xi2 = np.asarray(xi2_bar, dtype=float)
    with np.errstate(over="ignore"):
        return np.expm1((1.0 - t) / t * np.log1p(xi2))


@dataclass(frozen=True)
class RateMatchTargets:
    eta: np.ndarray
    xi2_bar: np.ndarray
    t: float

    @classmethod
    def from_second_hop(cls, xi2_bar, t: float) -> "RateMatchTargets":
        xi2 = np.asarray(xi2_bar, dtype=float)
        return cls(eta=rate_matching_sinr(xi2, t), xi2_bar=xi2, t=t)

    @classmethod
    def unconstrained(cls, k_x: int, t: float) -> "RateMatchTargets":
        """Infinite targets: the utility becomes the plain first-hop rate."""
        inf = np.full(k_x, np.inf)
        return cls(eta=inf, xi2_bar=inf, t=t)


def utility_u(xi1, t: float, eta):
    """Smoothed ``min(t log2(1+xi1), t log2(1+eta))`` in bits."""
    xi1 = np.asarray(xi1, dtype=float)
    eta = np.asarray(eta, dtype=float)
    below = t * np.log1p(xi1) / LN2
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        above = t * np.log1p(eta) / LN2 + t / LN2 * np.expm1(1.0 - (1.0 + eta) / (1.0 + xi1))
    out = np.where(xi1 <= eta, below, above)
    return out if out.ndim else float(out)


def utility_derivatives(xi1, t: float, eta):
    """Analytic ``(u', u'')`` with respect to ``xi1``."""
    xi1 = np.asarray(xi1, dtype=float)
    eta = np.asarray(eta, dtype=float)
    c = t / LN2
    d1_lo = c / (1 + xi1)
    d2_lo = -c / (1 + xi1) ** 2
    with np.errstate(invalid="ignore", over="ignore"):
        r = (1 + eta) / (1 + xi1)
        e = np.exp(1 - r)
        d1_hi = c * e * r / (1 + xi1)
        d2_hi = c * e * (r**2 - 2 * r) / (1 + xi1) ** 2
    lo = xi1 <= eta
    return np.where(lo, d1_lo, d1_hi), np.where(lo, d2_lo, d2_hi)


def g_value(det_e, eta):
    """``ln det E`` above the threshold ``1/(1+eta)``, its exponential
    continuation below it."""
    x = np.asarray(det_e, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(x <= 0):
        raise ValueError("det E must be positive")
    y = (1.0 + eta) * x
    with np.errstate(invalid="ignore", over="ignore"):
        below = -np.log1p(eta) - np.exp(1.0 - y) + 1.0
    out = np.where(y >= 1.0, np.log(x), below)
    return out if out.ndim else float(out)


def weight_alpha(x, eta):
    """Scale of the gradient weight: 1 above the threshold, else
    ``y exp(1 - y)`` with ``y = (1 + eta) x``. Always in (0, 1]."""
    y = (1.0 + np.asarray(eta, dtype=float)) * np.asarray(x, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.where(y >= 1.0, 1.0, y * np.exp(1.0 - y))
    return out if out.ndim else float(out)


def gradient_weight(E0, eta):
    """``alpha(det E0) E0^{-1}``; works on stacks of MMSE matrices."""
    E0 = np.asarray(E0, dtype=complex)
    det = np.exp(logdet_pd(E0))
    alpha = np.asarray(weight_alpha(det, eta))
    return alpha[..., None, None] * inv_pd(E0)


def first_hop_filter_update(channels: ChannelSet, topology: Topology, F_T, spec: SystemSpec | None = None):
    return hop_state(first_hop(channels, topology, spec), F_T).filters


def first_hop_precoder_update(channels: ChannelSet, topology: Topology, W_X, V, p_t, spec: SystemSpec | None = None):
    """Transmitter precoders for fixed filters/weights; one multiplier per
    transmitter shared by all of its relays. Returns ``(F_T, multipliers)``."""
    return _wmmse.precoder_update(first_hop(channels, topology, spec), np.asarray(W_X), np.asarray(V), p_t)


def init_first_hop(topology: Topology, spec: SystemSpec, rng) -> np.ndarray:
    return _wmmse.random_precoders(rng, topology.mu, topology.k_t, spec.n_t, spec.d1, spec.p_t)


@dataclass
class FirstHopResult:
    F_T: np.ndarray
    rates: np.ndarray
    xi1: np.ndarray
    solve: _wmmse.SolveResult

    @property
    def trace(self):
        return self.solve.trace

    @property
    def converged(self) -> bool:
        return self.solve.converged


def afp_objective(rates, targets: RateMatchTargets) -> float:
    xi1 = np.expm1(np.asarray(rates) * LN2)
    return float(np.sum(utility_u(xi1, targets.t, targets.eta)))


def _safe_gradient_weight(mse, eta):
    try:
        return gradient_weight(mse, eta)
    except ArithmeticError:
        return gradient_weight(mse + 1e-12 * np.eye(mse.shape[-1]), eta)


def solve_first_hop_batch(
    H,
    topology: Topology,
    spec: SystemSpec,
    t,
    eta,
    init_F_T,
    max_iter: int = 2000,
    tol: float = 1e-6,
    phase: str = "phase2",
) -> _wmmse.BatchResult:
    """Phase 2 for a batch of problems.

    ``H`` is ``(B, K_X, K_T, N_X, N_T)`` or one shared channel; ``t`` is a
    scalar or ``(B,)``; ``eta`` is ``(K_X,)`` or ``(B, K_X)``. Infinite
    ``eta`` gives the plain first-hop sum-rate problem. The tolerance
    applies to the utility divided by ``t``; reported objectives are the
    utility itself.
    """
    B = np.asarray(init_F_T).shape[0]
    eta = np.broadcast_to(np.asarray(eta, dtype=float), (B, topology.k_x))
    t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
    hop = _wmmse.batch_hop(Hop(np.asarray(H), topology.mu, spec.noise_x))

    def weights(st, active):
        return _safe_gradient_weight(st.mse, eta[active])

    def objective(st, active):
        # u is linear in t, so iterate on u / t: the run then depends on t
        # only through eta and the baseline (eta = inf) is shared by all t
        xi1 = np.expm1(st.rates * LN2)
        return np.sum(utility_u(xi1, 1.0, eta[active]), axis=-1)

    res = _wmmse.alternate(hop, init_F_T, spec.p_t, weights, objective, phase=phase, max_iter=max_iter, tol=tol)
    res.objective_scale = t.copy()
    return res


def solve_first_hop(
    channels: ChannelSet,
    topology: Topology,
    targets: RateMatchTargets,
    spec: SystemSpec,
    init_F_T,
    max_iter: int = 2000,
    tol: float = 1e-6,
    phase: str = "phase2",
) -> FirstHopResult:
    hop = first_hop(channels, topology, spec)
    res = solve_first_hop_batch(
        channels.H, topology, spec, targets.t, targets.eta, np.asarray(init_F_T)[None], max_iter, tol, phase
    )
    solve = _wmmse.single_result(hop, res)
    return FirstHopResult(F_T=solve.precoders, rates=solve.state.rates, xi1=solve.state.sinr, solve=solve)
