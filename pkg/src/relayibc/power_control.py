"""Phase 3: rate-matching power control on the first hop.

Precoder shapes stay fixed and only the power ``theta_k`` of each
transmission is adjusted. A relay whose first hop is stronger than its
rate-matching SINR ``eta_k`` (set ``A``) has its power cut to the value at
which the first hop exactly matches; the cut lowers interference for every
other relay, so no relay's end-to-end rate decreases.

``theta_k`` is a power: ``F_k = sqrt(theta_k) * shape_k`` with a unit-norm
shape, which makes the relay covariance linear in ``theta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._wmmse import TraceRecord
from .rates import LN2, cholesky, ctrans, hermitian, logdet_pd, _chol_solve
from .topology import ChannelSet, Topology

__all__ = [
    "PowerState",
    "LinkClassification",
    "PowerControlResult",
    "CLASSIFY_DELTA",
    "decompose_precoders",
    "powered_sinr",
    "classify_links",
    "rate_matching_power",
    "power_control_step",
    "run_power_control",
]

CLASSIFY_DELTA = 1e-7
_ZERO_NORM = 1e-300


@dataclass(frozen=True)
class PowerState:
    """Fixed shapes, current powers and the cached composite channels.

    ``composite[k, m] = H[k, mu(m)] @ shape_m`` is the channel seen at
    relay ``k`` from the transmission intended for relay ``m``.
    """

    shapes: np.ndarray  # (K_X, N_T, d1), unit Frobenius norm or zero
    theta: np.ndarray  # (K_X,) powers
    eta: np.ndarray  # (K_X,) rate-matching SINRs
    zero: np.ndarray  # (K_X,) True where the precoder was zero
    composite: np.ndarray | None = field(default=None, repr=False)
    noise: float = 1.0
    t: float = 0.5
    iteration: int = 0

    @property
    def norms(self) -> np.ndarray:
        """Frobenius norms ``sqrt(theta)`` of the active precoders."""
        return np.sqrt(self.theta)

    def precoders(self) -> np.ndarray:
        return self.norms[:, None, None] * self.shapes

    def bind(self, channels: ChannelSet, topology: Topology, noise: float | None = None) -> "PowerState":
        """Attach composite channels for ``channels``."""
        Hm = channels.H[:, topology.mu, :, :]  # (K_X, K_X, N_X, N_T)
        comp = Hm @ self.shapes[None, :, :, :]
        return replace(self, composite=comp, noise=self.noise if noise is None else noise)


@dataclass(frozen=True)
class LinkClassification:
    A: frozenset
    B: frozenset
    equal: frozenset = frozenset()

    @property
    def mismatch(self) -> bool:
        return bool(self.A) and bool(self.B)


def decompose_precoders(F_T, eta=None, t: float = 0.5) -> PowerState:
    """Split precoders into unit-norm shapes and powers ``||F||_F^2``."""
    F = np.asarray(F_T, dtype=complex)
    norms = np.sqrt(np.sum(np.abs(F) ** 2, axis=(-2, -1)))
    zero = norms <= _ZERO_NORM
    safe = np.where(zero, 1.0, norms)
    shapes = np.where(zero[:, None, None], 0.0, F / safe[:, None, None])
    theta = np.where(zero, 0.0, norms**2)
    if eta is None:
        eta = np.full(F.shape[0], np.inf)
    return PowerState(shapes=shapes, theta=theta, eta=np.asarray(eta, dtype=float), zero=zero, t=t)


def _require_bound(state: PowerState):
    if state.composite is None:
        raise ValueError("PowerState has no composite channels; call bind() first")
    return state.composite


def _covariances(state: PowerState, theta=None):
    """Interference-plus-noise covariance at each relay."""
    comp = _require_bound(state)
    theta = state.theta if theta is None else np.asarray(theta, dtype=float)
    K = comp.shape[0]
    gram = comp @ ctrans(comp)  # (K, K, N_X, N_X)
    weights = np.broadcast_to(theta, (K, K)).copy()
    weights[np.arange(K), np.arange(K)] = 0.0
    R = np.einsum("km,kmab->kab", weights, gram) + state.noise * np.eye(comp.shape[-2])
    return hermitian(R)


def _desired(state: PowerState):
    comp = _require_bound(state)
    idx = np.arange(comp.shape[0])
    return comp[idx, idx]


def _gain_eigenvalues(state: PowerState, R):
    """Eigenvalues of ``Hc_kk^H R_k^{-1} Hc_kk`` per relay."""
    D = _desired(state)
    M = hermitian(ctrans(D) @ _chol_solve(cholesky(R), D))
    return np.clip(np.linalg.eigvalsh(M), 0.0, None)


def _rates(state: PowerState, theta=None):
    theta = state.theta if theta is None else np.asarray(theta, dtype=float)
    R = _covariances(state, theta)
    D = _desired(state)
    total = R + theta[:, None, None] * (D @ ctrans(D))
    return np.maximum((logdet_pd(total) - logdet_pd(R)) / LN2, 0.0)


def powered_sinr(state: PowerState, channels: ChannelSet | None = None, topology: Topology | None = None, k=None):
    """First-hop effective SINR ``det(I + theta_k Hc^H R_k^{-1} Hc) - 1``.

    Returns the value for relay ``k``, or for every relay when ``k`` is None.
    """
    if channels is not None and topology is not None:
        state = state.bind(channels, topology)
    xi = np.expm1(_rates(state) * LN2)
    return xi if k is None else float(xi[k])


def classify_links(state: PowerState, sinr, delta: float = CLASSIFY_DELTA) -> LinkClassification:
    """``A``: first hop dominant, ``B``: second hop dominant, with a
    relative margin ``delta`` on the SINR."""
    xi = np.asarray(sinr, dtype=float)
    eta = np.asarray(state.eta, dtype=float)
    A = np.flatnonzero(xi > eta * (1 + delta))
    B = np.flatnonzero(xi < eta * (1 - delta))
    rest = np.setdiff1d(np.arange(xi.size), np.concatenate([A, B]))
    return LinkClassification(
        A=frozenset(int(k) for k in A), B=frozenset(int(k) for k in B), equal=frozenset(int(k) for k in rest)
    )


def _matching_powers(eig, theta, eta, max_iter: int = 200):
    """Vectorized bisection for ``prod(1 + phi * eig) - 1 = eta`` on
    ``(0, theta]``; returns the lower endpoint of the final bracket."""
    lo = np.zeros_like(theta)
    hi = theta.astype(float).copy()

    def xi(phi):
        return np.expm1(np.sum(np.log1p(phi[:, None] * eig), axis=-1))

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        over = xi(mid) > eta
        lo = np.where(over, lo, mid)
        hi = np.where(over, mid, hi)
        if np.all(hi - lo <= 1e-15 * hi):
            break
    return lo


def rate_matching_power(state: PowerState, channels: ChannelSet | None = None, topology: Topology | None = None, k=0):
    """Power ``phi`` at which relay ``k``'s first-hop SINR equals ``eta_k``
    with every other power held fixed.

    ``k`` may be an int or an array of relay indices; all of them must be
    first-hop dominant.
    """
    if channels is not None and topology is not None:
        state = state.bind(channels, topology)
    ks = np.atleast_1d(np.asarray(k, dtype=int))
    eig = _gain_eigenvalues(state, _covariances(state))[ks]
    theta = state.theta[ks]
    eta = state.eta[ks]
    top = np.expm1(np.sum(np.log1p(theta[:, None] * eig), axis=-1))
    if np.any(~(top > eta)):
        bad = ks[~(top > eta)]
        raise ValueError(f"relays {bad.tolist()} are not first-hop dominant; no rate-matching root in (0, theta]")
    phi = _matching_powers(eig, theta, eta)
    return float(phi[0]) if np.ndim(k) == 0 else phi


def power_control_step(state: PowerState, delta: float = CLASSIFY_DELTA):
    """One simultaneous update of every first-hop-dominant relay.

    Returns ``(new_state, classification)`` where the classification is the
    one that drove the update.
    """
    xi = np.expm1(_rates(state) * LN2)
    cls = classify_links(state, xi, delta)
    if not cls.A:
        return state, cls
    A = np.array(sorted(cls.A))
    eig = _gain_eigenvalues(state, _covariances(state))[A]
    phi = _matching_powers(eig, state.theta[A], state.eta[A])
    theta = state.theta.copy()
    theta[A] = np.minimum(phi, theta[A])
    return replace(state, theta=theta, iteration=state.iteration + 1), cls


@dataclass
class PowerControlResult:
    state: PowerState
    trace: list
    theta_history: np.ndarray  # (iterations + 1, K_X)
    relay_rates: np.ndarray  # (iterations + 1, K_X) end-to-end
    sum_rates: np.ndarray  # (iterations + 1,)
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.trace)

    @property
    def F_T(self) -> np.ndarray:
        return self.state.precoders()


def _end_to_end(state: PowerState):
    r1 = _rates(state)
    cap = state.t * np.log1p(state.eta) / LN2
    return np.minimum(state.t * r1, cap)


def run_power_control(
    state: PowerState,
    channels: ChannelSet | None = None,
    topology: Topology | None = None,
    max_iter: int = 30,
    delta: float = CLASSIFY_DELTA,
) -> PowerControlResult:
    """Repeat :func:`power_control_step` until no relay is first-hop
    dominant or ``max_iter`` steps have run."""
    if channels is not None and topology is not None:
        state = state.bind(channels, topology)
    thetas = [state.theta.copy()]
    e2e = [_end_to_end(state)]
    trace = []
    converged = False
    for n in range(1, max_iter + 1):
        new, cls = power_control_step(state, delta)
        if not cls.A:
            converged = True
            break
        state = new
        thetas.append(state.theta.copy())
        e2e.append(_end_to_end(state))
        trace.append(
            TraceRecord("phase3", n, float(e2e[-1].sum()), float(np.max(np.abs(thetas[-1] - thetas[-2]))))
        )
    else:
        xi = np.expm1(_rates(state) * LN2)
        converged = not classify_links(state, xi, delta).A
    e2e = np.array(e2e)
    return PowerControlResult(
        state=state,
        trace=trace,
        theta_history=np.array(thetas),
        relay_rates=e2e,
        sum_rates=e2e.sum(axis=1),
        converged=converged,
    )
