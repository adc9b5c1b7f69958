"""Covariances, MMSE filters, rates and end-to-end bookkeeping.

All matrix primitives accept stacks: leading axes broadcast the same way
``numpy.linalg`` does, so one call covers every link of a hop. Rates are in
bits per channel use.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .topology import ChannelSet, SystemSpec, Topology

__all__ = [
    "NumericalBreakdown",
    "PrecoderSet",
    "RateReport",
    "Hop",
    "HopState",
    "hermitian",
    "ctrans",
    "cholesky",
    "logdet_pd",
    "inv_pd",
    "interference_covariance",
    "mmse_receive_filter",
    "stream_rate",
    "effective_sinr",
    "mse_matrix",
    "first_hop",
    "second_hop",
    "hop_state",
    "first_hop_metrics",
    "second_hop_metrics",
    "allocate_first_hop_rates",
    "end_to_end",
    "rate_report",
    "power_per_owner",
    "owner_sum",
]

LN2 = np.log(2.0)


class NumericalBreakdown(ArithmeticError):
    """A covariance that must be positive definite failed to factorize."""


def ctrans(a):
    return np.conj(np.swapaxes(a, -1, -2))


def hermitian(a):
    return 0.5 * (a + ctrans(a))


def cholesky(a):
    try:
        return np.linalg.cholesky(hermitian(a))
    except np.linalg.LinAlgError as exc:
        raise NumericalBreakdown(f"Cholesky failed on a covariance expected to be PD: {exc}") from None


def _chol_solve(L, b):
    Linv = np.linalg.inv(L)
    return ctrans(Linv) @ (Linv @ b)


def logdet_pd(a):
    L = cholesky(a)
    return 2.0 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)


def inv_pd(a):
    Linv = np.linalg.inv(cholesky(a))
    return hermitian(ctrans(Linv) @ Linv)


def interference_covariance(interferers, noise_variance: float, dim: int):
    """``sum_j M_j M_j^H + noise_variance * I`` for a list of ``dim``-row
    effective channels (an empty list gives the noise floor)."""
    cov = noise_variance * np.eye(dim, dtype=complex)
    for m in interferers:
        m = np.atleast_2d(np.asarray(m, dtype=complex))
        if m.shape[0] != dim:
            raise ValueError(f"interferer has {m.shape[0]} rows, expected {dim}")
        cov = cov + m @ ctrans(m)
    return hermitian(cov)


def mmse_receive_filter(desired, cov):
    """``(D D^H + R)^{-1} D``."""
    desired = np.asarray(desired, dtype=complex)
    total = np.asarray(cov) + desired @ ctrans(desired)
    return _chol_solve(cholesky(total), desired)


def stream_rate(desired, cov):
    """``log2 det(I + D^H R^{-1} D)`` as ``log det(R + D D^H) - log det R``."""
    desired = np.asarray(desired, dtype=complex)
    cov = np.asarray(cov, dtype=complex)
    return np.maximum((logdet_pd(cov + desired @ ctrans(desired)) - logdet_pd(cov)) / LN2, 0.0)


def effective_sinr(rate_bits):
    return np.expm1(np.asarray(rate_bits, dtype=float) * LN2)


def mse_matrix(desired, cov, filt):
    """``W^H (D D^H + R) W - W^H D - D^H W + I``."""
    D = np.asarray(desired, dtype=complex)
    W = np.asarray(filt, dtype=complex)
    R = np.asarray(cov, dtype=complex)
    if W.shape != D.shape or R.shape[-1] != D.shape[-2]:
        raise ValueError("dimension mismatch between desired channel, covariance and filter")
    cross = ctrans(W) @ D
    E = ctrans(W) @ (D @ ctrans(D) + R) @ W - cross - ctrans(cross) + np.eye(D.shape[-1])
    return hermitian(E)


# ---------------------------------------------------------------------------
# Hop view shared by both hops
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hop:
    """One hop seen as an interference broadcast channel.

    Link ``l`` is served by transmitting node ``owner[l]`` and received by
    its own receiving node, so ``channel[r, j]`` is the matrix from
    transmitting node ``j`` to the receiver of link ``r``.
    """

    channel: np.ndarray
    owner: np.ndarray
    noise: float

    @property
    def n_links(self) -> int:
        return self.channel.shape[-4]

    @property
    def n_owners(self) -> int:
        return self.channel.shape[-3]

    @property
    def cross(self):
        # cross[..., r, l] = channel from the owner of link l to receiver r
        return self.channel[..., self.owner, :, :]


def first_hop(channels: ChannelSet, topology: Topology, spec: SystemSpec | None = None) -> Hop:
    noise = 1.0 if spec is None else spec.noise_x
    return Hop(channels.H, topology.mu, noise)


def second_hop(channels: ChannelSet, topology: Topology, spec: SystemSpec | None = None) -> Hop:
    noise = 1.0 if spec is None else spec.noise_r
    return Hop(channels.G, topology.chi, noise)


@dataclass(frozen=True)
class HopState:
    """Per-link quantities for a fixed set of precoders."""

    desired: np.ndarray  # (L, Nr, d)
    interference: np.ndarray  # (L, Nr, Nr), noise included
    filters: np.ndarray  # MMSE receive filters (L, Nr, d)
    mse: np.ndarray  # MMSE matrices E0 (L, d, d)
    rates: np.ndarray  # (L,) bits

    @property
    def sinr(self):
        return effective_sinr(self.rates)


def hop_state(hop: Hop, F) -> HopState:
    """Covariances, MMSE filters, MMSE matrices and rates for every link.

    Interference at link ``r`` counts every other link's transmission,
    including links that share ``r``'s transmitting node. ``F`` and
    ``hop.channel`` may carry matching leading batch axes.
    """
    F = np.asarray(F, dtype=complex)
    L = hop.n_links
    nr = hop.channel.shape[-2]
    eff = hop.cross @ F[..., None, :, :, :]  # (..., L, L, Nr, d)
    idx = np.arange(L)
    desired = eff[..., idx, idx, :, :]
    gram = eff @ ctrans(eff)
    gram[..., idx, idx, :, :] = 0.0
    interference = hermitian(gram.sum(axis=-3) + hop.noise * np.eye(nr))
    total = interference + desired @ ctrans(desired)
    L_tot = cholesky(total)
    filters = _chol_solve(L_tot, desired)
    d = F.shape[-1]
    mse = hermitian(np.eye(d) - ctrans(filters) @ desired)
    logdet_tot = 2.0 * np.sum(np.log(np.real(np.diagonal(L_tot, axis1=-2, axis2=-1))), axis=-1)
    rates = np.maximum((logdet_tot - logdet_pd(interference)) / LN2, 0.0)
    return HopState(desired, interference, filters, mse, rates)


def owner_sum(values, owner, n_owners):
    """Sum per-link values (last axis) into per-owner totals."""
    onehot = np.zeros((len(owner), n_owners))
    onehot[np.arange(len(owner)), owner] = 1.0
    return np.asarray(values, dtype=float) @ onehot


def power_per_owner(hop_or_owner, F, n_owners: int | None = None):
    owner = hop_or_owner.owner if isinstance(hop_or_owner, Hop) else np.asarray(hop_or_owner)
    if n_owners is None:
        n_owners = hop_or_owner.n_owners if isinstance(hop_or_owner, Hop) else int(owner.max()) + 1
    per_link = np.sum(np.abs(np.asarray(F)) ** 2, axis=(-2, -1))
    return owner_sum(per_link, owner, n_owners)


# ---------------------------------------------------------------------------
# Precoders and end-to-end rates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrecoderSet:
    F_T: np.ndarray  # (K_X, N_T, d1), indexed by relay
    F_X: np.ndarray  # (K_R, N_X, d2), indexed by receiver

    def transmitter_power(self, topology: Topology):
        return power_per_owner(topology.mu, self.F_T, topology.k_t)

    def relay_power(self, topology: Topology):
        return power_per_owner(topology.chi, self.F_X, topology.k_x)

    def is_feasible(self, topology: Topology, p_t, p_x, rtol: float = 1e-6) -> bool:
        pt = self.transmitter_power(topology)
        px = self.relay_power(topology)
        return bool(np.all(pt <= np.asarray(p_t) * (1 + rtol)) and np.all(px <= np.asarray(p_x) * (1 + rtol)))


def _warn_power(power, budget, what, rtol=1e-6):
    if budget is not None and np.any(power > np.asarray(budget) * (1 + rtol)):
        warnings.warn(f"{what} power constraint violated: {power} > {budget}", RuntimeWarning, stacklevel=3)


def first_hop_metrics(channels: ChannelSet, topology: Topology, F_T, spec: SystemSpec | None = None):
    """Per-relay ``(R1, xi1, E0)`` for first-hop precoders ``F_T``."""
    hop = first_hop(channels, topology, spec)
    if spec is not None:
        _warn_power(power_per_owner(hop, F_T), spec.p_t, "transmitter")
    st = hop_state(hop, F_T)
    return st.rates, st.sinr, st.mse


def second_hop_metrics(channels: ChannelSet, topology: Topology, F_X, spec: SystemSpec | None = None):
    """Per-receiver ``R2`` and per-relay ``(R2_sum, xi2)``."""
    hop = second_hop(channels, topology, spec)
    if spec is not None:
        _warn_power(power_per_owner(hop, F_X), spec.p_x, "relay")
    st = hop_state(hop, F_X)
    r2_sum = np.bincount(topology.chi, weights=st.rates, minlength=topology.k_x)
    return st.rates, r2_sum, effective_sinr(r2_sum)


def allocate_first_hop_rates(t: float, r1: float, served_rates) -> np.ndarray:
    """Split the normalized first-hop rate ``t * r1`` across a relay's
    receivers."""
    r2 = np.asarray(served_rates, dtype=float)
    if r2.size == 0:
        return r2
    total = r2.sum()
    if t * r1 >= (1 - t) * total:
        return (1 - t) * r2
    if total == 0.0:
        return np.zeros_like(r2)
    return t * r1 * (r2 / total)


def end_to_end(t: float, r1, r2_sum):
    """Per-relay ``min(t R1, (1-t) R2_sum)`` and their sum."""
    per_relay = np.minimum(t * np.asarray(r1, dtype=float), (1 - t) * np.asarray(r2_sum, dtype=float))
    return per_relay, float(per_relay.sum())


@dataclass(frozen=True)
class RateReport:
    R1: np.ndarray
    R2: np.ndarray
    R2_sum: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    beta: np.ndarray
    R_e2e: np.ndarray
    R_sum: float
    t: float


def rate_report(t: float, topology: Topology, r1, r2) -> RateReport:
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    r2_sum = np.bincount(topology.chi, weights=r2, minlength=topology.k_x)
    beta = np.zeros_like(r2)
    for k, served in enumerate(topology.relay_receivers):
        beta[served] = allocate_first_hop_rates(t, r1[k], r2[served])
    per_relay, total = end_to_end(t, r1, r2_sum)
    return RateReport(
        R1=r1,
        R2=r2,
        R2_sum=r2_sum,
        xi1=effective_sinr(r1),
        xi2=effective_sinr(r2_sum),
        beta=beta,
        R_e2e=per_relay,
        R_sum=total,
        t=t,
    )
