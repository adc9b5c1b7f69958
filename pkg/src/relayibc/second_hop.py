"""Phase 1: relay precoders for second-hop sum-rate maximization.

The second hop is handled as a stand-alone interference broadcast channel
and solved with the matrix-weighted sum-MSE iteration (weights equal to the
inverse MMSE matrices). Its output is the per-relay effective SINR that the
first-hop design matches against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _wmmse
from .rates import Hop, effective_sinr, hop_state, inv_pd, owner_sum, second_hop
from .topology import ChannelSet, SystemSpec, Topology

__all__ = [
    "SecondHopResult",
    "second_hop_filter_update",
    "second_hop_weight_update",
    "second_hop_precoder_update",
    "solve_second_hop",
    "solve_second_hop_batch",
    "init_second_hop",
]


def second_hop_filter_update(channels: ChannelSet, topology: Topology, F_X, spec: SystemSpec | None = None):
    """MMSE receive filter at every receiver."""
    st = hop_state(second_hop(channels, topology, spec), F_X)
    return st.filters


def second_hop_weight_update(mse):
    """``U_q = E_q^{-1}`` for each receiver's MMSE matrix."""
    mse = np.asarray(mse, dtype=complex)
    try:
        return inv_pd(mse)
    except ArithmeticError:
        return inv_pd(mse + 1e-12 * np.eye(mse.shape[-1]))


def second_hop_precoder_update(channels: ChannelSet, topology: Topology, W_R, U, p_x, spec: SystemSpec | None = None):
    """Relay precoders minimizing the weighted sum-MSE, one multiplier per
    relay. Returns ``(F_X, multipliers)``."""
    return _wmmse.precoder_update(second_hop(channels, topology, spec), np.asarray(W_R), np.asarray(U), p_x)


def init_second_hop(topology: Topology, spec: SystemSpec, rng) -> np.ndarray:
    return _wmmse.random_precoders(rng, topology.chi, topology.k_x, spec.n_x, spec.d2, spec.p_x)


@dataclass
class SecondHopResult:
    F_X: np.ndarray
    rates: np.ndarray  # per receiver
    r2_sum: np.ndarray  # per relay
    xi2_bar: np.ndarray  # per relay
    solve: _wmmse.SolveResult

    @property
    def trace(self):
        return self.solve.trace

    @property
    def converged(self) -> bool:
        return self.solve.converged


def _sum_rate(st, _active):
    return st.rates.sum(axis=-1)


def solve_second_hop_batch(
    G, topology: Topology, spec: SystemSpec, init_F_X, max_iter: int = 2000, tol: float = 1e-6
) -> _wmmse.BatchResult:
    """Phase 1 for a batch of problems.

    ``G`` is ``(B, K_R, K_X, N_R, N_X)`` or a single channel shared by the
    whole batch; ``init_F_X`` is ``(B, K_R, N_X, d2)``.
    """
    hop = _wmmse.batch_hop(Hop(np.asarray(G), topology.chi, spec.noise_r))
    return _wmmse.alternate(
        hop,
        init_F_X,
        spec.p_x,
        lambda st, _active: _wmmse.inverse_mse_weights(st),
        _sum_rate,
        phase="phase1",
        max_iter=max_iter,
        tol=tol,
    )


def solve_second_hop(
    channels: ChannelSet,
    topology: Topology,
    spec: SystemSpec,
    init_F_X,
    max_iter: int = 2000,
    tol: float = 1e-6,
) -> SecondHopResult:
    hop = second_hop(channels, topology, spec)
    res = solve_second_hop_batch(channels.G, topology, spec, np.asarray(init_F_X)[None], max_iter, tol)
    solve = _wmmse.single_result(hop, res)
    r2 = solve.state.rates
    r2_sum = owner_sum(r2, topology.chi, topology.k_x)
    return SecondHopResult(F_X=solve.precoders, rates=r2, r2_sum=r2_sum, xi2_bar=effective_sinr(r2_sum), solve=solve)
