"""The four compared algorithms and the opportunistic wrapper.

All variants of one initialization share the phase-1 relay precoders and
the first-hop starting point:

* ``baseline``: first hop solved for its own sum-rate (phase 2 with
  ``eta = inf``), ignoring the timesharing value and the second hop.
* ``baseline_pc``: baseline followed by rate-matching power control.
* ``after_phase2``: phases 1 and 2.
* ``final``: phases 1, 2 and 3.

:func:`solve_realization` is the batched workhorse used by the harness:
for one channel realization it runs ``n_init`` initializations for every
requested timesharing value in a single vectorized pass per phase.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import _wmmse
from .first_hop import rate_matching_sinr, solve_first_hop_batch
from .power_control import decompose_precoders, run_power_control
from .rates import Hop, PrecoderSet, RateReport, effective_sinr, hop_state, owner_sum, rate_report
from .second_hop import solve_second_hop_batch
from .topology import ChannelSet, SystemSpec, Topology, make_rng

__all__ = [
    "VariantId",
    "ALL_VARIANTS",
    "SolverSettings",
    "RunOutcome",
    "RealizationResult",
    "Phase1Cache",
    "solve_realization",
    "run_variant",
    "run_all_variants",
    "opportunistic_best",
    "upper_bound_rate",
    "init_rngs",
    "with_power",
]


class VariantId(str, enum.Enum):
    BASELINE = "baseline"
    BASELINE_PC = "baseline_pc"
    AFTER_PHASE2 = "after_phase2"
    FINAL = "final"

    def __str__(self) -> str:
        return self.value

    @property
    def first_hop_source(self) -> str:
        return "baseline" if self in (VariantId.BASELINE, VariantId.BASELINE_PC) else "phase2"

    @property
    def power_control(self) -> bool:
        return self in (VariantId.BASELINE_PC, VariantId.FINAL)


ALL_VARIANTS = tuple(VariantId)


@dataclass(frozen=True)
class SolverSettings:
    max_iter_phase1: int = 2000
    max_iter_phase2: int = 2000
    max_iter_phase3: int = 30
    tol: float = 1e-6


@dataclass
class RunOutcome:
    variant: VariantId
    report: RateReport
    precoders: PrecoderSet
    traces: dict  # phase name -> list of TraceRecord
    converged: dict  # phase name -> bool
    wall_time: float
    seed: int
    init_id: int
    upper_bound: float = float("nan")
    pc_iterations: int = 0

    @property
    def sum_rate(self) -> float:
        return self.report.R_sum

    def trace_records(self) -> list:
        return [rec for phase in ("phase1", "phase2", "phase3") for rec in self.traces.get(phase, [])]


def init_rngs(init_seed: int, init_id: int):
    """Independent streams for the relay and transmitter starting points."""
    return make_rng(init_seed, 1, init_id), make_rng(init_seed, 2, init_id)


class Phase1Cache:
    """Phase-1 batch results keyed by ``(channel digest, seed, n_init,
    power, settings)`` so that every variant reuses the same relay
    precoders."""

    def __init__(self):
        self._store = {}

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]

    def __len__(self) -> int:
        return len(self._store)


@dataclass
class RealizationResult:
    """Sum-rates of every (variant, init, t) for one channel realization."""

    t_values: np.ndarray
    sum_rates: dict  # variant -> (n_init, T)
    upper_bounds: np.ndarray  # (n_init, T)
    pc_iterations: dict  # variant -> (n_init, T), 0 for variants without phase 3
    pc_converged: dict  # variant -> (n_init, T)
    solver_converged: dict  # variant -> (n_init, T), phases 1-2 (and 3 if used)
    outcomes: dict = field(default_factory=dict, repr=False)  # (variant, n, ti) -> RunOutcome

    def best(self, variant, n: int, ti: int = 0) -> int:
        """Index of the best of the first ``n`` initializations."""
        return int(np.argmax(self.sum_rates[VariantId(variant)][:n, ti]))


def _phase1(channels, topology, spec, init_seed, n_init, settings):
    starts = []
    for i in range(n_init):
        rng_x, _ = init_rngs(init_seed, i)
        starts.append(_wmmse.random_precoders(rng_x, topology.chi, topology.k_x, spec.n_x, spec.d2, spec.p_x))
    return solve_second_hop_batch(
        channels.G, topology, spec, np.stack(starts), max_iter=settings.max_iter_phase1, tol=settings.tol
    )


def _first_hop_starts(topology, spec, init_seed, n_init):
    starts = []
    for i in range(n_init):
        _, rng_t = init_rngs(init_seed, i)
        starts.append(_wmmse.random_precoders(rng_t, topology.mu, topology.k_t, spec.n_t, spec.d1, spec.p_t))
    return np.stack(starts)


def solve_realization(
    channels: ChannelSet,
    topology: Topology,
    spec: SystemSpec,
    init_seed: int,
    *,
    n_init: int = 1,
    t_values=None,
    variants=ALL_VARIANTS,
    settings: SolverSettings | None = None,
    keep_outcomes: bool = False,
    xi2_override=None,
    cache: Phase1Cache | None = None,
) -> RealizationResult:
    """Run the requested variants for ``n_init`` initializations and every
    timesharing value in ``t_values`` (default: ``spec.t``).

    ``xi2_override`` replaces the second-hop effective SINRs that phase 2
    targets (the relay precoders and end-to-end evaluation are unchanged).
    """
    settings = settings or SolverSettings()
    variants = tuple(VariantId(v) for v in variants)
    t_values = np.atleast_1d(np.asarray(spec.t if t_values is None else t_values, dtype=float))
    T = t_values.size
    hop1 = Hop(channels.H, topology.mu, spec.noise_x)
    clock = time.perf_counter()

    # phase 1, shared by all variants and all t
    def build():
        return _phase1(channels, topology, spec, init_seed, n_init, settings)

    key = (channels.digest(), int(init_seed), n_init, spec.p_x, spec.noise_r, settings)
    p1 = build() if cache is None else cache.get(key, build)
    F_X = p1.precoders
    st2 = hop_state(Hop(channels.G[None], topology.chi, spec.noise_r), F_X)
    r2 = st2.rates  # (n_init, K_R)
    r2_sum = owner_sum(r2, topology.chi, topology.k_x)  # (n_init, K_X)
    xi2 = effective_sinr(r2_sum) if xi2_override is None else np.broadcast_to(
        np.asarray(xi2_override, dtype=float), r2_sum.shape
    )
    upper = (1.0 - t_values)[None, :] * r2_sum.sum(axis=1)[:, None]
    t_phase1 = time.perf_counter() - clock

    FT0 = _first_hop_starts(topology, spec, init_seed, n_init)
    first_hop = {}
    timing = {}
    if any(v.first_hop_source == "baseline" for v in variants):
        clock = time.perf_counter()
        base = solve_first_hop_batch(
            channels.H, topology, spec, 0.5, np.inf, FT0, settings.max_iter_phase2, settings.tol, phase="phase2"
        )
        # baseline runs are t-independent; report them at each cell's t
        first_hop["baseline"] = (base, lambda n, ti: n)
        timing["baseline"] = time.perf_counter() - clock
    if any(v.first_hop_source == "phase2" for v in variants):
        clock = time.perf_counter()
        eta = rate_matching_sinr(xi2[:, None, :], t_values[None, :, None]).reshape(n_init * T, -1)
        tt = np.tile(t_values, n_init)
        p2 = solve_first_hop_batch(
            channels.H, topology, spec, tt, eta, np.repeat(FT0, T, axis=0), settings.max_iter_phase2, settings.tol
        )
        first_hop["phase2"] = (p2, lambda n, ti: n * T + ti)
        timing["phase2"] = time.perf_counter() - clock

    sums = {v: np.zeros((n_init, T)) for v in variants}
    pc_it = {v: np.zeros((n_init, T), dtype=int) for v in variants}
    pc_ok = {v: np.ones((n_init, T), dtype=bool) for v in variants}
    solver_ok = {v: np.ones((n_init, T), dtype=bool) for v in variants}
    outcomes = {}
    for v in variants:
        res, member = first_hop[v.first_hop_source]
        for n in range(n_init):
            for ti, t in enumerate(t_values):
                clock = time.perf_counter()
                m = member(n, ti)
                F_T = res.precoders[m]
                r1 = hop_state(hop1, F_T).rates
                pc = None
                if v.power_control:
                    eta_k = rate_matching_sinr(xi2[n], t)
                    state = decompose_precoders(F_T, eta=eta_k, t=t).bind(channels, topology, spec.noise_x)
                    pc = run_power_control(state, max_iter=settings.max_iter_phase3)
                    if pc.iterations:
                        F_T = pc.F_T
                        r1 = hop_state(hop1, F_T).rates
                    pc_it[v][n, ti] = pc.iterations
                    pc_ok[v][n, ti] = pc.converged
                report = rate_report(float(t), topology, r1, r2[n])
                sums[v][n, ti] = report.R_sum
                ok = bool(p1.converged[n] and res.converged[m] and (pc is None or pc.converged))
                solver_ok[v][n, ti] = ok
                if keep_outcomes:
                    traces = {"phase1": p1.trace(n), "phase2": _retag(res, m, float(t))}
                    converged = {"phase1": bool(p1.converged[n]), "phase2": bool(res.converged[m])}
                    if pc is not None:
                        traces["phase3"] = pc.trace
                        converged["phase3"] = pc.converged
                    elapsed = t_phase1 / (n_init * T) + timing[v.first_hop_source] / res.precoders.shape[0]
                    outcomes[(v, n, ti)] = RunOutcome(
                        variant=v,
                        report=report,
                        precoders=PrecoderSet(F_T=F_T, F_X=F_X[n]),
                        traces=traces,
                        converged=converged,
                        wall_time=elapsed + time.perf_counter() - clock,
                        seed=int(init_seed),
                        init_id=n,
                        upper_bound=float(upper[n, ti]),
                        pc_iterations=int(pc_it[v][n, ti]),
                    )
    return RealizationResult(
        t_values=t_values,
        sum_rates=sums,
        upper_bounds=upper,
        pc_iterations=pc_it,
        pc_converged=pc_ok,
        solver_converged=solver_ok,
        outcomes=outcomes,
    )


def _retag(res: _wmmse.BatchResult, member: int, t: float) -> list:
    # baseline members carry a nominal t; report the cell's t instead
    records = res.trace(member)
    if res.objective_scale is None:
        return records
    c = t / float(res.objective_scale[member])
    for r in records:
        r.objective_bits *= c
    return records


def run_all_variants(
    channels: ChannelSet,
    topology: Topology,
    spec: SystemSpec,
    init_seed: int,
    *,
    init_id: int = 0,
    settings: SolverSettings | None = None,
    variants=ALL_VARIANTS,
    cache: Phase1Cache | None = None,
) -> dict:
    """Every variant for one initialization, sharing phases 1 and 2."""
    res = solve_realization(
        channels,
        topology,
        spec,
        init_seed,
        n_init=init_id + 1,
        variants=variants,
        settings=settings,
        keep_outcomes=True,
        cache=cache,
    )
    return {VariantId(v): res.outcomes[(VariantId(v), init_id, 0)] for v in variants}


def run_variant(
    channels: ChannelSet,
    topology: Topology,
    spec: SystemSpec,
    variant,
    init_seed: int,
    *,
    settings: SolverSettings | None = None,
    cache: Phase1Cache | None = None,
) -> RunOutcome:
    v = VariantId(variant)
    return run_all_variants(channels, topology, spec, init_seed, settings=settings, variants=(v,), cache=cache)[v]


def opportunistic_best(
    channels: ChannelSet,
    topology: Topology,
    spec: SystemSpec,
    variant,
    N: int,
    seed: int,
    *,
    settings: SolverSettings | None = None,
    cache: Phase1Cache | None = None,
) -> RunOutcome:
    """Best end-to-end sum-rate over ``N`` random initializations of phases
    1 and 2 (ties go to the earliest initialization)."""
    if N < 1:
        raise ValueError("N must be at least 1")
    v = VariantId(variant)
    res = solve_realization(
        channels, topology, spec, seed, n_init=N, variants=(v,), settings=settings, keep_outcomes=True, cache=cache
    )
    return res.outcomes[(v, res.best(v, N), 0)]


def upper_bound_rate(
    channels: ChannelSet,
    topology: Topology,
    spec: SystemSpec,
    init_seed: int = 0,
    *,
    phase1=None,
    settings: SolverSettings | None = None,
) -> float:
    """``sum_k (1 - t) R2_sum_k`` for the phase-1 relay precoders.

    ``phase1`` may be a :class:`~relayibc.second_hop.SecondHopResult`, an
    array of per-relay second-hop sum-rates, or None to run phase 1 from
    ``init_seed``.
    """
    if phase1 is None:
        settings = settings or SolverSettings()
        p1 = _phase1(channels, topology, spec, init_seed, 1, settings)
        rates = hop_state(Hop(channels.G[None], topology.chi, spec.noise_r), p1.precoders).rates[0]
        r2_sum = owner_sum(rates, topology.chi, topology.k_x)
    elif hasattr(phase1, "r2_sum"):
        r2_sum = phase1.r2_sum
    else:
        r2_sum = np.asarray(phase1, dtype=float)
    return float((1.0 - spec.t) * np.sum(r2_sum))


def with_power(spec: SystemSpec, p_t_db: float, p_x_offset_db: float = 0.0, t: float | None = None) -> SystemSpec:
    """``spec`` at transmitter power ``p_t_db`` and relay power
    ``p_t_db + p_x_offset_db``."""
    return replace(spec, p_t_db=float(p_t_db), p_x_db=float(p_t_db) + float(p_x_offset_db), t=spec.t if t is None else t)
