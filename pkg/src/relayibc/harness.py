"""Experiment configuration, Monte Carlo orchestration and result files.

A configuration is a flat ``key = value`` text file::

    # comments start with '#'
    system = "(2^3 x 2^6 x 2^12, 1x1)"
    power_db = 0, 10, 20, 30
    t = 0.5
    realizations = 100
    n_init = 1, 5

Realization ``r`` draws its channels and initializations from streams
derived from ``(seed, r)`` only, so results do not depend on how many
worker processes share the work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from .pipeline import ALL_VARIANTS, SolverSettings, VariantId, solve_realization, with_power
from .topology import SpecError, SystemSpec, build_topology, parse_system_spec, sample_channels

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "AggregateRow",
    "RealizationSummary",
    "CSV_HEADER",
    "load_config",
    "parse_config",
    "realization_seed",
    "run_realization",
    "monte_carlo",
    "timesharing_sweep",
    "argmax_t",
    "emit_results",
    "read_results",
]

CSV_HEADER = ("power_db", "t", "variant", "n_init", "mean_sum_rate_bits", "stderr_bits", "realizations")


class ConfigError(ValueError):
    """Unparseable or invalid experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    system: str
    power_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    t: tuple = (0.5,)
    realizations: int = 100
    seed: int = 0
    variants: tuple = tuple(v.value for v in ALL_VARIANTS)
    n_init: tuple = (1,)
    parallel: int = 1
    out: str = "results"
    p_x_offset_db: float = 0.0
    noise_x: float = 1.0
    noise_r: float = 1.0
    tol: float = 1e-6
    max_iter_phase1: int = 2000
    max_iter_phase2: int = 2000
    max_iter_phase3: int = 30
    traces: bool = False

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid configuration: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        try:
            parse_system_spec(self.system, noise_x=self.noise_x, noise_r=self.noise_r)
        except SpecError as exc:
            out.append(f"system: {exc}")
        if self.realizations < 1:
            out.append(f"realizations must be >= 1 (got {self.realizations})")
        for name in ("power_db", "t", "variants", "n_init"):
            if len(getattr(self, name)) == 0:
                out.append(f"{name} must be nonempty")
        for t in self.t:
            if not 0.0 < t < 1.0:
                out.append(f"t={t} must lie in (0, 1)")
        for n in self.n_init:
            if n < 1:
                out.append(f"n_init={n} must be >= 1")
        for v in self.variants:
            if v not in {x.value for x in ALL_VARIANTS}:
                out.append(f"unknown variant {v!r}")
        if self.parallel < 1:
            out.append("parallel must be >= 1")
        if self.tol <= 0:
            out.append("tol must be positive")
        for name in ("max_iter_phase1", "max_iter_phase2", "max_iter_phase3"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        return out

    @property
    def spec(self) -> SystemSpec:
        return parse_system_spec(self.system, t=self.t[0], noise_x=self.noise_x, noise_r=self.noise_r)

    @property
    def settings(self) -> SolverSettings:
        return SolverSettings(self.max_iter_phase1, self.max_iter_phase2, self.max_iter_phase3, self.tol)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **_coerce_all(kw)) if kw else self

    def canonical(self) -> str:
        """Stable text form used for hashing. Output location and worker
        count do not affect results and are left out."""
        d = asdict(self)
        d.pop("out")
        d.pop("parallel")
        return json.dumps(d, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


_TUPLE_FLOAT = {"power_db", "t"}
_TUPLE_INT = {"n_init"}
_TUPLE_STR = {"variants"}
_INT = {"realizations", "seed", "parallel", "max_iter_phase1", "max_iter_phase2", "max_iter_phase3"}
_FLOAT = {"p_x_offset_db", "noise_x", "noise_r", "tol"}
_BOOL = {"traces"}
_STR = {"system", "out"}
_KEYS = {f.name for f in fields(ExperimentConfig)}


def _unquote(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _split_list(text: str) -> list[str]:
    return [_unquote(p) for p in text.split(",") if p.strip()]


def _coerce(key: str, value):
    if isinstance(value, str):
        raw = value
        if key in _TUPLE_FLOAT:
            return tuple(float(x) for x in _split_list(raw))
        if key in _TUPLE_INT:
            return tuple(int(x) for x in _split_list(raw))
        if key in _TUPLE_STR:
            return tuple(_split_list(raw))
        raw = _unquote(raw)
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _BOOL:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return raw
    if key in _TUPLE_FLOAT:
        return tuple(float(x) for x in np.atleast_1d(value))
    if key in _TUPLE_INT:
        return tuple(int(x) for x in np.atleast_1d(value))
    if key in _TUPLE_STR:
        return (value,) if isinstance(value, str) else tuple(value)
    return value


def _coerce_all(kw: dict) -> dict:
    out = {}
    for k, v in kw.items():
        if k not in _KEYS:
            raise ConfigError(f"unknown configuration key {k!r}")
        try:
            out[k] = _coerce(k, v)
        except ValueError as exc:
            raise ConfigError(f"{k}: {exc}") from None
    return out


def parse_config(text: str, source: str = "<string>", **overrides) -> ExperimentConfig:
    """Parse configuration text; ``overrides`` replace file keys."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = _strip_comment(line).strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _coerce(key, value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    values.update(_coerce_all({k: v for k, v in overrides.items() if v is not None}))
    if "system" not in values:
        raise ConfigError(f"{source}: missing required key 'system'")
    return ExperimentConfig(**values)


def _strip_comment(line: str) -> str:
    # '#' starts a comment unless it sits inside quotes
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path), **overrides)


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def realization_seed(master: int, r: int) -> int:
    """64-bit seed of realization ``r``: a hash of ``(master, r)``."""
    ss = np.random.SeedSequence(entropy=int(master) & ((1 << 64) - 1), spawn_key=(int(r),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class AggregateRow:
    power_db: float
    t: float
    variant: str
    n_init: int
    mean_sum_rate_bits: float
    stderr_bits: float
    realizations: int

    def as_csv(self) -> list[str]:
        return [
            repr(float(self.power_db)),
            repr(float(self.t)),
            self.variant,
            str(self.n_init),
            repr(float(self.mean_sum_rate_bits)),
            repr(float(self.stderr_bits)),
            str(self.realizations),
        ]


@dataclass
class RealizationSummary:
    """Per-realization values keyed by ``(power_db, t, variant, n_init)``."""

    index: int
    values: dict
    upper_bounds: dict  # (power_db, t, n_init) -> bits
    pc_iterations: dict  # (power_db, t, variant) -> phase-3 steps of init 0
    unconverged: int
    traces: dict = field(default_factory=dict)  # relative path -> list of TraceRecord


def _cell_dir(power_db: float, t: float) -> str:
    return f"p{power_db:g}dB_t{t:g}"


def run_realization(config: ExperimentConfig, r: int) -> RealizationSummary:
    """All cells of one channel realization."""
    base = config.spec
    topology = build_topology(base)
    seed = realization_seed(config.seed, r)
    channels = sample_channels(topology, base, seed)
    n_max = max(config.n_init)
    variants = tuple(VariantId(v) for v in config.variants)
    values, ub, pc_it, traces = {}, {}, {}, {}
    unconverged = 0
    multi_cell = len(config.power_db) * len(config.t) > 1
    for p in config.power_db:
        spec = with_power(base, p, config.p_x_offset_db)
        res = solve_realization(
            channels,
            topology,
            spec,
            seed,
            n_init=n_max,
            t_values=config.t,
            variants=variants,
            settings=config.settings,
            keep_outcomes=config.traces,
        )
        for ti, t in enumerate(res.t_values):
            t = float(t)
            for n in config.n_init:
                ub[(p, t, n)] = float(np.max(res.upper_bounds[:n, ti]))
            for v in variants:
                col = res.sum_rates[v][:, ti]
                for n in config.n_init:
                    values[(p, t, v.value, n)] = float(np.max(col[:n]))
                pc_it[(p, t, v.value)] = int(res.pc_iterations[v][0, ti])
                unconverged += int(np.count_nonzero(~res.solver_converged[v][:, ti]))
                if config.traces:
                    best = res.best(v, n_max, ti)
                    name = f"r{r:05d}_{v.value}.jsonl"
                    if multi_cell:
                        name = os.path.join(_cell_dir(p, t), name)
                    traces[name] = res.outcomes[(v, best, ti)].trace_records()
    return RealizationSummary(index=r, values=values, upper_bounds=ub, pc_iterations=pc_it, unconverged=unconverged, traces=traces)


def _worker(args):
    config, r = args
    return run_realization(config, r)


def run_realizations(config: ExperimentConfig, progress=None) -> list[RealizationSummary]:
    """Every realization, returned in index order."""
    jobs = [(config, r) for r in range(config.realizations)]
    out = []
    if config.parallel == 1:
        for job in jobs:
            out.append(_worker(job))
            if progress:
                progress(len(out), len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=config.parallel) as pool:
            for s in pool.map(_worker, jobs):
                out.append(s)
                if progress:
                    progress(len(out), len(jobs))
    return out


def aggregate(config: ExperimentConfig, summaries: list[RealizationSummary]) -> list[AggregateRow]:
    """Mean and standard error per cell, reduced in realization order."""
    rows = []
    n = len(summaries)
    for p in config.power_db:
        for t in config.t:
            for v in config.variants:
                for N in config.n_init:
                    vals = np.array([s.values[(p, float(t), v, N)] for s in summaries])
                    se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                    rows.append(AggregateRow(float(p), float(t), v, int(N), float(np.mean(vals)), se, n))
    return rows


def monte_carlo(config: ExperimentConfig, progress=None, return_summaries: bool = False):
    """Aggregate rows for every (power, t, variant, n_init) cell."""
    summaries = run_realizations(config, progress)
    rows = aggregate(config, summaries)
    return (rows, summaries) if return_summaries else rows


def argmax_t(rows) -> dict:
    """Best timesharing value per ``(power_db, variant, n_init)``; ties go
    to the smallest t."""
    best = {}
    for row in rows:
        key = (row.power_db, row.variant, row.n_init)
        if key not in best or row.mean_sum_rate_bits > best[key][1]:
            best[key] = (row.t, row.mean_sum_rate_bits)
    return {k: v[0] for k, v in best.items()}


def timesharing_sweep(config: ExperimentConfig, progress=None, return_summaries: bool = False):
    """Monte Carlo over the configured t grid plus the argmax t per
    variant. Returns ``(rows, argmax)`` (and the summaries if asked)."""
    if len(config.t) < 2:
        raise ConfigError("a timesharing sweep needs at least two t values")
    rows, summaries = monte_carlo(config, progress, return_summaries=True)
    best = argmax_t(rows)
    return (rows, best, summaries) if return_summaries else (rows, best)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow(row.as_csv())
    return buf.getvalue()


def _write(path: str, text: str):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from None


def emit_results(rows, traces, outdir, config: ExperimentConfig | None = None, extra: dict | None = None) -> dict:
    """Write ``results.csv``, one JSON-lines trace file per entry of
    ``traces`` and ``manifest.json``. Returns the written paths."""
    try:
        os.makedirs(outdir, exist_ok=True)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot create output directory {outdir}: {exc.strerror}") from None
    written = {"results": os.path.join(outdir, "results.csv"), "traces": []}
    _write(written["results"], _csv_text(rows))
    for name, records in (traces or {}).items():
        path = os.path.join(outdir, "traces", name)
        try:
            os.makedirs(os.path.dirname(path), exist_ok=True)
        except OSError as exc:
            raise OSError(exc.errno, f"cannot create {os.path.dirname(path)}: {exc.strerror}") from None
        lines = [json.dumps(rec.as_dict() if hasattr(rec, "as_dict") else rec) for rec in records]
        _write(path, "".join(line + "\n" for line in lines))
        written["traces"].append(path)
    manifest = {
        "code_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if config is not None:
        manifest.update(config_hash=config.digest(), seed=config.seed, config=json.loads(config.canonical()))
    if extra:
        manifest.update(extra)
    written["manifest"] = os.path.join(outdir, "manifest.json")
    _write(written["manifest"], json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written


def read_results(path) -> list[AggregateRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [
            AggregateRow(float(a), float(b), c, int(d), float(e), float(f), int(g)) for a, b, c, d, e, f, g in reader
        ]
