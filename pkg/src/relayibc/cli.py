"""Command-line entry point: ``relayibc {run,sweep-t,single,validate}``."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .harness import (
    ConfigError,
    ExperimentConfig,
    _coerce_all,
    emit_results,
    load_config,
    monte_carlo,
    realization_seed,
    timesharing_sweep,
)
from .pipeline import VariantId, solve_realization, with_power
from .topology import SpecError, build_topology, sample_channels


def _floats(text: str):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str):
    return tuple(int(x) for x in text.split(",") if x.strip())


def _strs(text: str):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relayibc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--system", help='system, e.g. "(2^3 x 2^6 x 2^12, 1x1)"')
    common.add_argument("--seed", type=int)
    common.add_argument("--realizations", type=int)
    common.add_argument("--out")
    common.add_argument("--parallel", type=int)
    common.add_argument("--power-db", type=_floats, help="comma-separated transmitter powers in dB")
    common.add_argument("--t", type=_floats, help="comma-separated timesharing values")
    common.add_argument("--n-init", type=_ints, help="comma-separated opportunistic restart counts")
    common.add_argument("--variants", type=_strs)
    common.add_argument("--p-x-offset-db", type=float, help="relay power minus transmitter power, dB")
    common.add_argument("--traces", action="store_true", default=None, help="write per-realization trace files")
    sub.add_parser("run", parents=[common], help="Monte Carlo over powers, t values, variants and N")
    sub.add_parser("sweep-t", parents=[common], help="Monte Carlo over a t grid; reports the best t")
    single = sub.add_parser("single", parents=[common], help="one realization with full traces")
    single.add_argument("--realization", type=int, default=0, help="realization index")
    sub.add_parser("validate", parents=[common], help="check the configuration and exit")
    return parser


def _config(args) -> ExperimentConfig:
    overrides = dict(
        system=args.system,
        seed=args.seed,
        realizations=args.realizations,
        out=args.out,
        parallel=args.parallel,
        power_db=args.power_db,
        t=args.t,
        n_init=args.n_init,
        variants=args.variants,
        p_x_offset_db=args.p_x_offset_db,
        traces=args.traces,
    )
    if args.config:
        return load_config(args.config, **overrides)
    if args.system is None:
        raise ConfigError("either --config or --system is required")
    kw = {k: v for k, v in overrides.items() if v is not None}
    return ExperimentConfig(**_coerce_all(kw))


def _progress(done: int, total: int):
    print(f"\r{done}/{total} realizations", end="" if done < total else "\n", file=sys.stderr, flush=True)


def _print_rows(rows):
    print(f"{'power_db':>8} {'t':>6} {'variant':>13} {'N':>3} {'mean':>9} {'stderr':>8}")
    for r in rows:
        print(f"{r.power_db:8g} {r.t:6g} {r.variant:>13} {r.n_init:3d} {r.mean_sum_rate_bits:9.4f} {r.stderr_bits:8.4f}")


def _cmd_run(config: ExperimentConfig):
    rows, summaries = monte_carlo(config, _progress, return_summaries=True)
    traces = {k: v for s in summaries for k, v in s.traces.items()}
    unconverged = sum(s.unconverged for s in summaries)
    paths = emit_results(rows, traces, config.out, config, extra={"unconverged_solver_runs": unconverged})
    _print_rows(rows)
    print(f"wrote {paths['results']}")
    return 0


def _cmd_sweep(config: ExperimentConfig):
    rows, best, summaries = timesharing_sweep(config, _progress, return_summaries=True)
    traces = {k: v for s in summaries for k, v in s.traces.items()}
    extra = {
        "argmax_t": [
            {"power_db": p, "variant": v, "n_init": n, "t": t} for (p, v, n), t in sorted(best.items())
        ],
        "unconverged_solver_runs": sum(s.unconverged for s in summaries),
    }
    paths = emit_results(rows, traces, config.out, config, extra=extra)
    _print_rows(rows)
    for (p, v, n), t in sorted(best.items()):
        print(f"best t at {p:g} dB for {v} (N={n}): {t:g}")
    print(f"wrote {paths['results']}")
    return 0


def _cmd_single(config: ExperimentConfig, index: int):
    base = config.spec
    topology = build_topology(base)
    seed = realization_seed(config.seed, index)
    channels = sample_channels(topology, base, seed)
    traces = {}
    variants = tuple(VariantId(v) for v in config.variants)
    n_max = max(config.n_init)
    print(f"realization {index}: seed {seed}, channels {channels.digest()}")
    for p in config.power_db:
        spec = with_power(base, p, config.p_x_offset_db)
        res = solve_realization(
            channels, topology, spec, seed, n_init=n_max, t_values=config.t, variants=variants,
            settings=config.settings, keep_outcomes=True,
        )
        for ti, t in enumerate(res.t_values):
            print(f"-- {p:g} dB, t = {t:g}, upper bound {np.max(res.upper_bounds[:, ti]):.4f} bits")
            for v in variants:
                best = res.best(v, n_max, ti)
                o = res.outcomes[(v, best, ti)]
                its = {k: len(x) for k, x in o.traces.items()}
                print(f"{v.value:>13}: R_sum {o.sum_rate:.4f} bits  init {best}  iterations {its}")
                print(f"{'':>15}R_e2e per relay {np.array2string(o.report.R_e2e, precision=3)}")
                name = f"r{index:05d}_{v.value}.jsonl"
                if len(config.power_db) * len(res.t_values) > 1:
                    name = f"p{p:g}dB_t{t:g}/" + name
                traces[name] = o.trace_records()
    emit_results([], traces, config.out, config, extra={"realization": index})
    print(f"wrote traces under {config.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config(args)
        if args.command == "validate":
            print(f"configuration OK ({config.digest()})")
            for key, value in sorted(vars(config).items()):
                print(f"  {key} = {value}")
            return 0
        if args.command == "run":
            return _cmd_run(config)
        if args.command == "sweep-t":
            return _cmd_sweep(config)
        return _cmd_single(config, args.realization)
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
