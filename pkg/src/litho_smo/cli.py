"""Command-line front end: simulate, optimize, gradcheck, benchmark.

Exit codes: 0 success, 1 validation error, 2 numeric failure, 3 gradcheck
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, OpticalConfig, OptimizerConfig, apply_overrides, parse_key_values
from .harness import (
    GRADCHECK_DEFAULTS,
    IMAGING_COLUMNS,
    METHOD_COLUMNS,
    RUN_COLUMNS,
    SUITE_PREFIX,
    ExperimentSpec,
    benchmark,
    format_table,
    gradcheck,
    gradcheck_quadratic,
    imaging_benchmark,
    load_target,
    run_experiment,
    simulate,
)
from .metrics import EpeSpec
from .optimizers import Method
from .patterns import SUITE_NAMES

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("litho_smo")


def _overrides(args) -> dict[str, str]:
    pairs: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        pairs.update(parse_key_values(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def _split(pairs: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    optical_keys = set(OpticalConfig.__dataclass_fields__)
    optimizer_keys = set(OptimizerConfig.__dataclass_fields__)
    unknown = sorted(set(pairs) - optical_keys - optimizer_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return ({k: v for k, v in pairs.items() if k in optical_keys}, {k: v for k, v in pairs.items() if k in optimizer_keys})


def _spec(args, pattern: str, method, output_dir=None, extra: dict[str, str] | None = None) -> ExperimentSpec:
    pairs = {**(extra or {}), **_overrides(args)}
    optical, optimizer = _split(pairs)
    return ExperimentSpec(
        pattern=pattern,
        method=method,
        output_dir=output_dir,
        seed=args.seed,
        optical_overrides=optical,
        optimizer_overrides=optimizer,
        source_template=args.source_template,
        epe=EpeSpec(args.epe_step, args.epe_threshold),
    )


def cmd_simulate(args) -> int:
    optical, _ = apply_overrides(OpticalConfig(), OptimizerConfig(), _split(_overrides(args))[0])
    ev = simulate(args.pattern, optical, args.source_template, args.out, EpeSpec(args.epe_step, args.epe_threshold))
    print(f"L2 {ev.l2_nm2:g} nm^2  PVB {ev.pvb_nm2:g} nm^2  EPE {ev.epe_count}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    spec = _spec(args, args.pattern, args.method, args.out)
    res = run_experiment(spec)
    s = res.summary
    print(f"{s['method']} on {s['pattern']}: {s['iters']} iterations, loss {res.report.initial_loss.total:.6g} -> {s['final_loss']:.6g}")
    print(f"L2 {s['l2_nm2']:g} nm^2  PVB {s['pvb_nm2']:g} nm^2  EPE {s['epe_count']}  ({res.timing['total_s']:.1f} s)")
    if s["error"]:
        print(f"error: {s['error']}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _corrupt(g):
    return g * 1.01


def cmd_gradcheck(args) -> int:
    corrupt = _corrupt if args.corrupt_gradient else None
    if args.fixture == "quadratic":
        report = gradcheck_quadratic(args.seed, corrupt=corrupt)
    else:
        report = gradcheck(_spec(args, args.pattern, Method.NMN, extra=dict(GRADCHECK_DEFAULTS)), corrupt=corrupt)
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def cmd_benchmark(args) -> int:
    patterns = args.patterns or [SUITE_PREFIX + n for n in SUITE_NAMES]
    methods = [Method(m.strip().upper()) for m in args.methods.split(",") if m.strip()]
    out = Path(args.out) if args.out else None
    specs = []
    for pattern in patterns:
        for method in methods:
            run_dir = None if out is None else str(out / f"{Path(pattern.replace(SUITE_PREFIX, '')).stem}_{method.value}")
            specs.append(_spec(args, pattern, method, run_dir))
    if not args.skip_runs:
        runs, table = benchmark(specs, args.workers)
        text = format_table(METHOD_COLUMNS, table)
        print(text, end="")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "benchmark_runs.csv").write_text(format_table(RUN_COLUMNS, runs))
            (out / "benchmark_methods.csv").write_text(text)
    if args.imaging:
        optical, _ = specs[0].configs()
        rows = imaging_benchmark(load_target(patterns[0], optical), optical, template=args.source_template)
        text = format_table(IMAGING_COLUMNS, rows)
        print(text, end="")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "imaging_timing.csv").write_text(text)
    return EXIT_OK


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    p.add_argument("--config", help="key = value config file applied before --set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-template", default="annular", choices=("annular", "quasar", "dipole"))
    p.add_argument("--epe-step", type=float, default=40.0, help="EPE sample spacing in nm")
    p.add_argument("--epe-threshold", type=float, default=15.0, help="EPE violation threshold in nm")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="litho-smo", description="Source-mask optimization with Abbe imaging and bilevel hypergradients.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    pattern_help = f"rectangle list, graymap, or {SUITE_PREFIX}<name> ({', '.join(SUITE_NAMES)})"

    p = sub.add_parser("simulate", help="forward imaging of the target used as its own mask")
    p.add_argument("pattern", help=pattern_help)
    p.add_argument("--out", help="directory for aerial.pgm and resist_nominal.pgm")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optimize", help="run one optimization method and write artifacts")
    p.add_argument("pattern", help=pattern_help)
    p.add_argument("--method", default="NMN", type=str.upper, choices=[m.value for m in Method])
    p.add_argument("--out", required=True, help="output directory")
    _common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("pattern", nargs="?", default=SUITE_PREFIX + "mixed", help=pattern_help)
    p.add_argument("--fixture", choices=("smo", "quadratic"), default="smo")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("benchmark", help="run methods over patterns and tabulate results")
    p.add_argument("patterns", nargs="*", help=f"patterns (default: the whole {SUITE_PREFIX} suite)")
    p.add_argument("--methods", default="MO,AM,FD,NMN,CG")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="directory for per-run artifacts and CSV tables")
    p.add_argument("--imaging", action="store_true", help="also time Abbe against Hopkins forward imaging")
    p.add_argument("--skip-runs", action="store_true", help="only run the imaging timing")
    _common(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
