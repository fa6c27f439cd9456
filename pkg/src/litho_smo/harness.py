"""Experiment orchestration: run a method on a target and write artifacts."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, OpticalConfig, OptimizerConfig, apply_overrides, dump_config
from .core import SourceGrid, TargetPattern, init_mask_params, init_source_params, sigmoid, source_coords
from .imaging import mirror_key, abbe_aerial, build_pupil, build_tcc, hopkins_aerial, plan_source, resist, socs_decompose
from .lossgrad import SmoObjective, finite_difference_grad, relative_error
from .metrics import EpeSpec, binarize, epe_measure, metric_l2, metric_pvb
from .optimizers import Method, QuadraticBilevel, RunReport, SmoProblem, run_method
from .patterns import binary_graymap, ingest_pattern, quantize, suite_target, write_graymap

SUITE_PREFIX = "suite:"


@dataclass
class ExperimentSpec:
    """One optimization run.

    ``pattern`` is a file path or ``suite:<name>`` for a bundled target.
    Optimization consumes no randomness; ``seed`` picks the random
    parameters of :func:`gradcheck` and is recorded in the summary.
    """

    pattern: str
    method: Method = Method.NMN
    output_dir: str | None = None
    seed: int = 0
    optical_overrides: dict[str, str] = field(default_factory=dict)
    optimizer_overrides: dict[str, str] = field(default_factory=dict)
    source_template: str = "annular"
    epe: EpeSpec = field(default_factory=EpeSpec)

    def __post_init__(self) -> None:
        self.method = Method(self.method)

    def configs(self) -> tuple[OpticalConfig, OptimizerConfig]:
        extra: dict[str, str] = {}
        overrides = {**self.optical_overrides, **self.optimizer_overrides}
        optical, optimizer = apply_overrides(OpticalConfig(), OptimizerConfig(), overrides, extra)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        return optical, optimizer

    @property
    def label(self) -> str:
        return self.pattern[len(SUITE_PREFIX):] if self.pattern.startswith(SUITE_PREFIX) else Path(self.pattern).stem


def load_target(pattern: str, cfg: OpticalConfig) -> TargetPattern:
    if pattern.startswith(SUITE_PREFIX):
        return suite_target(pattern[len(SUITE_PREFIX):], cfg)
    path = Path(pattern)
    if not path.is_file():
        raise ConfigError(f"pattern file not found: {pattern}")
    return ingest_pattern(path, cfg)


@dataclass(frozen=True)
class Evaluation:
    """Metrics of a (source, binarized mask) pair against the target."""

    l2_nm2: float
    pvb_nm2: float
    epe_count: int
    epe_mean_abs_nm: float
    print_nominal: np.ndarray
    aerial: np.ndarray


def evaluate(theta_J: np.ndarray, theta_M: np.ndarray, cfg: OpticalConfig, target: TargetPattern, epe: EpeSpec = EpeSpec()) -> Evaluation:
    """Print the binarized mask under the optimized source at the three doses."""
    pupil = build_pupil(cfg)
    fx, fy = source_coords(cfg)
    source = SourceGrid(sigmoid(cfg.alpha_j * theta_J), fx, fy)
    mask = (theta_M >= 0).astype(float)
    aerial = abbe_aerial(source, mask, pupil, cfg).intensity
    prints = {}
    for name, dose in (("nom", 1.0), ("min", cfg.dose_min), ("max", cfg.dose_max)):
        prints[name] = binarize(resist(dose * dose * aerial, cfg), 0.5, cfg.pixel_nm)
    m = epe_measure(prints["nom"], target, epe)
    return Evaluation(
        metric_l2(prints["nom"], target),
        metric_pvb(prints["min"], prints["max"]),
        m.violations,
        m.mean_abs_nm,
        prints["nom"].pixels,
        aerial,
    )


def initial_params(target: TargetPattern, cfg: OpticalConfig, template: str = "annular") -> tuple[np.ndarray, np.ndarray]:
    return init_source_params(template, cfg).values, init_mask_params(target, cfg).values


LOSS_COLUMNS = ("iter", "total", "l2_term", "pvb_term", "wall_clock_s")
SUMMARY_COLUMNS = ("pattern", "method", "seed", "l2_nm2", "pvb_nm2", "epe_count", "epe_mean_abs_nm", "final_loss", "iters", "error")
TIMING_COLUMNS = ("pattern", "method", "iters", "total_s", "s_per_iter")


def _fmt(v) -> str:
    # repr round-trips floats exactly
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ExperimentResult:
    report: RunReport
    evaluation: Evaluation | None
    summary: dict
    timing: dict
    output_dir: Path | None


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Optimize, evaluate and write artifacts for one spec.

    Writes ``loss_curve.csv``, ``final_mask.pgm``, ``final_source.pgm`` (8-bit
    fields), their ``*_binary.pgm`` counterparts, ``resist_nominal.pgm``,
    ``summary.csv`` and ``timing.csv``. Wall-clock figures stay out of
    ``summary.csv`` so it is reproducible bit for bit.
    """
    optical, optimizer = spec.configs()
    target = load_target(spec.pattern, optical)
    theta_J, theta_M = initial_params(target, optical, spec.source_template)
    problem = SmoProblem(SmoObjective(optical, target))
    t0 = time.perf_counter()
    report = run_method(problem, (theta_J, theta_M), spec.method, optimizer)
    total_s = time.perf_counter() - t0
    evaluation = None
    error = report.error
    try:
        evaluation = evaluate(report.final_theta_J, report.final_theta_M, optical, target, spec.epe)
    except (ValueError, FloatingPointError) as exc:
        error = error or f"evaluation failed: {exc}"
    summary = {
        "pattern": spec.label,
        "method": spec.method.value,
        "seed": spec.seed,
        "l2_nm2": evaluation.l2_nm2 if evaluation else math.nan,
        "pvb_nm2": evaluation.pvb_nm2 if evaluation else math.nan,
        "epe_count": evaluation.epe_count if evaluation else -1,
        "epe_mean_abs_nm": evaluation.epe_mean_abs_nm if evaluation else math.nan,
        "final_loss": report.final_loss.total,
        "iters": report.iters_run,
        "error": error or "",
    }
    timing = {
        "pattern": spec.label,
        "method": spec.method.value,
        "iters": report.iters_run,
        "total_s": total_s,
        "s_per_iter": total_s / max(report.iters_run, 1),
    }
    out = None
    if spec.output_dir is not None:
        out = Path(spec.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_artifacts(out, report, evaluation, optical, optimizer, summary, timing)
    return ExperimentResult(report, evaluation, summary, timing, out)


def write_artifacts(out: Path, report: RunReport, evaluation: Evaluation | None, optical, optimizer, summary, timing) -> None:
    rows = [
        {"iter": p.iteration, "total": p.loss.total, "l2_term": p.loss.l2_term, "pvb_term": p.loss.pvb_term, "wall_clock_s": p.wall_clock_s}
        for p in report.loss_trajectory
    ]
    write_csv(out / "loss_curve.csv", LOSS_COLUMNS, rows)
    mask = sigmoid(optical.alpha_m * report.final_theta_M)
    source = sigmoid(optical.alpha_j * report.final_theta_J)
    write_graymap(out / "final_mask.pgm", quantize(mask))
    write_graymap(out / "final_mask_binary.pgm", binary_graymap(report.final_theta_M >= 0))
    write_graymap(out / "final_source.pgm", quantize(source))
    write_graymap(out / "final_source_binary.pgm", binary_graymap(source >= 0.5))
    if evaluation is not None:
        write_graymap(out / "resist_nominal.pgm", binary_graymap(evaluation.print_nominal))
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, [summary])
    write_csv(out / "timing.csv", TIMING_COLUMNS, [timing])
    (out / "config.txt").write_text(dump_config(optical, optimizer))


def simulate(pattern: str, optical: OpticalConfig, template: str = "annular", output_dir: str | Path | None = None, epe: EpeSpec = EpeSpec()) -> Evaluation:
    """Forward-only run: print the target itself as the mask."""
    target = load_target(pattern, optical)
    theta_J, theta_M = initial_params(target, optical, template)
    ev = evaluate(theta_J, theta_M, optical, target, epe)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        peak = float(ev.aerial.max()) or 1.0
        write_graymap(out / "aerial.pgm", quantize(ev.aerial / peak))
        write_graymap(out / "resist_nominal.pgm", binary_graymap(ev.print_nominal))
    return ev


# --------------------------------------------------------------------------- gradcheck

GRADCHECK_MAX_N = 64
GRADCHECK_TOL = 1e-3


@dataclass(frozen=True)
class GradcheckReport:
    inner_error: float
    outer_error: float
    hvp_symmetry: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.inner_error, self.outer_error, self.hvp_symmetry) <= self.tol

    def lines(self) -> list[str]:
        return [
            f"source gradient max rel error: {self.inner_error:.3e}",
            f"mask gradient max rel error:   {self.outer_error:.3e}",
            f"HVP symmetry residual:         {self.hvp_symmetry:.3e}",
            f"{'PASS' if self.passed else 'FAIL'} (tolerance {self.tol:g})",
        ]


def gradcheck_problem(problem, inner, outer, *, seed: int = 0, step: float = 1e-4, hvp_eps: float = 1e-4, tol: float = GRADCHECK_TOL, corrupt=None) -> GradcheckReport:
    """Compare analytic upper gradients with central differences everywhere.

    ``corrupt`` (a test hook) is applied to the analytic outer gradient.
    """
    g_in, g_out = problem.upper_grads(inner, outer)
    if corrupt is not None:
        g_out = corrupt(g_out)
    fd_in = finite_difference_grad(lambda x: problem.upper_loss(x, outer), inner, step)
    fd_out = finite_difference_grad(lambda y: problem.upper_loss(inner, y), outer, step)
    rng = np.random.default_rng(seed)
    u = rng.normal(size=np.shape(inner))
    v = rng.normal(size=np.shape(inner))
    hu = problem.hvp_lower(inner, outer, u, hvp_eps)
    hv = problem.hvp_lower(inner, outer, v, hvp_eps)
    a, b = float(np.sum(u * hv)), float(np.sum(v * hu))
    scale = max(abs(a), abs(b), np.linalg.norm(u) * np.linalg.norm(hv), 1e-300)
    return GradcheckReport(relative_error(g_in, fd_in), relative_error(g_out, fd_out), abs(a - b) / scale, tol)


GRADCHECK_DEFAULTS = {"n_mask": "32", "n_source": "3", "pixel_nm": "16"}


def gradcheck(spec: ExperimentSpec, *, corrupt=None, tol: float = GRADCHECK_TOL) -> GradcheckReport:
    """Gradient audit of the SMO loss at random parameters (n_mask <= 64)."""
    optical, _ = spec.configs()
    if optical.n_mask > GRADCHECK_MAX_N:
        raise ConfigError(f"gradcheck needs n_mask <= {GRADCHECK_MAX_N}, got {optical.n_mask}")
    target = load_target(spec.pattern, optical)
    rng = np.random.default_rng(spec.seed)
    theta_J = rng.normal(size=(optical.n_source, optical.n_source))
    theta_M = rng.normal(scale=0.5, size=(optical.n_mask, optical.n_mask))
    problem = SmoProblem(SmoObjective(optical, target))
    return gradcheck_problem(problem, theta_J, theta_M, seed=spec.seed, corrupt=corrupt, tol=tol)


def gradcheck_quadratic(seed: int = 0, *, corrupt=None, tol: float = GRADCHECK_TOL) -> GradcheckReport:
    q = QuadraticBilevel.random(8, 5, seed=seed)
    rng = np.random.default_rng(seed)
    return gradcheck_problem(q, rng.normal(size=8), rng.normal(size=5), seed=seed, corrupt=corrupt, tol=tol)


# --------------------------------------------------------------------------- benchmark

RUN_COLUMNS = ("pattern", "method", "iters", "s_per_iter", "total_s", "l2_nm2", "pvb_nm2", "epe_count", "final_loss", "error")
METHOD_COLUMNS = ("method", "runs", "avg_l2_nm2", "avg_pvb_nm2", "avg_epe", "avg_final_loss", "avg_s_per_iter", "total_s", "failures")


def _run_row(spec: ExperimentSpec) -> dict:
    try:
        res = run_experiment(spec)
    except (ValueError, FloatingPointError) as exc:
        return {"pattern": spec.label, "method": spec.method.value, "iters": 0, "s_per_iter": math.nan, "total_s": math.nan,
                "l2_nm2": math.nan, "pvb_nm2": math.nan, "epe_count": -1, "final_loss": math.nan, "error": str(exc)}
    s, t = res.summary, res.timing
    return {"pattern": s["pattern"], "method": s["method"], "iters": s["iters"], "s_per_iter": t["s_per_iter"], "total_s": t["total_s"],
            "l2_nm2": s["l2_nm2"], "pvb_nm2": s["pvb_nm2"], "epe_count": s["epe_count"], "final_loss": s["final_loss"], "error": s["error"]}


def benchmark(specs: list[ExperimentSpec], workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Run every spec and tabulate per-run rows and per-method averages.

    Failed runs are recorded and the rest continue. The method table is
    sorted by average L2 area.
    """
    if not specs:
        raise ConfigError("benchmark needs at least one spec")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_row, specs))
    else:
        runs = [_run_row(s) for s in specs]
    methods: dict[str, list[dict]] = {}
    for r in runs:
        methods.setdefault(r["method"], []).append(r)
    table = []
    for method, rows in methods.items():
        ok = [r for r in rows if not r["error"]]

        def avg(key):
            return float(np.mean([r[key] for r in ok])) if ok else math.nan

        table.append({
            "method": method,
            "runs": len(rows),
            "avg_l2_nm2": avg("l2_nm2"),
            "avg_pvb_nm2": avg("pvb_nm2"),
            "avg_epe": avg("epe_count"),
            "avg_final_loss": avg("final_loss"),
            "avg_s_per_iter": avg("s_per_iter"),
            "total_s": float(np.nansum([r["total_s"] for r in rows])),
            "failures": len(rows) - len(ok),
        })
    table.sort(key=lambda r: (math.isnan(r["avg_l2_nm2"]), r["avg_l2_nm2"]))
    return runs, table


IMAGING_COLUMNS = ("parallel_width", "active_points", "coherent_fields", "q_kernels", "abbe_ms", "hopkins_ms", "measured_ratio", "theory_ratio")


def imaging_benchmark(target: TargetPattern, cfg: OpticalConfig, widths=(1, None), template: str = "annular", repeats: int = 20) -> list[dict]:
    """Per-call Abbe and Hopkins (Q kernels) forward time at each parallel width.

    ``None`` in ``widths`` means "at least the number of active source
    points". ``theory_ratio`` is ceil(active/P) / ceil(Q/P), the round count
    of an ideal P-lane machine.
    """
    pupil = build_pupil(cfg)
    theta_J, theta_M = initial_params(target, cfg, template)
    fx, fy = source_coords(cfg)
    source = SourceGrid(sigmoid(cfg.alpha_j * theta_J), fx, fy)
    mask = sigmoid(cfg.alpha_m * theta_M)
    plan = plan_source(source, pupil, cfg.active_threshold)
    n_fields = len({mirror_key(s)[0] for s in plan.shifts})
    rows = []
    for width in widths:
        p = plan.n_active if width is None else int(width)
        c = replace(cfg, parallel_width=max(p, 1))
        kernels = socs_decompose(build_tcc(source, pupil, c), c.q_kernels)
        abbe_aerial(source, mask, pupil, c)
        hopkins_aerial(kernels, mask)
        abbe_s = _median_time(lambda: abbe_aerial(source, mask, pupil, c), repeats)
        hop_s = _median_time(lambda: hopkins_aerial(kernels, mask), repeats)
        rows.append({
            "parallel_width": p,
            "active_points": plan.n_active,
            "coherent_fields": n_fields,
            "q_kernels": kernels.q_used,
            "abbe_ms": abbe_s * 1e3,
            "hopkins_ms": hop_s * 1e3,
            "measured_ratio": abbe_s / hop_s,
            "theory_ratio": math.ceil(plan.n_active / p) / math.ceil(kernels.q_used / p),
        })
    return rows


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def format_table(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()
