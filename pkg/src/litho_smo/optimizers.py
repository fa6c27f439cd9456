"""Alternating and bilevel source-mask optimization drivers.

The drivers only talk to a :class:`BilevelProblem`, so the same engines run
on the lithography objective and on small quadratic fixtures with known
answers. Inner variables are the source parameters, outer variables the
mask parameters.
"""

from __future__ import annotations

import copy
import enum
import time
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .config import OptimizerConfig, StepRule
from .core import NumericError
from .lossgrad import LossValue, SmoObjective, central_difference, finite_difference_grad, relative_error


class Method(str, enum.Enum):
    MO = "MO"
    AM = "AM"
    FD = "FD"
    NMN = "NMN"
    CG = "CG"


class BilevelProblem(Protocol):
    inner_shape: tuple[int, ...]
    outer_shape: tuple[int, ...]

    def lower_loss(self, inner: np.ndarray, outer: np.ndarray) -> float: ...

    def upper_loss(self, inner: np.ndarray, outer: np.ndarray) -> float: ...

    def report_loss(self, inner: np.ndarray, outer: np.ndarray) -> LossValue: ...

    def lower_grad_inner(self, inner: np.ndarray, outer: np.ndarray) -> np.ndarray: ...

    def upper_grads(self, inner: np.ndarray, outer: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def hvp_lower(self, inner: np.ndarray, outer: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray: ...

    def jvp_mixed(self, inner: np.ndarray, outer: np.ndarray, w: np.ndarray, eps: float) -> np.ndarray: ...


class SmoProblem:
    """SMO as a bilevel problem; upper and lower losses coincide."""

    def __init__(self, objective: SmoObjective):
        self.objective = objective
        cfg = objective.cfg
        self.inner_shape = (cfg.n_source, cfg.n_source)
        self.outer_shape = (cfg.n_mask, cfg.n_mask)

    def lower_loss(self, inner, outer) -> float:
        return self.objective.loss(inner, outer).total

    upper_loss = lower_loss

    def report_loss(self, inner, outer) -> LossValue:
        return self.objective.loss(inner, outer)

    def lower_grad_inner(self, inner, outer):
        return self.objective.grad_source(inner, outer)

    def upper_grad_outer(self, inner, outer):
        return self.objective.grad_mask(inner, outer)

    def upper_grads(self, inner, outer):
        g = self.objective.grad(inner, outer)
        return g.wrt_source, g.wrt_mask

    def hvp_lower(self, inner, outer, v, eps):
        return self.objective.hvp_jj(inner, outer, v, eps)

    def jvp_mixed(self, inner, outer, w, eps):
        return self.objective.jvp_mj(inner, outer, w, eps)


class QuadraticBilevel:
    """Lower ``0.5 x'Ax - x'By``, upper ``0.5|x - c|^2 + 0.5 mu |y|^2``.

    ``x`` is inner, ``y`` outer. With A symmetric positive definite the
    best response is ``x*(y) = A^-1 B y`` and every hypergradient has a
    closed form. Curvature products go through the same central differences
    as the lithography problem.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray, c: np.ndarray, mu: float = 0.1):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.mu = float(mu)
        self.inner_shape = (self.A.shape[0],)
        self.outer_shape = (self.B.shape[1],)

    @classmethod
    def random(cls, n_inner: int, n_outer: int, seed: int = 0, spectrum: tuple[float, float] = (0.5, 2.0), mu: float = 0.1) -> "QuadraticBilevel":
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(n_inner, n_inner)))
        eig = np.linspace(spectrum[0], spectrum[1], n_inner)
        A = (q * eig) @ q.T
        A = 0.5 * (A + A.T)
        B = rng.normal(size=(n_inner, n_outer)) / np.sqrt(n_inner)
        return cls(A, B, rng.normal(size=n_inner), mu)

    def lower_loss(self, x, y) -> float:
        return float(0.5 * x @ self.A @ x - x @ self.B @ y)

    def upper_loss(self, x, y) -> float:
        return float(0.5 * np.sum((x - self.c) ** 2) + 0.5 * self.mu * np.sum(y * y))

    def report_loss(self, x, y) -> LossValue:
        u = self.upper_loss(x, y)
        return LossValue(u, u, 0.0)

    def lower_grad_inner(self, x, y):
        return self.A @ x - self.B @ y

    def lower_grad_outer(self, x, y):
        return -self.B.T @ x

    def upper_grads(self, x, y):
        return x - self.c, self.mu * y

    def upper_grad_outer(self, x, y):
        return self.mu * y

    def hvp_lower(self, x, y, v, eps):
        return central_difference(lambda z: self.lower_grad_inner(z, y), x, v, eps)

    def jvp_mixed(self, x, y, w, eps):
        return central_difference(lambda z: self.lower_grad_outer(z, y), x, w, eps)

    # closed forms
    def best_response(self, y):
        return np.linalg.solve(self.A, self.B @ y)

    def ift_hypergrad(self, x, y):
        """Exact implicit-function hypergradient evaluated at inner point x."""
        return self.mu * y + self.B.T @ np.linalg.solve(self.A, x - self.c)

    def fd_hypergrad(self, x, y, xi):
        return self.mu * y + xi * self.B.T @ (x - self.c)

    def optimum(self):
        """Outer minimizer of the reduced upper objective."""
        m = np.linalg.solve(self.A, self.B)
        y = np.linalg.solve(m.T @ m + self.mu * np.eye(m.shape[1]), m.T @ self.c)
        return self.best_response(y), y


# --------------------------------------------------------------------------- steps


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Stepper:
    """Gradient-descent or Adam update for one parameter field."""

    def __init__(self, lr: float, rule: StepRule = StepRule.GD, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.rule = StepRule(rule)
        self.betas = betas
        self.eps = eps
        self.state: AdamState | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(grad)):
            bad = int(np.sum(~np.isfinite(grad)))
            raise NumericError(f"non-finite gradient ({bad} of {grad.size} entries)")
        if self.rule is StepRule.GD:
            return params - self.lr * grad
        b1, b2 = self.betas
        if self.state is None:
            self.state = AdamState(np.zeros_like(grad), np.zeros_like(grad))
        s = self.state
        s.t += 1
        s.m = b1 * s.m + (1 - b1) * grad
        s.v = b2 * s.v + (1 - b2) * grad * grad
        m_hat = s.m / (1 - b1 ** s.t)
        v_hat = s.v / (1 - b2 ** s.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def effective_lr(self, lr: float | None = None, grad: np.ndarray | None = None) -> np.ndarray | float:
        """Per-coordinate step size the rule applies to a gradient.

        For GD this is ``lr``; for Adam it is ``lr / (sqrt(v_hat) + eps)``.
        """
        lr = self.lr if lr is None else lr
        if self.rule is StepRule.GD:
            return lr
        if self.state is None or self.state.t == 0:
            if grad is None:
                return lr
            return lr / (np.abs(grad) + self.eps)
        v_hat = self.state.v / (1 - self.betas[1] ** self.state.t)
        return lr / (np.sqrt(v_hat) + self.eps)

    def snapshot(self) -> dict:
        return {"lr": self.lr, "rule": self.rule.value, "state": copy.deepcopy(self.state)}

    @classmethod
    def restore(cls, snap: dict, betas=(0.9, 0.999), eps: float = 1e-8) -> "Stepper":
        s = cls(snap["lr"], StepRule(snap["rule"]), betas, eps)
        s.state = copy.deepcopy(snap["state"])
        return s


def step(params, grad: np.ndarray, rule: StepRule | str = StepRule.GD, state: Stepper | None = None, lr: float = 0.1):
    """Single update of ``params``; pass ``state`` to carry Adam moments."""
    stepper = state if state is not None else Stepper(lr, StepRule(rule))
    values = getattr(params, "values", params)
    new = stepper.step(np.asarray(values, dtype=float), np.asarray(grad, dtype=float))
    return params.with_values(new) if hasattr(params, "with_values") else new


def _stepper(cfg: OptimizerConfig, lr: float) -> Stepper:
    return Stepper(lr, cfg.step_rule, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)


# --------------------------------------------------------------------------- hypergradients


def inner_unroll(problem: BilevelProblem, inner, outer, T: int, lr_inner: float | Stepper) -> np.ndarray:
    """T descent steps on the lower loss with the outer variables frozen."""
    if T < 1:
        raise ValueError("T must be >= 1")
    stepper = lr_inner if isinstance(lr_inner, Stepper) else Stepper(lr_inner)
    x = np.array(inner, dtype=float)
    for _ in range(T):
        x = stepper.step(x, problem.lower_grad_inner(x, outer))
    return x


@dataclass
class HypergradInfo:
    terms_used: int = 0
    truncated: bool = False
    negative_curvature: bool = False
    low_curvature: bool = False
    residual: float = float("nan")


def hypergrad_fd(problem: BilevelProblem, inner, outer, lr_fd, hvp_eps: float, *, grads=None) -> np.ndarray:
    """One-step look-ahead hypergradient ``dU/dy - xi * v' d2L/dy dx``.

    ``lr_fd`` may be an array of per-coordinate inner step sizes.
    """
    v, direct = grads if grads is not None else problem.upper_grads(inner, outer)
    return direct - problem.jvp_mixed(inner, outer, lr_fd * v, hvp_eps)


def hypergrad_neumann(
    problem: BilevelProblem,
    inner,
    outer,
    K: int,
    lr_inner,
    hvp_eps: float,
    *,
    grads=None,
    info: HypergradInfo | None = None,
    growth_limit: float = 10.0,
) -> np.ndarray:
    """Truncated Neumann-series hypergradient.

    Uses ``H^-1 ~= sum_k (I - P H)^k P`` with ``P = lr_inner`` (scalar or
    per-coordinate), which is the unscaled series when ``lr_inner == 1``.
    If a term grows past ``growth_limit`` times the first, the series is
    diverging: it is cut back to the terms before the first one that
    exceeded the first term's norm.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    info = info if info is not None else HypergradInfo()
    v, direct = grads if grads is not None else problem.upper_grads(inner, outer)
    term = lr_inner * v
    total = term.copy()
    first = float(np.linalg.norm(term))
    info.terms_used = 1
    # partial sum before the terms started to exceed the first one
    stable, stable_terms = None, 1
    for _ in range(K):
        term = term - lr_inner * problem.hvp_lower(inner, outer, term, hvp_eps)
        size = np.linalg.norm(term)
        if not np.isfinite(size) or size > growth_limit * max(first, 1e-300):
            info.truncated = True
            warnings.warn("Neumann series terms are growing; truncating", RuntimeWarning, stacklevel=2)
            if stable is not None:
                total, info.terms_used = stable, stable_terms
            break
        if stable is None and size > first:
            stable, stable_terms = total.copy(), info.terms_used
        total += term
        info.terms_used += 1
    return direct - problem.jvp_mixed(inner, outer, total, hvp_eps)


def conjugate_gradient(
    hvp,
    b: np.ndarray,
    x0: np.ndarray,
    K: int,
    info: HypergradInfo | None = None,
    precond: np.ndarray | float | None = None,
    curvature_rtol: float = 0.0,
    growth_limit: float = np.inf,
) -> np.ndarray:
    """K CG iterations on ``H x = b`` using only products ``hvp(p)``.

    ``precond`` is an optional positive diagonal approximating ``H^-1``.
    Stops early, keeping the current iterate, when a direction has
    non-positive curvature, when its Rayleigh quotient falls below
    ``curvature_rtol`` times the first one, or when the next iterate would
    exceed ``growth_limit`` times the first step. A warm start whose residual
    is larger than ``|b|`` is discarded.
    """
    info = info if info is not None else HypergradInfo()
    x = np.array(x0, dtype=float)
    r = b.copy()
    if np.any(x):
        r_warm = b - hvp(x)
        if np.linalg.norm(r_warm) <= np.linalg.norm(b):
            r = r_warm
        else:
            x = np.zeros_like(b)
    z = r if precond is None else precond * r
    p = z.copy()
    rz = float(np.sum(r * z))
    tiny = 1e-30 * max(float(np.sum(b * b)), 1e-300)
    first_rq = first_step = None
    for k in range(K):
        if float(np.sum(r * r)) <= tiny:
            break
        hp = hvp(p)
        curv = float(np.sum(p * hp))
        if curv <= 0:
            info.negative_curvature = True
            break
        rq = curv / float(np.sum(p * p) if precond is None else np.sum(p * p / precond))
        first_rq = rq if first_rq is None else first_rq
        if rq < curvature_rtol * first_rq:
            info.low_curvature = True
            break
        alpha = rz / curv
        x_new = x + alpha * p
        if first_step is None:
            first_step = max(float(np.linalg.norm(alpha * p)), float(np.linalg.norm(x)))
        elif np.linalg.norm(x_new) > growth_limit * first_step:
            info.truncated = True
            break
        x = x_new
        r -= alpha * hp
        z = r if precond is None else precond * r
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
        info.terms_used = k + 1
    info.residual = float(np.linalg.norm(r))
    return x


def hypergrad_cg(
    problem: BilevelProblem,
    inner,
    outer,
    K: int,
    w0: np.ndarray | None,
    hvp_eps: float,
    *,
    grads=None,
    info: HypergradInfo | None = None,
    precond: np.ndarray | float | None = None,
    curvature_rtol: float = 0.0,
    growth_limit: float = np.inf,
) -> tuple[np.ndarray, np.ndarray]:
    """IFT hypergradient with the inverse-Hessian product from K CG steps.

    Returns the hypergradient and the CG solution for warm-starting the next
    call.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    v, direct = grads if grads is not None else problem.upper_grads(inner, outer)
    w0 = np.zeros_like(v) if w0 is None else w0
    w = conjugate_gradient(lambda p: problem.hvp_lower(inner, outer, p, hvp_eps), v, w0, K, info, precond, curvature_rtol, growth_limit)
    return direct - problem.jvp_mixed(inner, outer, w, hvp_eps), w


# --------------------------------------------------------------------------- drivers


@dataclass
class TrajectoryPoint:
    iteration: int
    loss: LossValue
    wall_clock_s: float


@dataclass
class RunReport:
    method: Method
    loss_trajectory: list[TrajectoryPoint]
    final_theta_J: np.ndarray
    final_theta_M: np.ndarray
    iters_run: int
    error: str | None = None
    diagnostics: dict = field(default_factory=dict)
    # everything needed to resume the run where it stopped
    state: dict = field(default_factory=dict, repr=False)

    @property
    def initial_loss(self) -> LossValue:
        return self.loss_trajectory[0].loss

    @property
    def final_loss(self) -> LossValue:
        return self.loss_trajectory[-1].loss


def converged(losses: list[float], window: int, rel_tol: float) -> bool:
    """Relative change over the last ``window`` iterations below ``rel_tol``.

    ``losses[0]`` is the initial loss, so ``len(losses) - 1`` iterations ran.
    """
    if len(losses) - 1 < window:
        return False
    old, new = losses[-1 - window], losses[-1]
    return abs(new - old) <= rel_tol * max(abs(old), 1e-300)


def audit_gradients(problem, inner, outer, n_samples: int = 6, step: float = 1e-4, tol: float = 1e-3, seed: int = 0) -> dict:
    """Spot-check analytic gradients against central differences."""
    rng = np.random.default_rng(seed)
    g_in, g_out = problem.upper_grads(inner, outer)
    idx_in = rng.choice(inner.size, size=min(n_samples, inner.size), replace=False)
    idx_out = rng.choice(outer.size, size=min(n_samples, outer.size), replace=False)
    fd_in = finite_difference_grad(lambda x: problem.upper_loss(x, outer), inner, step, idx_in)
    fd_out = finite_difference_grad(lambda y: problem.upper_loss(inner, y), outer, step, idx_out)
    errs = {"inner": relative_error(g_in, fd_in), "outer": relative_error(g_out, fd_out)}
    if max(errs.values()) > tol:
        raise NumericError(f"gradient audit failed: {errs}")
    return errs


class _Clock:
    def __init__(self, offset: float = 0.0):
        self.start = time.perf_counter() - offset

    def __call__(self) -> float:
        return time.perf_counter() - self.start


def _record(report_list: list, problem, it: int, inner, outer, clock) -> LossValue:
    loss = problem.report_loss(inner, outer)
    if not np.isfinite(loss.total):
        raise NumericError(f"non-finite loss at iteration {it}")
    report_list.append(TrajectoryPoint(it, loss, clock()))
    return loss


def _start(problem, init, resume: RunReport | None):
    if resume is not None:
        return (
            np.array(resume.final_theta_J, dtype=float),
            np.array(resume.final_theta_M, dtype=float),
            list(resume.loss_trajectory),
            resume.iters_run,
            resume.state,
        )
    inner, outer = (np.array(a, dtype=float) for a in init)
    return inner, outer, [], 0, {}


def _finish(method, traj, inner, outer, it, error, diag, state) -> RunReport:
    return RunReport(method, traj, inner.copy(), outer.copy(), it, error, diag, state)


def mo_run(problem, init, cfg: OptimizerConfig, *, resume: RunReport | None = None) -> RunReport:
    """Mask-only optimization with the source frozen."""
    inner, outer, traj, it, st = _start(problem, init, resume)
    outer_step = Stepper.restore(st["outer"]) if "outer" in st else _stepper(cfg, cfg.lr_outer)
    clock = _Clock(traj[-1].wall_clock_s if traj else 0.0)
    diag: dict = dict(st.get("diag", {}))
    error = None
    try:
        if not traj:
            _record(traj, problem, 0, inner, outer, clock)
        while it < cfg.max_outer_iters:
            g = _outer_grad(problem, inner, outer)
            if it == 0 and not np.any(g):
                it += 1
                traj.append(TrajectoryPoint(it, traj[-1].loss, clock()))
                break
            outer = outer_step.step(outer, g)
            it += 1
            _record(traj, problem, it, inner, outer, clock)
            if converged([p.loss.total for p in traj], cfg.convergence_window, cfg.convergence_rel_tol):
                break
    except (NumericError, FloatingPointError) as exc:
        error = str(exc)
    return _finish(Method.MO, traj, inner, outer, it, error, diag, {"outer": outer_step.snapshot(), "diag": diag})


def _outer_grad(problem, inner, outer):
    fn = getattr(problem, "upper_grad_outer", None)
    return fn(inner, outer) if fn is not None else problem.upper_grads(inner, outer)[1]


def am_smo(problem, init, cfg: OptimizerConfig, *, resume: RunReport | None = None) -> RunReport:
    """Alternating minimization: SO phases with the mask fixed, then MO phases.

    Each SO or MO update counts as one iteration, so ``max_outer_iters``
    bounds the total number of updates.
    """
    inner, outer, traj, it, st = _start(problem, init, resume)
    inner_step = Stepper.restore(st["inner"]) if "inner" in st else _stepper(cfg, cfg.lr_inner)
    outer_step = Stepper.restore(st["outer"]) if "outer" in st else _stepper(cfg, cfg.lr_outer)
    clock = _Clock(traj[-1].wall_clock_s if traj else 0.0)
    cycle = cfg.so_epoch_iters + cfg.mo_epoch_iters
    diag: dict = dict(st.get("diag", {"phase_boundaries": []}))
    error = None
    try:
        if not traj:
            _record(traj, problem, 0, inner, outer, clock)
            g_in, g_out = problem.upper_grads(inner, outer)
            if cfg.audit:
                diag["audit"] = audit_gradients(problem, inner, outer)
            if not np.any(g_in) and not np.any(g_out):
                it = 1
                traj.append(TrajectoryPoint(it, traj[-1].loss, clock()))
                return _finish(Method.AM, traj, inner, outer, it, None, diag, {})
        while it < cfg.max_outer_iters:
            pos = it % cycle
            if pos < cfg.so_epoch_iters:
                inner = inner_step.step(inner, problem.lower_grad_inner(inner, outer))
            else:
                outer = outer_step.step(outer, _outer_grad(problem, inner, outer))
            if pos in (0, cfg.so_epoch_iters):
                diag["phase_boundaries"].append(it)
            it += 1
            _record(traj, problem, it, inner, outer, clock)
            # SO phases plateau by design, so only test at the end of a cycle
            if it % cycle == 0 and converged([p.loss.total for p in traj], cfg.convergence_window, cfg.convergence_rel_tol):
                break
    except (NumericError, FloatingPointError) as exc:
        error = str(exc)
    state = {"inner": inner_step.snapshot(), "outer": outer_step.snapshot(), "diag": diag}
    return _finish(Method.AM, traj, inner, outer, it, error, diag, state)


def bismo_run(problem, init, method: Method | str, cfg: OptimizerConfig, *, resume: RunReport | None = None) -> RunReport:
    """Bilevel SMO: unroll the source, then step the mask on a hypergradient.

    FD uses a single unrolled step and the one-step look-ahead; NMN and CG
    unroll ``unroll_T`` steps and approximate the inverse source Hessian.
    """
    method = Method(method)
    if method not in (Method.FD, Method.NMN, Method.CG):
        raise ValueError(f"bismo_run does not handle {method}")
    inner, outer, traj, it, st = _start(problem, init, resume)
    inner_step = Stepper.restore(st["inner"]) if "inner" in st else _stepper(cfg, cfg.lr_inner)
    outer_step = Stepper.restore(st["outer"]) if "outer" in st else _stepper(cfg, cfg.lr_outer)
    w0 = st.get("cg_w0")
    clock = _Clock(traj[-1].wall_clock_s if traj else 0.0)
    diag: dict = dict(st.get("diag", {"neumann_truncations": 0, "cg_negative_curvature": 0}))
    T = 1 if method is Method.FD else cfg.unroll_T
    error = None
    last_good = (inner.copy(), outer.copy(), it)
    try:
        if not traj:
            _record(traj, problem, 0, inner, outer, clock)
            if cfg.audit:
                diag["audit"] = audit_gradients(problem, inner, outer)
        while it < cfg.max_outer_iters:
            inner = inner_unroll(problem, inner, outer, T, inner_step)
            grads = problem.upper_grads(inner, outer)
            info = HypergradInfo()
            if method is Method.FD:
                scale = inner_step.effective_lr(cfg.lr_fd, grads[0]) if cfg.precondition else cfg.lr_fd
                hg = hypergrad_fd(problem, inner, outer, scale, cfg.hvp_eps, grads=grads)
            elif method is Method.NMN:
                scale = inner_step.effective_lr(cfg.lr_inner, grads[0]) if cfg.precondition else cfg.lr_inner
                hg = hypergrad_neumann(problem, inner, outer, cfg.neumann_K, scale, cfg.hvp_eps, grads=grads, info=info)
                diag["neumann_truncations"] += int(info.truncated)
            else:
                pc = inner_step.effective_lr(cfg.lr_inner, grads[0]) if cfg.precondition else None
                hg, w0 = hypergrad_cg(
                    problem, inner, outer, cfg.cg_K, w0, cfg.hvp_eps,
                    grads=grads, info=info, precond=pc, curvature_rtol=cfg.cg_curvature_rtol,
                    growth_limit=10.0,
                )
                diag["cg_low_curvature"] = diag.get("cg_low_curvature", 0) + int(info.low_curvature)
                diag["cg_truncations"] = diag.get("cg_truncations", 0) + int(info.truncated)
                if info.negative_curvature or info.low_curvature or info.truncated:
                    # the Hessian changed enough to make the old solve a poor start
                    diag["cg_negative_curvature"] += 1
                    w0 = None
            if it == 0 and not np.any(grads[0]) and not np.any(hg):
                it += 1
                traj.append(TrajectoryPoint(it, traj[-1].loss, clock()))
                break
            outer = outer_step.step(outer, hg)
            it += 1
            _record(traj, problem, it, inner, outer, clock)
            last_good = (inner.copy(), outer.copy(), it)
            if converged([p.loss.total for p in traj], cfg.convergence_window, cfg.convergence_rel_tol):
                break
        for _ in range(cfg.polish_iters):
            inner = inner_step.step(inner, problem.lower_grad_inner(inner, outer))
        if cfg.polish_iters:
            _record(traj, problem, it, inner, outer, clock)
    except (NumericError, FloatingPointError) as exc:
        error = str(exc)
        inner, outer, it = last_good
    state = {"inner": inner_step.snapshot(), "outer": outer_step.snapshot(), "cg_w0": None if w0 is None else w0.copy(), "diag": diag}
    return _finish(method, traj, inner, outer, it, error, diag, state)


def run_method(problem, init, method: Method | str, cfg: OptimizerConfig, *, resume: RunReport | None = None) -> RunReport:
    method = Method(method)
    if method is Method.MO:
        return mo_run(problem, init, cfg, resume=resume)
    if method is Method.AM:
        return am_smo(problem, init, cfg, resume=resume)
    return bismo_run(problem, init, method, cfg, resume=resume)
