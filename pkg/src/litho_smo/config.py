"""Optical and optimizer configuration, plus the key=value config file format."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for invalid configuration values or mismatched dimensions."""


@dataclass(frozen=True)
class OpticalConfig:
    """Imaging, resist and loss-weight settings.

    Defaults are the desk-scale setting (128x128 mask at 4 nm/pixel). Use
    :meth:`full_scale` for the 2048x2048 tile setting.
    """

    wavelength_nm: float = 193.0
    na: float = 1.35
    pixel_nm: float = 4.0
    n_mask: int = 128
    n_source: int = 35
    sigma_outer: float = 0.95
    sigma_inner: float = 0.63
    dose_min: float = 0.98
    dose_max: float = 1.02
    resist_threshold: float = 0.225
    resist_steepness: float = 30.0
    alpha_m: float = 9.0
    m0: float = 1.0
    alpha_j: float = 2.0
    j0: float = 5.0
    gamma: float = 1000.0
    eta: float = 3000.0
    q_kernels: int = 24
    parallel_width: int = 256
    # source pixels with j <= active_threshold are skipped by the Abbe sum
    active_threshold: float = 1e-6
    # source pixels are grouped into fixed-size chunks; the chunking (not the
    # worker count) fixes the reduction order
    chunk_size: int = 16
    deterministic: bool = True

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not (self.wavelength_nm > 0 and self.na > 0 and self.pixel_nm > 0):
            raise ConfigError("wavelength_nm, na and pixel_nm must be positive")
        if self.n_mask < 8:
            raise ConfigError(f"n_mask must be >= 8, got {self.n_mask}")
        if self.n_source < 3 or self.n_source % 2 == 0:
            raise ConfigError(f"n_source must be odd and >= 3, got {self.n_source}")
        if not (0 <= self.sigma_inner < self.sigma_outer <= 1):
            raise ConfigError("need 0 <= sigma_inner < sigma_outer <= 1")
        if not (0 < self.dose_min <= 1 <= self.dose_max):
            raise ConfigError("need 0 < dose_min <= 1 <= dose_max")
        if self.resist_steepness <= 0:
            raise ConfigError("resist_steepness must be positive")
        if self.gamma < 0 or self.eta < 0:
            raise ConfigError("gamma and eta must be non-negative")
        if self.q_kernels < 0:
            raise ConfigError("q_kernels must be non-negative")
        if self.parallel_width < 1 or self.chunk_size < 1:
            raise ConfigError("parallel_width and chunk_size must be >= 1")

    @property
    def cutoff(self) -> float:
        """Pupil cutoff frequency NA/lambda in 1/nm."""
        return self.na / self.wavelength_nm

    @property
    def freq_step(self) -> float:
        """Frequency-grid spacing 1/(N*pixel) in 1/nm."""
        return 1.0 / (self.n_mask * self.pixel_nm)

    @property
    def pixel_area(self) -> float:
        return self.pixel_nm * self.pixel_nm

    @classmethod
    def full_scale(cls, **overrides: Any) -> "OpticalConfig":
        return cls(**{"n_mask": 2048, "pixel_nm": 1.0, **overrides})


class StepRule(str, enum.Enum):
    GD = "gd"
    ADAM = "adam"


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings shared by the alternating and bilevel drivers."""

    unroll_T: int = 3
    neumann_K: int = 5
    cg_K: int = 5
    lr_inner: float = 0.1
    lr_outer: float = 0.1
    lr_fd: float = 0.1
    step_rule: StepRule = StepRule.ADAM
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_outer_iters: int = 200
    convergence_rel_tol: float = 1e-4
    convergence_window: int = 5
    so_epoch_iters: int = 10
    mo_epoch_iters: int = 10
    hvp_eps: float = 1e-2
    # CG stops once a direction's curvature drops below this fraction of the
    # first direction's; finite-difference curvature that small is noise
    cg_curvature_rtol: float = 1e-3
    # scale the Neumann/FD inverse-Hessian surrogate by the inner optimizer's
    # own per-coordinate step sizes instead of the bare lr_inner
    precondition: bool = True
    audit: bool = False
    polish_iters: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.step_rule, str) and not isinstance(self.step_rule, StepRule):
            object.__setattr__(self, "step_rule", StepRule(self.step_rule.lower()))
        if self.unroll_T < 1:
            raise ConfigError("unroll_T must be >= 1")
        if self.neumann_K < 0 or self.cg_K < 0:
            raise ConfigError("K must be >= 0")
        if min(self.lr_inner, self.lr_outer, self.lr_fd) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.max_outer_iters < 1:
            raise ConfigError("max_outer_iters must be >= 1")
        if self.convergence_window < 1:
            raise ConfigError("convergence_window must be >= 1")
        if self.cg_curvature_rtol < 0:
            raise ConfigError("cg_curvature_rtol must be non-negative")
        if self.hvp_eps <= 0:
            raise ConfigError("hvp_eps must be positive")


def _coerce(value: str, target_type: Any) -> Any:
    if target_type in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if target_type in (int, "int"):
        return int(value)
    if target_type in (float, "float"):
        return float(value)
    if target_type in (StepRule, "StepRule"):
        return StepRule(value.strip().lower())
    return value.strip()


def _field_types(cls: type) -> dict[str, Any]:
    return {f.name: f.type for f in fields(cls)}


def parse_key_values(lines: list[str] | str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def apply_overrides(
    optical: OpticalConfig,
    optimizer: OptimizerConfig,
    overrides: Mapping[str, str],
    extra: dict[str, str] | None = None,
) -> tuple[OpticalConfig, OptimizerConfig]:
    """Route string overrides to whichever config owns the key.

    Unknown keys go to ``extra`` when given, otherwise raise ConfigError.
    """
    opt_types = _field_types(OpticalConfig)
    run_types = _field_types(OptimizerConfig)
    o_kw: dict[str, Any] = {}
    r_kw: dict[str, Any] = {}
    for key, value in overrides.items():
        try:
            if key in opt_types:
                o_kw[key] = _coerce(value, opt_types[key])
            elif key in run_types:
                r_kw[key] = _coerce(value, run_types[key])
            elif extra is not None:
                extra[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return replace(optical, **o_kw), replace(optimizer, **r_kw)


def load_config(
    path: str | Path,
    optical: OpticalConfig | None = None,
    optimizer: OptimizerConfig | None = None,
    extra: dict[str, str] | None = None,
) -> tuple[OpticalConfig, OptimizerConfig]:
    path = Path(path)
    pairs = parse_key_values(path.read_text().splitlines(), source=str(path))
    return apply_overrides(optical or OpticalConfig(), optimizer or OptimizerConfig(), pairs, extra)


def dump_config(optical: OpticalConfig, optimizer: OptimizerConfig | None = None) -> str:
    lines = ["# optical"]
    for k, v in dataclasses.asdict(optical).items():
        lines.append(f"{k} = {v}")
    if optimizer is not None:
        lines.append("# optimizer")
        for k, v in dataclasses.asdict(optimizer).items():
            lines.append(f"{k} = {v.value if isinstance(v, enum.Enum) else v}")
    return "\n".join(lines) + "\n"
