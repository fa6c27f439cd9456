"""Source-mask optimization for optical lithography.

Abbe imaging with an analytic adjoint, a Hopkins/SOCS reference model, and
alternating or bilevel optimizers whose hypergradients use finite
differences, a truncated Neumann series or conjugate gradients.
"""

from .config import ConfigError, OpticalConfig, OptimizerConfig, StepRule
from .core import (
    NumericError,
    ParamField,
    ParamKind,
    SourceTemplate,
    TargetPattern,
    activate_mask,
    activate_source,
    init_mask_params,
    init_source_params,
)
from .imaging import abbe_aerial, build_pupil, build_tcc, forward_process_window, hopkins_aerial, resist, socs_decompose
from .lossgrad import LossValue, SmoObjective, grad_smo, hvp_so_jj, jvp_so_mj, loss_smo
from .metrics import BinaryImage, EpeSpec, binarize, metric_epe, metric_l2, metric_pvb
from .optimizers import Method, QuadraticBilevel, RunReport, SmoProblem, am_smo, bismo_run, mo_run, run_method
from .patterns import SUITE_NAMES, ingest_pattern, suite_target

__version__ = "0.1.0"
