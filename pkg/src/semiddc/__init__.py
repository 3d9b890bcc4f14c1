"""Semiparametric estimation of dynamic binary discrete-choice models."""

__version__ = "0.1.0"

from .panel import (  # noqa: F401
    Observation,
    PanelSample,
    UtilitySpec,
    apply_transforms,
    build_taxi_states,
    load_panel,
    write_panel,
)
from .kernels import (  # noqa: F401
    Bandwidth,
    KernelSpec,
    bandwidth_optimal,
    bandwidth_pss,
    bandwidth_suboptimal,
    eval_kernel,
    eval_kernel_gradient,
)
