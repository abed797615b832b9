"""Semi varying-coefficient additive models for longitudinal/functional data.

Estimation via pilot tensor-spline plus local linear smoothing, pointwise
confidence bands valid across sparse/dense/ultra-dense sampling, bootstrap
specification tests, and a Monte Carlo lab reproducing the reference
simulation designs.
"""

from ._accel import BACKEND, NUMBA_ENABLED
from .dataset import (
    LongitudinalDataset,
    SampleSummary,
    SubjectRecord,
    from_arrays,
    load_longitudinal,
    save_longitudinal,
    subj_weight,
    summarize,
)
from .estimator import (
    ComponentCurve,
    FitConfig,
    SemiVcamFit,
    additive_step,
    cv_bandwidths,
    fit,
    predict,
    vc_step,
)
from .smoothing import (
    KernelConstants,
    KernelSpec,
    LocalFitResult,
    kde,
    kernel_constants,
    kernel_eval,
    local_linear_fit,
)
from .splines import (
    PilotAdditive,
    PilotFit,
    SplineBasis,
    basis_eval,
    fit_pilot,
    make_basis,
    pilot_beta,
    select_knots_bic,
    tensor_basis,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "NUMBA_ENABLED",
    "ComponentCurve",
    "FitConfig",
    "KernelConstants",
    "KernelSpec",
    "LocalFitResult",
    "LongitudinalDataset",
    "PilotAdditive",
    "PilotFit",
    "SampleSummary",
    "SemiVcamFit",
    "SplineBasis",
    "SubjectRecord",
    "additive_step",
    "basis_eval",
    "cv_bandwidths",
    "fit",
    "fit_pilot",
    "from_arrays",
    "kde",
    "kernel_constants",
    "kernel_eval",
    "load_longitudinal",
    "local_linear_fit",
    "make_basis",
    "pilot_beta",
    "predict",
    "save_longitudinal",
    "select_knots_bic",
    "subj_weight",
    "summarize",
    "tensor_basis",
    "vc_step",
]
