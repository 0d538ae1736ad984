"""Scalar-on-function quantile regression for clustered longitudinal data."""

__version__ = "0.1.0"

from .design import DesignMatrices, LongitudinalDataset, ModelSpec, assemble_design
from .fdbasis import Basis, SplineBasisSpec, eval_basis, make_basis
from .fitter import (
    FitError,
    FitResult,
    SmoothingParams,
    compare_models,
    fit_dataset,
    penalized_fit,
    select_smoothing,
)
from .fpca import FunctionalSample, fpca_smooth, project_new
from .infer import (
    BootstrapSummary,
    TargetSpec,
    block_bootstrap_sd,
    bootstrap_ci,
    bootstrap_summary,
    model_based_se,
    predict_quantile,
    quantile_difference,
    wild_bootstrap_bias,
)
from .qloss import SmoothLossParams, check_loss, smooth_loss
from .simgen import SimScenario, generate, oracle_qreg
