"""Toolkit for conditionally Gaussian stochastic models.

Closed-form filtering, smoothing and conditional sampling for two-block
nonlinear systems whose hidden block is linear in itself; Gaussian-mixture
density estimation; EM parameter estimation with a conditionally Gaussian
preconditioner; and statistical linear-response prediction.
"""

__version__ = "0.1.0"

from .builtin import (
    Climate4dApproxParams,
    Climate4dParams,
    L96ApproxParams,
    L96Params,
    TriadParams,
    build_model,
    calibrate_linear_gaussian,
    climate4d_approximate,
    climate4d_perfect,
    default_dt,
    l96_approximate,
    l96_perfect,
    triad_augmented,
    triad_bare_truncation,
    triad_perfect,
)
from .inference import (
    BlockLayout,
    GaussianPath,
    InferenceError,
    cg_filter,
    cg_filter_blocked,
    cg_sample,
    cg_smoother,
    cg_smoother_blocked,
    cg_smoother_with_cross,
    lag_one_cross_moments,
    layout_for_l96,
)
from .integrate import BlowUpError, NoisePath, simulate, simulate_ensemble, simulate_with_noise
from .models import (
    CgnsModel,
    DriftTerm,
    GeneralSdeModel,
    LinearParamFamily,
    as_general,
    const_coeff,
    split_observed,
    validate_cgns,
)
from .series import TrajectorySeries
