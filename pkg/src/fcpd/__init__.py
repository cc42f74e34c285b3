"""fcpd: decouple coupled multivariate polynomials into univariate
branches via a smoothness-filtered CP decomposition of sampled Jacobians.

Pipeline: evaluate the analytic Jacobian of a known polynomial map at N
operating points, stack the matrices into an (n, m, N) tensor, decompose
it with finite-difference filters tying the third factor to smooth
univariate functions, then fit one polynomial per branch to obtain the
model W g(V^T p).
"""

from .cpd import AlsOptions, AlsResult, als_update, cpd_als
from .findiff import (
    DegenerateAxisError,
    FilterBank,
    FilterMatrix,
    apply_bank,
    build_filter,
    build_filter_bank,
    lagrange_weights,
    smoothness_penalty,
)
from .model import (
    BranchFitError,
    DecoupledModel,
    ErrorReport,
    calibrate_offsets,
    eval_decoupled,
    eval_decoupled_batch,
    fit_branches,
    load_model,
    relative_error,
    save_model,
)
from .polyfun import (
    JacobianTensor,
    MonomialFunction,
    OperatingPointSet,
    build_jacobian_tensor,
    eval_jacobian,
    eval_poly,
    eval_poly_batch,
    load_function,
    sample_points,
    save_function,
)
from .solver import (
    FcpdOptions,
    FcpdSolution,
    LambdaRun,
    LambdaSearchResult,
    factor_smoothness,
    fcpd_solve,
    freeze_structures,
    frozen_normalizers,
    joint_objective,
    lambda_search,
    update_g,
    update_v,
    update_w,
    v_gradient,
    v_objective,
)
from .tensor3 import FactorSet, ResidualReport, khatri_rao, matricize, reconstruct, residual

__version__ = "0.1.0"

__all__ = [
    "AlsOptions", "AlsResult", "als_update", "cpd_als",
    "DegenerateAxisError", "FilterBank", "FilterMatrix", "apply_bank",
    "build_filter", "build_filter_bank", "lagrange_weights", "smoothness_penalty",
    "BranchFitError", "DecoupledModel", "ErrorReport", "calibrate_offsets",
    "eval_decoupled", "eval_decoupled_batch", "fit_branches", "load_model",
    "relative_error", "save_model",
    "JacobianTensor", "MonomialFunction", "OperatingPointSet",
    "build_jacobian_tensor", "eval_jacobian", "eval_poly", "eval_poly_batch",
    "load_function", "sample_points", "save_function",
    "FcpdOptions", "FcpdSolution", "LambdaRun", "LambdaSearchResult",
    "factor_smoothness", "fcpd_solve", "freeze_structures",
    "frozen_normalizers", "joint_objective", "lambda_search", "update_g",
    "update_v", "update_w", "v_gradient", "v_objective",
    "FactorSet", "ResidualReport", "khatri_rao", "matricize", "reconstruct",
    "residual",
]
