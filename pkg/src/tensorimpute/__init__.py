"""Bayesian multiple imputation for tensors with CP low-rank structure."""

from .convergence import ConvergenceReport, convergence_report, srf
from .cp import AlsConfig, AlsResult, EMResult, als_fit, em_impute
from .distributions import (
    jittered_cholesky,
    rng_stream,
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_matrix_normal,
    sample_mvn,
)
from .diversity import DiversityTrend, clr_transform, diagnostics, diversity_trend, shannon_diversity, shannon_draws
from .draws import ImputationDraws, ImputationResult, McmcConfig
from .estimators import CPALS, EMImputer, TensorImputer
from .independent import run_indep
from .selection import CvConfig, CvResult, cv_select_rank
from .separable import (
    ConditionalTooLargeError,
    SeparableCovariance,
    build_conditional_plan,
    predictive_impute,
    run_sep,
    whiten_mode,
)
from .simulation import (
    FiberFunctional,
    SimDesign,
    evaluate_run,
    gen_study1,
    gen_study2,
    gen_study3,
    make_fiber_functional,
)
from .tensor import (
    CPModel,
    MaskedTensor,
    center_observed,
    cp_reconstruct,
    fold,
    hadamard,
    khatri_rao,
    kronecker,
    matricize,
    uncenter,
)

__all__ = [name for name in dir() if not name.startswith("_")]
