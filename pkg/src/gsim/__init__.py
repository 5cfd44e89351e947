"""Generalized single-index models with penalized-spline fitting and
profile likelihood ratio inference."""

from .exceptions import (
    ConstraintError,
    ConvergenceError,
    DataError,
    DomainError,
    FitError,
    GSIMError,
    StudyError,
    UsageError,
)
from .families import BINOMIAL, GAMMA, GAUSSIAN, POISSON, Family, get_family
from .fitting import (
    Dataset,
    FitConfig,
    FittedGSIM,
    beta_from_phi,
    estimate_dispersion,
    fit_gsim,
    jacobian_beta_phi,
    penalized_loglik,
    penalized_loglik_grad,
    profile_delta,
    refit_with_first_coef_one,
    select_lambda_gcv,
)
from .inference import (
    HypothesisConstraint,
    TestResult,
    equivalent_se,
    fisher_information,
    fit_null,
    plrt,
    plrt_f_adjusted,
    wald_covariance,
    wald_se,
    wald_test,
)
from .simulate import (
    SimSetting,
    StudyReport,
    gen_binary,
    gen_gaussian_sinusoidal,
    generate,
    make_setting,
    se_study,
    type1_error_study,
)
from .splines import (
    CUBIC_REGRESSION,
    TRUNCATED_CUBIC,
    KnotSequence,
    SplineBasis,
    eval_basis,
    penalty_matrix,
    place_knots,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
