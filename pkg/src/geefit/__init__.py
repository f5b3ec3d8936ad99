"""geefit: estimating-equation fits for balanced longitudinal data.

The package fits marginal regression models by solving estimating
equations with one of four working-correlation strategies (independence,
fixed, pilot-frozen, adaptive), computes the exact Jacobian the Newton
solver uses, and ships the diagnostics and Monte Carlo machinery to audit
the asymptotic claims behind the adaptive strategy at finite sample
sizes.
"""

from .model import (
    DISPERSION,
    DatasetFormatError,
    LinkDomainError,
    LinkFunction,
    LongitudinalDataset,
    LINK_NAMES,
    get_link,
    link_eval,
    load_dataset_csv,
    marginal_mean,
    mean_jacobian,
    standardized_residual,
    variance_matrix,
    write_dataset_csv,
)
from .correlation import (
    AdaptiveCorrelation,
    CorrelationModel,
    CorrelationSingularError,
    FixedCorrelation,
    IdentityCorrelation,
    PilotCorrelation,
    inverse_derivative,
    pilot_correlation_sequence,
    residual_correlation,
    residual_correlation_derivative,
    structured_correlation,
    working_correlation,
    working_correlation_inverse,
)
from .estimator import (
    CovarianceEstimates,
    EstimatingFunctionContext,
    FitResult,
    JacobianDecomposition,
    NonConvergedPilotError,
    RankDeficiencyError,
    closed_form_linear,
    covariance_estimates,
    estimating_function,
    estimating_jacobian,
    fit,
    independence_fit,
    newton_solve,
)
from .diagnostics import (
    HypothesisCheckReport,
    OptimalityMatrices,
    RegularityConstants,
    eta_slope,
    h_indep,
    hypothesis_check,
    information_matrix,
    optimality_matrices_mc,
    regularity_constants,
)
from .simulation import (
    ConsistencyTrace,
    GeneratorConfig,
    IdentityCheckResult,
    MCSummary,
    MethodSummary,
    consistency_trace,
    covariate_design,
    efficiency_comparison,
    estimating_function_mean_check,
    generate_dataset,
    paired_variance_diff_se,
    quasi_score_identity_check,
    residual_quadratic_check,
    true_correlation,
    variance_se,
)

__version__ = "0.1.0"
