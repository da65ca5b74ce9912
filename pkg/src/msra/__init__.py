"""Multivariate shortfall risk allocation.

Computes the minimal-cost acceptable capital allocation for a vector of
interdependent losses, the resulting systemic risk measure, sensitivities
of both to shocks and to the dependence weight of the loss function, and a
clearing-house default-fund allocation built on top.
"""

from .defaultfund import (
    DefaultFundReport,
    allocate_default_fund,
    cover2,
    initial_margin,
)
from .estimators import (
    ChebyshevSurrogate,
    ConstraintEstimator,
    EstimateResult,
    QuadratureOracle,
    SurrogateEstimator,
    chebyshev_eval,
    chebyshev_fit,
    quadrature_oracle,
)
from .loss import (
    LossSpec,
    LossValidationReport,
    UnsupportedOperation,
    exp_bivariate,
    loss_eval,
    loss_grad,
    loss_hess,
    ph1,
    ph2,
    quadratic_systemic,
    validate_loss,
)
from .scenario import (
    GaussianModel,
    PositionsTable,
    ScenarioSet,
    StudentCopulaModel,
    load_positions,
    simulate_gaussian,
    simulate_student_copula,
)
from .sensitivity import (
    AlphaSensitivity,
    SaddleSystem,
    SensitivityResult,
    alpha_sensitivity,
    bivariate_shock_closed_form,
    build_saddle_system,
    exp_bivariate_closed_form,
    finite_difference_alpha,
    finite_difference_shock,
    marginal_allocation,
    marginal_risk,
    shock_sensitivity,
    src_closed_form,
)
from .solver import (
    AllocationResult,
    InfeasibleError,
    NonUniqueAllocationError,
    SolverError,
    kkt_residual,
    risk_measure,
    solve_allocation,
)

__version__ = "0.1.0"
