"""Approximate maximum likelihood for exponential-family and aster models
with Gaussian random effects."""

from .astergraph import (
    BlockDiag,
    GraphSpec,
    joint_loglik,
    joint_mean,
    joint_variance,
    parse_graph,
    read_graph,
    simulate_graph,
    theta_from_phi,
    phi_from_theta,
    validate_response,
)
from .boundary import (
    BoundaryReport,
    Decision,
    classify_boundary,
    descent_direction,
    descent_test,
    directional_derivative,
    smooth_part_gradient,
)
from .calculus import FisherInfo, fisher_information, p_blocks, q_gradient, q_hessian
from .design import (
    Dataset,
    ModelDesign,
    build_design,
    design_from_matrices,
    parse_formula,
    read_dataset,
)
from .errors import (
    AstermixError,
    ConvergenceError,
    DesignError,
    DomainError,
    FormulaError,
    GraphSpecError,
    PreconditionError,
    ResponseError,
    SingularityError,
)
from .expfam import Family, cumulant, mean, simulate_arrow, variance
from .fitting import FitOptions, FitResult, fit, fit_fixed
from .inference import BootstrapResult, mean_value_map, parametric_bootstrap
from .objective import inner_solve, penalized, profile, sqrt_objective
from .oracle import gaussian_lmm_exact, integrated_loglik_quadrature

__version__ = "0.1.0"
