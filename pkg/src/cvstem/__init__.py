"""Convex-optimization-based stochastic tracking control.

The package synthesizes contraction metrics for Ito SDEs by solving a
small semidefinite program per sample, turns them into tracking
controllers for general input-affine systems and Lagrangian systems,
verifies the resulting mean-square error bounds by Monte Carlo, and
ships two benchmark plants (spacecraft attitude, spacecraft formation)
plus a config-driven CLI around them.
"""

from .analysis import (
    BoundUndefinedError,
    ContractionConstants,
    DiscreteConstants,
    continuous_mse_bound,
    discrete_mse_bound,
    lagrangian_mse_bound,
    optimal_epsilon,
    tracking_mse_bound,
)
from .controller import (
    ControllerState,
    GeneralCvstemController,
    InfeasibleReferenceError,
    LagrangianCvstemController,
    LagrangianGains,
    ResolvePolicy,
    min_norm_clf_control,
)
from .programs import (
    CvstemParams,
    LagrangianParams,
    MetricSolution,
    assemble_general_program,
    assemble_lagrangian_program,
    reconstruct_metric,
    solve,
    verify_nonconvex_feasibility,
)
from .sdc import SdcForm, deviation_from_sdc, validate_sdc
from .sdp import SdpProblem, SolverError
from .sim import (
    SdeDefinition,
    TrajectoryRecord,
    monte_carlo_mse,
    sample_wiener,
    simulate_closed_loop,
)

__version__ = "0.1.0"

__all__ = [
    "BoundUndefinedError",
    "ContractionConstants",
    "ControllerState",
    "CvstemParams",
    "DiscreteConstants",
    "GeneralCvstemController",
    "InfeasibleReferenceError",
    "LagrangianCvstemController",
    "LagrangianGains",
    "LagrangianParams",
    "MetricSolution",
    "ResolvePolicy",
    "SdcForm",
    "SdeDefinition",
    "SdpProblem",
    "SolverError",
    "TrajectoryRecord",
    "assemble_general_program",
    "assemble_lagrangian_program",
    "continuous_mse_bound",
    "deviation_from_sdc",
    "discrete_mse_bound",
    "lagrangian_mse_bound",
    "min_norm_clf_control",
    "monte_carlo_mse",
    "optimal_epsilon",
    "reconstruct_metric",
    "sample_wiener",
    "simulate_closed_loop",
    "solve",
    "tracking_mse_bound",
    "validate_sdc",
    "verify_nonconvex_feasibility",
    "__version__",
]
