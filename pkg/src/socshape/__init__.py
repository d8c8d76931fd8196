"""Equilibrium pricing and social shaping for dynamic multi-agent resource markets."""

from .core import (
    AgentModel,
    EquilibriumError,
    InvalidScenarioError,
    NumericalError,
    OracleError,
    PriceVector,
    Scenario,
    ScenarioConstants,
    ShapingError,
    SocshapeError,
    ValidationReport,
    Violation,
    example_scenario,
    example_scenario_path,
    load_scenario,
    scenario_constants,
    scenario_from_dict,
    smallest_eigenvalue,
    spectral_norm,
    validate_scenario,
)
from .lqr import (
    AgentTrajectory,
    RiccatiSolution,
    agent_payoff,
    best_response,
    response_gradient,
    response_objective,
    riccati_backward,
    rollout,
)
from .equilibrium import (
    CertificateReport,
    EquilibriumSolution,
    SolverOptions,
    excess_demand,
    solve_equilibrium,
    trading_decisions,
    verify_equilibrium,
)
from .oracle import (
    BestResponseCheck,
    OracleSolution,
    best_response_check,
    welfare_oracle,
)
from .bounds import BoundReport, delta_max_dp, delta_max_qp
from .shaping import (
    BisectionState,
    ProbeResult,
    ShapingReport,
    bisection_shape,
    lambda_bar,
    monotonicity_probe,
    run_bisection,
)

__version__ = "0.1.0"

__all__ = [
    "AgentModel",
    "AgentTrajectory",
    "BestResponseCheck",
    "BisectionState",
    "BoundReport",
    "CertificateReport",
    "EquilibriumError",
    "EquilibriumSolution",
    "InvalidScenarioError",
    "NumericalError",
    "OracleError",
    "OracleSolution",
    "PriceVector",
    "ProbeResult",
    "RiccatiSolution",
    "Scenario",
    "ScenarioConstants",
    "ShapingError",
    "ShapingReport",
    "SocshapeError",
    "SolverOptions",
    "ValidationReport",
    "Violation",
    "agent_payoff",
    "best_response",
    "best_response_check",
    "bisection_shape",
    "delta_max_dp",
    "delta_max_qp",
    "example_scenario",
    "example_scenario_path",
    "excess_demand",
    "lambda_bar",
    "load_scenario",
    "monotonicity_probe",
    "response_gradient",
    "response_objective",
    "riccati_backward",
    "rollout",
    "run_bisection",
    "scenario_constants",
    "scenario_from_dict",
    "smallest_eigenvalue",
    "solve_equilibrium",
    "spectral_norm",
    "trading_decisions",
    "validate_scenario",
    "verify_equilibrium",
    "welfare_oracle",
    "__version__",
]
