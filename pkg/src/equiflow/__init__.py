"""Equilibrium assignment and OD-matrix solvers with duality-gap certificates."""

from .network import (
    BPR,
    SD,
    EdgeCostModel,
    FlowState,
    LevelGraph,
    Network,
    NetworkError,
    OutOfDomainError,
    ParseError,
    ValidationError,
    bpr_conjugate,
    bpr_cost,
    bpr_integral,
    edge_integral,
    load_network,
    sd_conjugate,
)
from .softmin import (
    UnreachableError,
    all_or_nothing,
    assignment_flows,
    effective_weights,
    hard_shortest,
    softmin_flows,
    softmin_potentials,
)
from .solvers import (
    DivergedOracleError,
    EntropySimplexProx,
    EuclideanProx,
    FunctionOracle,
    MirrorReport,
    SmoothOracle,
    SolverReport,
    mirror_descent_constrained,
    regularize,
    restart_wrapper,
    umt_minimize,
    umt_stochastic,
)
from .dual import (
    DualOracle,
    EquilibriumReport,
    StochasticDualOracle,
    capacity_violation,
    complementarity_residual,
    dual_value_grad,
    duality_gap,
    frank_wolfe_gap,
    solve_assignment,
    solve_multistage,
    stochastic_origin_oracle,
)
from .od import (
    ElpDualOracle,
    ElpProblem,
    ElpSolution,
    UnsupportedRegimeError,
    balancing_oracle,
    build_elp,
    elp_dual_oracle,
    entropy_regression_simplex,
    primal_value,
    solve_entropy_od,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
