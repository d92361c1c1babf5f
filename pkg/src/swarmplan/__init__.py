"""Multiagent point-to-point trajectory generation.

Each agent repeatedly solves a small dense QP over a fixed prediction
horizon, sharing position predictions with the fleet; collision constraints
are added on demand for the first predicted violation only, softened by
bounded, penalized slack variables.  See README.md for a tour.
"""
from .assembly import (
    CollisionEvent,
    NeighborSet,
    QpProblem,
    build_augmented_qp,
    build_cost,
    build_hard_qp,
    build_plain_qp,
    detect_first_collision,
    linearize_collision_constraint,
    scaled_distance,
)
from .engine import (
    HARD_FULL_HORIZON,
    HARD_ON_DEMAND,
    SOFT_ON_DEMAND,
    STRATEGIES,
    EngineConfig,
    TransitionResult,
    build_and_solve_qp,
    check_goal,
    make_context,
    run_transition,
)
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    GenerationError,
    ModelDomainError,
    SchemaError,
    SolverError,
    SwarmPlanError,
)
from .model import (
    AgentState,
    AlgoParams,
    PhysParams,
    PredictionMatrices,
    build_prediction_matrices,
    init_all_predictions,
    line_prediction,
    rollout,
    step_dynamics,
)
from .postprocess import (
    CollisionCheckReport,
    InterpolatedTrajectory,
    check_collisions,
    interpolate,
    scale_trajectory,
)
from .qpsolver import QpSolution, solve_qp, solve_qp_raw, verify_kkt
from .scenario import (
    RunMetrics,
    Scenario,
    compute_metrics,
    generate_random_scenario,
    load_scenario,
    read_trajectory_csv,
    save_scenario,
    write_trajectory_csv,
)

__version__ = "0.1.0"
