"""Filter-warm-started trajectory optimization.

Pipeline: sample candidate trajectories with a constraint-aware particle
filter, cluster them into candidate local optima, score and pick a warm
start, then refine it with a prox-linear solver over convex QP subproblems.
"""

__version__ = "0.1.0"

from .problem import (
    AffineConstraintSet,
    EllipseAvoidance,
    GenericSmooth,
    Linearization,
    PairwiseSeparation,
    Trajectory,
    TrajectoryProblem,
    constraint_violation_l1,
    evaluate_affine,
    evaluate_nonconvex,
    evaluate_objective,
    linearize_nonconvex,
    merit_phi,
)
from .filtering import (
    FilterConfig,
    ParticleEnsemble,
    UTResult,
    VirtualSystem,
    build_virtual_system,
    ensemble_to_trajectories,
    matrix_sqrt_psd,
    particle_filter,
    softplus,
    unscented_transform,
)
from .clustering import (
    ClusterAssignment,
    Dendrogram,
    agglomerate_group_average,
    cluster_centers,
    cost_weight_matrix,
    cut_dendrogram,
    distance_matrix,
    select_warm_start,
    trajectory_distance,
)
from .qp import (
    QPInstance,
    QPSettings,
    QPSolution,
    QPStatus,
    SubproblemLayout,
    assemble_subproblem,
    solve_qp,
)
from .proxlinear import (
    ConvergenceLog,
    ProxLinearResult,
    ProxLinearSettings,
    SolveStatus,
    prox_linear_solve,
)
from .multiagent import (
    Obstacle,
    Scenario,
    build_benchmark,
    paper_scenario,
    zoh_double_integrator,
)
