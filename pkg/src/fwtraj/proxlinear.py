"""Prox-linear outer loop: solve convexified subproblems to a fixed point.

Each iteration linearizes the nonconvex constraints at the current iterate,
solves the resulting QP with a proximal penalty of weight 1/(2*rho) on the
step, and adopts the QP solution. The loop stops once both the squared step
norm and the squared slack norm fall below the tolerance.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .problem import (
    Trajectory,
    TrajectoryProblem,
    constraint_violation_l1,
    evaluate_nonconvex,
    evaluate_objective,
    linearize_nonconvex,
)
from .qp import QPSettings, QPStatus, SubproblemBuilder, solve_qp

logger = logging.getLogger(__name__)

# The penalty weight must exceed the largest constraint multiplier for the
# penalty to be exact; 100 clears the benchmark multipliers while keeping the
# prox step 1/gamma large enough to converge in a few hundred iterations.
DEFAULT_PENALTY_WEIGHT = 100.0
DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_ITERATIONS = 400


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    QP_FAILURE = "qp_failure"


@dataclass(frozen=True)
class ProxLinearSettings:
    """Outer-loop parameters; the prox step size is 1/gamma_penalty."""

    gamma_penalty: float = DEFAULT_PENALTY_WEIGHT
    tolerance: float = DEFAULT_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    qp_settings: QPSettings = field(default_factory=QPSettings)
    qp_warm_start: bool = True

    def __post_init__(self):
        if self.gamma_penalty <= 1.0:
            raise ValueError("gamma_penalty must exceed 1 so the step size lies in (0, 1)")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")

    @property
    def step_size(self) -> float:
        return 1.0 / self.gamma_penalty


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    violation: float
    step_norm: float      # sum over steps of squared state+input step
    slack_norm: float     # sum over steps of squared slacks
    time_s: float


@dataclass
class ConvergenceLog:
    records: List[IterationRecord] = field(default_factory=list)

    CSV_HEADER = "iter,objective,violation,step_norm,slack_norm,time_s"

    def append(self, record: IterationRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(
                f"{r.iteration},{r.objective!r},{r.violation!r},"
                f"{r.step_norm!r},{r.slack_norm!r},{r.time_s!r}"
            )
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ProxLinearResult:
    trajectory: Trajectory
    log: ConvergenceLog
    status: SolveStatus
    failed_iteration: Optional[int] = None
    qp_status: Optional[QPStatus] = None


def _penalized_value(problem, traj, gamma_penalty) -> float:
    violations = np.clip(evaluate_nonconvex(problem, traj), 0.0, None)
    return evaluate_objective(problem, traj) + gamma_penalty * float(violations.sum())


def prox_linear_solve(
    problem: TrajectoryProblem,
    warm_start: Trajectory,
    settings: Optional[ProxLinearSettings] = None,
) -> ProxLinearResult:
    """Iterate convexified subproblems starting from warm_start.

    The first iteration always runs; afterwards the loop exits once
    step_norm <= tolerance and slack_norm <= tolerance. On a QP failure the
    last accepted iterate is returned along with the failing iteration index.
    """
    settings = settings or ProxLinearSettings()
    problem.check_trajectory(warm_start)
    builder = SubproblemBuilder(problem, settings.gamma_penalty, settings.step_size)
    layout = builder.layout

    log = ConvergenceLog()
    iterate = warm_start
    # The descent property holds between accepted iterates (each feasible for
    # the subproblem it produced); the warm start itself is excluded since it
    # may violate the dynamics.
    previous_penalized = None
    qp_primal = qp_dual = None
    start = time.perf_counter()

    for j in range(1, settings.max_iterations + 1):
        lin = linearize_nonconvex(problem, iterate)
        qp = builder.build(iterate, lin)
        solution = solve_qp(
            qp,
            settings.qp_settings,
            warm_primal=qp_primal if settings.qp_warm_start else None,
            warm_dual=qp_dual if settings.qp_warm_start else None,
        )
        if solution.status is not QPStatus.SOLVED:
            return ProxLinearResult(
                trajectory=iterate,
                log=log,
                status=SolveStatus.QP_FAILURE,
                failed_iteration=j,
                qp_status=solution.status,
            )
        qp_primal, qp_dual = solution.z, solution.y

        new_iterate, slacks = layout.split(solution.z)
        step_norm = float(
            ((new_iterate.states - iterate.states) ** 2).sum()
            + ((new_iterate.inputs - iterate.inputs) ** 2).sum()
        )
        slack_norm = float((slacks**2).sum())
        iterate = new_iterate

        penalized = _penalized_value(problem, iterate, settings.gamma_penalty)
        if previous_penalized is not None and penalized > previous_penalized + 1e-8:
            logger.warning(
                "penalized objective increased at iteration %d: %.6e -> %.6e",
                j, previous_penalized, penalized,
            )
        previous_penalized = penalized

        log.append(
            IterationRecord(
                iteration=j,
                objective=evaluate_objective(problem, iterate),
                violation=constraint_violation_l1(problem, iterate),
                step_norm=step_norm,
                slack_norm=slack_norm,
                time_s=time.perf_counter() - start,
            )
        )

        if step_norm <= settings.tolerance and slack_norm <= settings.tolerance:
            return ProxLinearResult(trajectory=iterate, log=log, status=SolveStatus.CONVERGED)

    return ProxLinearResult(trajectory=iterate, log=log, status=SolveStatus.MAX_ITERATIONS)
