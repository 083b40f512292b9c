"""Multi-agent collision-avoidance benchmark.

Agents are planar double integrators discretized exactly under zero-order
hold. Velocities and accelerations get elementwise box bounds, every agent
must stay outside a shared set of elliptical obstacles, every pair of agents
keeps a minimum separation, and the tracking reference linearly interpolates
each agent's start to its goal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .problem import (
    AffineConstraintSet,
    EllipseAvoidance,
    PairwiseSeparation,
    TrajectoryProblem,
)

DEFAULT_TIME_STEP = 1.0
DEFAULT_TRACKING_WEIGHT = 10.0
DEFAULT_EFFORT_WEIGHT = 1.0
DEFAULT_MIN_SEPARATION = 0.5


class UnknownPresetError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """Elliptical keep-out region: center, per-axis weights 1/length^2, rotation."""

    center: np.ndarray
    axis_weights: np.ndarray
    angle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "axis_weights", np.asarray(self.axis_weights, dtype=float))
        if np.any(self.axis_weights <= 0):
            raise ValueError("axis_weights must be positive")


@dataclass(frozen=True)
class Scenario:
    num_agents: int
    time_step: float
    horizon: int
    starts: np.ndarray           # (n, 2)
    goals: np.ndarray            # (n, 2)
    obstacles: Tuple[Obstacle, ...]
    v_min: np.ndarray            # (2n,)
    v_max: np.ndarray
    a_min: np.ndarray
    a_max: np.ndarray
    min_separation: float = DEFAULT_MIN_SEPARATION
    Q: np.ndarray = None         # (2n, 2n) tracking weight
    R: np.ndarray = None         # (2n, 2n) effort weight

    def __post_init__(self):
        n = self.num_agents
        starts = np.asarray(self.starts, dtype=float).reshape(n, 2)
        goals = np.asarray(self.goals, dtype=float).reshape(n, 2)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)
        for name in ("v_min", "v_max", "a_min", "a_max"):
            vec = np.asarray(getattr(self, name), dtype=float).ravel()
            if vec.shape != (2 * n,):
                raise ValueError(f"{name} must have length {2 * n}")
            object.__setattr__(self, name, vec)
        if np.any(self.v_min >= self.v_max) or np.any(self.a_min >= self.a_max):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if self.time_step <= 0:
            raise ValueError("time_step must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be positive")
        Q = self.Q if self.Q is not None else DEFAULT_TRACKING_WEIGHT * np.eye(2 * n)
        R = self.R if self.R is not None else DEFAULT_EFFORT_WEIGHT * np.eye(2 * n)
        object.__setattr__(self, "Q", np.asarray(Q, dtype=float))
        object.__setattr__(self, "R", np.asarray(R, dtype=float))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))


def zoh_double_integrator(num_agents: int, dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretization of stacked planar double integrators.

    The continuous dynamics are nilpotent, so the matrix exponential truncates:
    positions integrate velocity plus half-dt-squared acceleration exactly.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    a_block = np.array(
        [[1.0, 0.0, dt, 0.0],
         [0.0, 1.0, 0.0, dt],
         [0.0, 0.0, 1.0, 0.0],
         [0.0, 0.0, 0.0, 1.0]]
    )
    b_block = np.array(
        [[dt**2 / 2.0, 0.0],
         [0.0, dt**2 / 2.0],
         [dt, 0.0],
         [0.0, dt]]
    )
    c_block = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    eye = np.eye(num_agents)
    return np.kron(eye, a_block), np.kron(eye, b_block), np.kron(eye, c_block)


def position_selector(agent: int, num_agents: int) -> np.ndarray:
    """Rows of the state that hold agent's (x, y) position."""
    sel = np.zeros((2, 4 * num_agents))
    sel[0, 4 * agent] = 1.0
    sel[1, 4 * agent + 1] = 1.0
    return sel


def build_benchmark(scenario: Scenario) -> TrajectoryProblem:
    """Instantiate the full trajectory problem for a scenario."""
    n = scenario.num_agents
    N = scenario.horizon
    A, B, C = zoh_double_integrator(n, scenario.time_step)

    initial_state = np.zeros(4 * n)
    for i in range(n):
        initial_state[4 * i : 4 * i + 2] = scenario.starts[i]

    # Reference: per-agent straight line from start to goal, one row per step.
    if N == 1:
        fractions = np.ones(1)
    else:
        fractions = np.arange(N) / (N - 1)
    reference = np.empty((N, 2 * n))
    for i in range(n):
        seg = scenario.starts[i] + fractions[:, None] * (scenario.goals[i] - scenario.starts[i])
        reference[:, 2 * i : 2 * i + 2] = seg

    vel = np.kron(np.eye(n), np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]))
    G_x = np.vstack([vel, -vel, np.zeros((4 * n, 4 * n))])
    G_u = np.vstack([np.zeros((4 * n, 2 * n)), np.eye(2 * n), -np.eye(2 * n)])
    h = np.concatenate([scenario.v_max, -scenario.v_min, scenario.a_max, -scenario.a_min])
    affine = AffineConstraintSet(G_x=G_x, G_u=G_u, h=h)

    nonconvex = []
    for i in range(n):
        sel = position_selector(i, n)
        for obs in scenario.obstacles:
            nonconvex.append(
                EllipseAvoidance(
                    selector=sel,
                    center=obs.center,
                    axis_weights=obs.axis_weights,
                    angle=obs.angle,
                )
            )
    for i in range(n):
        for j in range(i + 1, n):
            nonconvex.append(
                PairwiseSeparation(
                    selector_i=position_selector(i, n),
                    selector_j=position_selector(j, n),
                    min_distance=scenario.min_separation,
                )
            )

    return TrajectoryProblem(
        A=A,
        B=B,
        C=C,
        Q=scenario.Q,
        R=scenario.R,
        initial_state=initial_state,
        reference=reference,
        affine=affine,
        nonconvex=tuple(nonconvex),
    )


def _benchmark_obstacles() -> Tuple[Obstacle, ...]:
    return (
        Obstacle(center=(3.0, 3.0), axis_weights=(0.25, 0.25), angle=0.0),
        Obstacle(center=(9.0, 5.0), axis_weights=(1.0 / 2.25, 1.0 / 2.25), angle=0.0),
        Obstacle(center=(5.0, 9.0), axis_weights=(0.25, 1.0 / 2.25), angle=np.pi / 3.0),
    )


_PRESET_ENDPOINTS = {
    "two-agent": (
        [(0.0, 0.0), (5.0, 12.0)],
        [(12.0, 12.0), (6.0, 0.0)],
    ),
    "six-agent": (
        [(6.5, 13.0), (3.25, 0.0), (9.75, 0.0), (0.0, 3.25), (0.0, 9.75), (13.0, 6.5)],
        [(6.5, 0.0), (9.75, 13.0), (3.25, 13.0), (13.0, 9.75), (13.0, 3.25), (0.0, 6.5)],
    ),
}


def paper_scenario(name: str, time_step: float = DEFAULT_TIME_STEP, horizon: int = 30) -> Scenario:
    """Benchmark presets: three shared obstacles, +/-2 velocity and +/-1 acceleration."""
    if name not in _PRESET_ENDPOINTS:
        raise UnknownPresetError(
            f"unknown preset {name!r}; available: {sorted(_PRESET_ENDPOINTS)}"
        )
    starts, goals = _PRESET_ENDPOINTS[name]
    n = len(starts)
    ones = np.ones(2 * n)
    return Scenario(
        num_agents=n,
        time_step=time_step,
        horizon=horizon,
        starts=np.array(starts),
        goals=np.array(goals),
        obstacles=_benchmark_obstacles(),
        v_min=-2.0 * ones,
        v_max=2.0 * ones,
        a_min=-1.0 * ones,
        a_max=1.0 * ones,
    )
