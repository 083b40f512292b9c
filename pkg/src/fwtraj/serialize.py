"""Versioned JSON/CSV serialization for scenarios, problems, and run artifacts.

All JSON is written with sorted keys and repr-roundtrip floats, so identical
objects serialize to identical bytes. Matrices are stored row-major as nested
lists.
"""

from __future__ import annotations

import json
import numpy as np

from .clustering import ClusterAssignment
from .filtering import ParticleEnsemble
from .multiagent import Obstacle, Scenario
from .problem import (
    AffineConstraintSet,
    EllipseAvoidance,
    PairwiseSeparation,
    Trajectory,
    TrajectoryProblem,
)

SCENARIO_SCHEMA = "fwtraj/scenario/v1"
PROBLEM_SCHEMA = "fwtraj/problem/v1"
TRAJECTORY_SCHEMA = "fwtraj/trajectory/v1"
ENSEMBLE_SCHEMA = "fwtraj/ensemble/v1"


def _dump(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _matrix(mat: np.ndarray) -> list:
    return [[float(v) for v in row] for row in np.atleast_2d(mat)]


def _vector(vec: np.ndarray) -> list:
    return [float(v) for v in np.asarray(vec).ravel()]


def scenario_to_json(scenario: Scenario) -> str:
    payload = {
        "schema": SCENARIO_SCHEMA,
        "num_agents": scenario.num_agents,
        "time_step": scenario.time_step,
        "horizon": scenario.horizon,
        "starts": _matrix(scenario.starts),
        "goals": _matrix(scenario.goals),
        "obstacles": [
            {
                "center": _vector(o.center),
                "axis_weights": _vector(o.axis_weights),
                "angle": float(o.angle),
            }
            for o in scenario.obstacles
        ],
        "v_min": _vector(scenario.v_min),
        "v_max": _vector(scenario.v_max),
        "a_min": _vector(scenario.a_min),
        "a_max": _vector(scenario.a_max),
        "min_separation": float(scenario.min_separation),
        "Q": _matrix(scenario.Q),
        "R": _matrix(scenario.R),
    }
    return _dump(payload)


def scenario_from_json(text: str) -> Scenario:
    payload = json.loads(text)
    if payload.get("schema") != SCENARIO_SCHEMA:
        raise ValueError(f"unexpected scenario schema: {payload.get('schema')!r}")
    return Scenario(
        num_agents=int(payload["num_agents"]),
        time_step=float(payload["time_step"]),
        horizon=int(payload["horizon"]),
        starts=np.array(payload["starts"], dtype=float),
        goals=np.array(payload["goals"], dtype=float),
        obstacles=tuple(
            Obstacle(
                center=np.array(o["center"], dtype=float),
                axis_weights=np.array(o["axis_weights"], dtype=float),
                angle=float(o["angle"]),
            )
            for o in payload["obstacles"]
        ),
        v_min=np.array(payload["v_min"], dtype=float),
        v_max=np.array(payload["v_max"], dtype=float),
        a_min=np.array(payload["a_min"], dtype=float),
        a_max=np.array(payload["a_max"], dtype=float),
        min_separation=float(payload["min_separation"]),
        Q=np.array(payload["Q"], dtype=float),
        R=np.array(payload["R"], dtype=float),
    )


def _constraint_payload(con) -> dict:
    if isinstance(con, EllipseAvoidance):
        return {
            "kind": "ellipse_avoidance",
            "selector": _matrix(con.selector),
            "center": _vector(con.center),
            "axis_weights": _vector(con.axis_weights),
            "angle": float(con.angle),
        }
    if isinstance(con, PairwiseSeparation):
        return {
            "kind": "pairwise_separation",
            "selector_i": _matrix(con.selector_i),
            "selector_j": _matrix(con.selector_j),
            "min_distance": float(con.min_distance),
        }
    raise ValueError(f"constraint {type(con).__name__} has no JSON form")


def _constraint_from_payload(payload: dict):
    kind = payload.get("kind")
    if kind == "ellipse_avoidance":
        return EllipseAvoidance(
            selector=np.array(payload["selector"], dtype=float),
            center=np.array(payload["center"], dtype=float),
            axis_weights=np.array(payload["axis_weights"], dtype=float),
            angle=float(payload["angle"]),
        )
    if kind == "pairwise_separation":
        return PairwiseSeparation(
            selector_i=np.array(payload["selector_i"], dtype=float),
            selector_j=np.array(payload["selector_j"], dtype=float),
            min_distance=float(payload["min_distance"]),
        )
    raise ValueError(f"unknown constraint kind {kind!r}")


def problem_to_json(problem: TrajectoryProblem) -> str:
    """Full problem instance; nonconvex constraints keep their declaration order."""
    return _dump(
        {
            "schema": PROBLEM_SCHEMA,
            "A": _matrix(problem.A),
            "B": _matrix(problem.B),
            "C": _matrix(problem.C),
            "Q": _matrix(problem.Q),
            "R": _matrix(problem.R),
            "initial_state": _vector(problem.initial_state),
            "reference": _matrix(problem.reference),
            "affine": {
                "G_x": _matrix(problem.affine.G_x),
                "G_u": _matrix(problem.affine.G_u),
                "h": _vector(problem.affine.h),
            },
            "nonconvex": [_constraint_payload(c) for c in problem.nonconvex],
        }
    )


def problem_from_json(text: str) -> TrajectoryProblem:
    payload = json.loads(text)
    if payload.get("schema") != PROBLEM_SCHEMA:
        raise ValueError(f"unexpected problem schema: {payload.get('schema')!r}")
    aff = payload["affine"]
    n_x = len(payload["A"])
    n_u = len(payload["B"][0]) if payload["B"] else 0
    affine = AffineConstraintSet(
        G_x=np.array(aff["G_x"], dtype=float).reshape(-1, n_x),
        G_u=np.array(aff["G_u"], dtype=float).reshape(-1, n_u),
        h=np.array(aff["h"], dtype=float),
    )
    return TrajectoryProblem(
        A=np.array(payload["A"], dtype=float),
        B=np.array(payload["B"], dtype=float),
        C=np.array(payload["C"], dtype=float),
        Q=np.array(payload["Q"], dtype=float),
        R=np.array(payload["R"], dtype=float),
        initial_state=np.array(payload["initial_state"], dtype=float),
        reference=np.array(payload["reference"], dtype=float),
        affine=affine,
        nonconvex=tuple(_constraint_from_payload(c) for c in payload["nonconvex"]),
    )


def trajectory_to_json(traj: Trajectory) -> str:
    return _dump(
        {
            "schema": TRAJECTORY_SCHEMA,
            "states": _matrix(traj.states),
            "inputs": _matrix(traj.inputs),
        }
    )


def trajectory_from_json(text: str) -> Trajectory:
    payload = json.loads(text)
    if payload.get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"unexpected trajectory schema: {payload.get('schema')!r}")
    return Trajectory(
        states=np.array(payload["states"], dtype=float),
        inputs=np.array(payload["inputs"], dtype=float),
    )


def ensemble_to_json(ensemble: ParticleEnsemble) -> str:
    return _dump(
        {
            "schema": ENSEMBLE_SCHEMA,
            "seed": ensemble.seed,
            "state_dim": ensemble.state_dim,
            "trajectories": [_matrix(t) for t in ensemble.trajectories],
            "weights": _matrix(ensemble.weights),
            "covariances": [_matrix(c) for c in ensemble.covariances],
        }
    )


def ensemble_from_json(text: str) -> ParticleEnsemble:
    payload = json.loads(text)
    if payload.get("schema") != ENSEMBLE_SCHEMA:
        raise ValueError(f"unexpected ensemble schema: {payload.get('schema')!r}")
    return ParticleEnsemble(
        trajectories=np.array(payload["trajectories"], dtype=float),
        weights=np.array(payload["weights"], dtype=float),
        covariances=np.array(payload["covariances"], dtype=float),
        seed=int(payload["seed"]),
        state_dim=int(payload["state_dim"]),
    )


def assignment_to_json(assignment: ClusterAssignment) -> str:
    return _dump(
        {
            "labels": [int(v) for v in assignment.labels],
            "num_clusters": assignment.num_clusters,
        }
    )
