"""Trajectory-optimization problem definition and evaluation.

A problem couples linear dynamics x_{k+1} = A x_k + B u_k with a quadratic
tracking objective, affine (convex) constraints, and a list of smooth
nonconvex scalar constraints. Evaluation, analytic linearization, and the
merit score used for warm-start ranking all live here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np


class DimensionMismatchError(ValueError):
    """Raised when an array does not match the dimensions the problem declares."""

    def __init__(self, fieldname: str, expected, actual):
        self.fieldname = fieldname
        super().__init__(f"{fieldname}: expected shape {expected}, got {actual}")


class LinearizationError(RuntimeError):
    """Raised when a constraint gradient is non-finite at the iterate."""

    def __init__(self, constraint_index: int, step: int):
        self.constraint_index = constraint_index
        self.step = step
        super().__init__(
            f"non-finite gradient for constraint {constraint_index} at step {step}"
        )


def _as_float_array(value, fieldname: str, shape=None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if shape is not None and arr.shape != shape:
        raise DimensionMismatchError(fieldname, shape, arr.shape)
    return arr


def _check_spd(mat: np.ndarray, fieldname: str) -> None:
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError(f"{fieldname} must be symmetric")
    if np.linalg.eigvalsh(mat).min() <= 0:
        raise ValueError(f"{fieldname} must be positive definite")


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class EllipseAvoidance:
    """Keep a selected 2D position outside a rotated ellipse.

    Constraint value is 1 - ||Z(angle)^T (M x - center)||^2 weighted by
    axis_weights, so <= 0 means the position is outside (or on) the ellipse.
    """

    selector: np.ndarray        # (2, n_x), maps state to a 2D position
    center: np.ndarray          # (2,)
    axis_weights: np.ndarray    # (2,), 1/length^2 per principal axis
    angle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "selector", np.asarray(self.selector, dtype=float))
        object.__setattr__(self, "center", _as_float_array(self.center, "center", (2,)))
        object.__setattr__(
            self, "axis_weights", _as_float_array(self.axis_weights, "axis_weights", (2,))
        )
        if np.any(self.axis_weights <= 0):
            raise ValueError("axis_weights must be positive")

    def _weighted_offset(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rot = rotation_matrix(self.angle)
        # W = Z diag(p) Z^T, the ellipse quadratic form in world coordinates.
        w_mat = rot @ np.diag(self.axis_weights) @ rot.T
        offset = self.selector @ x - self.center
        return w_mat, offset

    def value(self, x: np.ndarray, u: np.ndarray) -> float:
        w_mat, offset = self._weighted_offset(x)
        return 1.0 - float(offset @ w_mat @ offset)

    def gradients(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        w_mat, offset = self._weighted_offset(x)
        return -2.0 * self.selector.T @ w_mat @ offset, np.zeros(u.shape)


@dataclass(frozen=True)
class PairwiseSeparation:
    """Keep two selected 2D positions at least min_distance apart."""

    selector_i: np.ndarray      # (2, n_x)
    selector_j: np.ndarray      # (2, n_x)
    min_distance: float

    def __post_init__(self):
        object.__setattr__(self, "selector_i", np.asarray(self.selector_i, dtype=float))
        object.__setattr__(self, "selector_j", np.asarray(self.selector_j, dtype=float))
        if self.min_distance <= 0:
            raise ValueError("min_distance must be positive")

    def value(self, x: np.ndarray, u: np.ndarray) -> float:
        gap = (self.selector_i - self.selector_j) @ x
        return self.min_distance**2 - float(gap @ gap)

    def gradients(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        diff = self.selector_i - self.selector_j
        return -2.0 * diff.T @ (diff @ x), np.zeros(u.shape)


@dataclass(frozen=True)
class GenericSmooth:
    """Escape hatch: user-supplied scalar constraint with its Jacobian.

    value_fn(x, u) returns the scalar constraint value; grad_fn(x, u) returns
    the pair of row gradients (d/dx, d/du).
    """

    value_fn: Callable[[np.ndarray, np.ndarray], float]
    grad_fn: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

    def value(self, x: np.ndarray, u: np.ndarray) -> float:
        return float(self.value_fn(x, u))

    def gradients(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gx, gu = self.grad_fn(x, u)
        return np.asarray(gx, dtype=float), np.asarray(gu, dtype=float)


NonconvexConstraint = Union[EllipseAvoidance, PairwiseSeparation, GenericSmooth]


@dataclass(frozen=True)
class AffineConstraintSet:
    """Affine inequalities G_x x + G_u u - h <= 0."""

    G_x: np.ndarray
    G_u: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G_x", np.atleast_2d(np.asarray(self.G_x, dtype=float)))
        object.__setattr__(self, "G_u", np.atleast_2d(np.asarray(self.G_u, dtype=float)))
        object.__setattr__(self, "h", np.asarray(self.h, dtype=float).ravel())
        rows = self.G_x.shape[0]
        if self.G_u.shape[0] != rows:
            raise DimensionMismatchError("G_u", (rows, self.G_u.shape[1]), self.G_u.shape)
        if self.h.shape != (rows,):
            raise DimensionMismatchError("h", (rows,), self.h.shape)

    @classmethod
    def empty(cls, n_x: int, n_u: int) -> "AffineConstraintSet":
        return cls(np.zeros((0, n_x)), np.zeros((0, n_u)), np.zeros(0))

    @property
    def n_rows(self) -> int:
        return self.G_x.shape[0]

    def evaluate(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.G_x @ x + self.G_u @ u - self.h


@dataclass(frozen=True)
class Trajectory:
    """State/input sequence over the horizon; the unit passed between stages."""

    states: np.ndarray   # (N, n_x)
    inputs: np.ndarray   # (N, n_u)

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if states.shape[0] != inputs.shape[0]:
            raise DimensionMismatchError(
                "inputs", (states.shape[0], inputs.shape[1]), inputs.shape
            )
        if not (np.isfinite(states).all() and np.isfinite(inputs).all()):
            raise ValueError("trajectory entries must be finite")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def stacked(self) -> np.ndarray:
        """Per-step concatenation [x_k; u_k], shape (N, n_x + n_u)."""
        return np.hstack([self.states, self.inputs])


@dataclass(frozen=True)
class Linearization:
    """First-order model of the nonconvex block at an iterate.

    For each step k, g_N(x, u) is approximated by H[k] x + L[k] u + d[k];
    the offset d makes the model exact at the linearization point.
    """

    H: np.ndarray   # (N, n_N, n_x)
    L: np.ndarray   # (N, n_N, n_u)
    d: np.ndarray   # (N, n_N)


@dataclass(frozen=True)
class TrajectoryProblem:
    """Full problem instance: dynamics, costs, reference, and constraints."""

    A: np.ndarray                     # (n_x, n_x)
    B: np.ndarray                     # (n_x, n_u)
    C: np.ndarray                     # (n_y, n_x)
    Q: np.ndarray                     # (n_y, n_y) tracking weight, SPD
    R: np.ndarray                     # (n_u, n_u) effort weight, SPD
    initial_state: np.ndarray         # (n_x,)
    reference: np.ndarray             # (N, n_y)
    affine: AffineConstraintSet = None
    nonconvex: tuple = field(default_factory=tuple)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise DimensionMismatchError("A", (n_x, n_x), A.shape)
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if B.shape[0] != n_x:
            raise DimensionMismatchError("B", (n_x, B.shape[1]), B.shape)
        n_u = B.shape[1]
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[1] != n_x:
            raise DimensionMismatchError("C", (C.shape[0], n_x), C.shape)
        n_y = C.shape[0]
        Q = _as_float_array(self.Q, "Q", (n_y, n_y))
        R = _as_float_array(self.R, "R", (n_u, n_u))
        _check_spd(Q, "Q")
        _check_spd(R, "R")
        initial_state = _as_float_array(self.initial_state, "initial_state", (n_x,))
        reference = np.atleast_2d(np.asarray(self.reference, dtype=float))
        if reference.shape[1] != n_y:
            raise DimensionMismatchError("reference", ("N", n_y), reference.shape)
        if reference.shape[0] < 1:
            raise ValueError("reference must have at least one step")
        affine = self.affine if self.affine is not None else AffineConstraintSet.empty(n_x, n_u)
        if affine.G_x.shape[1] != n_x:
            raise DimensionMismatchError("affine.G_x", (affine.n_rows, n_x), affine.G_x.shape)
        if affine.G_u.shape[1] != n_u:
            raise DimensionMismatchError("affine.G_u", (affine.n_rows, n_u), affine.G_u.shape)
        for obj, name in [(A, "A"), (B, "B"), (C, "C"), (initial_state, "initial_state"),
                          (reference, "reference")]:
            if not np.isfinite(obj).all():
                raise ValueError(f"{name} must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "initial_state", initial_state)
        object.__setattr__(self, "reference", reference)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "nonconvex", tuple(self.nonconvex))

    @property
    def horizon(self) -> int:
        return self.reference.shape[0]

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_affine(self) -> int:
        return self.affine.n_rows

    @property
    def n_nonconvex(self) -> int:
        return len(self.nonconvex)

    def check_trajectory(self, traj: Trajectory) -> None:
        if traj.states.shape != (self.horizon, self.n_x):
            raise DimensionMismatchError(
                "states", (self.horizon, self.n_x), traj.states.shape
            )
        if traj.inputs.shape != (self.horizon, self.n_u):
            raise DimensionMismatchError(
                "inputs", (self.horizon, self.n_u), traj.inputs.shape
            )


def evaluate_objective(problem: TrajectoryProblem, traj: Trajectory) -> float:
    """Quadratic tracking-plus-effort cost summed over the horizon."""
    problem.check_trajectory(traj)
    err = traj.states @ problem.C.T - problem.reference   # (N, n_y)
    track = np.einsum("ki,ij,kj->", err, problem.Q, err)
    effort = np.einsum("ki,ij,kj->", traj.inputs, problem.R, traj.inputs)
    return float(track + effort)


def evaluate_affine(problem: TrajectoryProblem, traj: Trajectory) -> np.ndarray:
    """Affine constraint values per step, shape (N, n_affine); <= 0 is satisfied."""
    problem.check_trajectory(traj)
    aff = problem.affine
    return traj.states @ aff.G_x.T + traj.inputs @ aff.G_u.T - aff.h


def evaluate_nonconvex(problem: TrajectoryProblem, traj: Trajectory) -> np.ndarray:
    """Nonconvex constraint values per step, shape (N, n_nonconvex)."""
    problem.check_trajectory(traj)
    out = np.empty((traj.horizon, problem.n_nonconvex))
    for k in range(traj.horizon):
        x, u = traj.states[k], traj.inputs[k]
        for c, con in enumerate(problem.nonconvex):
            out[k, c] = con.value(x, u)
    return out


def linearize_nonconvex(problem: TrajectoryProblem, traj: Trajectory) -> Linearization:
    """Analytic first-order model of the nonconvex block at the given iterate."""
    problem.check_trajectory(traj)
    N, n_N = traj.horizon, problem.n_nonconvex
    H = np.zeros((N, n_N, problem.n_x))
    L = np.zeros((N, n_N, problem.n_u))
    d = np.zeros((N, n_N))
    for k in range(N):
        x, u = traj.states[k], traj.inputs[k]
        for c, con in enumerate(problem.nonconvex):
            gx, gu = con.gradients(x, u)
            if not (np.isfinite(gx).all() and np.isfinite(gu).all()):
                raise LinearizationError(c, k)
            H[k, c] = gx
            L[k, c] = gu
            d[k, c] = con.value(x, u) - gx @ x - gu @ u
    return Linearization(H=H, L=L, d=d)


def constraint_violation_l1(problem: TrajectoryProblem, traj: Trajectory) -> float:
    """Total L1 infeasibility: initial state, dynamics defects, and clipped constraints."""
    problem.check_trajectory(traj)
    x, u = traj.states, traj.inputs
    total = float(np.abs(x[0] - problem.initial_state).sum())
    if traj.horizon > 1:
        defects = x[:-1] @ problem.A.T + u[:-1] @ problem.B.T - x[1:]
        total += float(np.abs(defects).sum())
    g_aff = evaluate_affine(problem, traj)
    g_non = evaluate_nonconvex(problem, traj)
    total += float(np.clip(g_aff, 0.0, None).sum())
    total += float(np.clip(g_non, 0.0, None).sum())
    return total


DEFAULT_MERIT_WEIGHT = 100.0


def merit_phi(
    problem: TrajectoryProblem, traj: Trajectory, alpha_merit: float = DEFAULT_MERIT_WEIGHT
) -> float:
    """Objective plus weighted L1 constraint violations; ranks warm-start candidates."""
    if alpha_merit <= 0:
        raise ValueError("alpha_merit must be positive")
    return evaluate_objective(problem, traj) + alpha_merit * constraint_violation_l1(
        problem, traj
    )
