"""Sparse convex QP: subproblem assembly and an embedded first-order solver.

The solver is an operator-splitting (ADMM) method for
    minimize 1/2 z' P z + q' z   subject to   lower <= M z <= upper,
with Ruiz equilibration, per-row penalty weights (heavier on equality rows),
over-relaxation, and periodic penalty rescaling. Termination uses unscaled
residuals, so a Solved status certifies the bounds within eps_abs/eps_rel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import Linearization, Trajectory, TrajectoryProblem

_MIN_SCALING = 1e-4
_MAX_SCALING = 1e4
_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_RHO_EQ_FACTOR = 1e3


class QPStatus(enum.Enum):
    SOLVED = "solved"
    MAX_ITERATIONS = "max_iterations"
    PRIMAL_INFEASIBLE = "primal_infeasible"


@dataclass(frozen=True)
class QPSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20000
    over_relaxation: float = 1.6
    sigma: float = 1e-6
    rho: float = 0.1
    adaptive_rho: bool = True
    rho_update_interval: int = 100
    check_interval: int = 25
    scaling_iters: int = 10
    eps_infeasible: float = 1e-6
    polish: bool = True
    polish_reg: float = 1e-9
    polish_refine_steps: int = 3


@dataclass(frozen=True)
class QPInstance:
    """Canonical-form QP. P must be symmetric PSD (trusted, not re-verified)."""

    P: sp.csc_matrix
    q: np.ndarray
    M: sp.csc_matrix
    lower: np.ndarray
    upper: np.ndarray
    obj_const: float = 0.0

    def __post_init__(self):
        P = sp.csc_matrix(self.P)
        M = sp.csc_matrix(self.M)
        q = np.asarray(self.q, dtype=float).ravel()
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        n = q.size
        if P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {P.shape}")
        if M.shape[1] != n or M.shape[0] != lower.size or lower.size != upper.size:
            raise ValueError("constraint dimensions are inconsistent")
        asym = abs(P - P.T)
        if asym.nnz and asym.max() > 1e-9 * max(1.0, abs(P).max()):
            raise ValueError("P must be symmetric")
        if np.any(lower > upper):
            raise ValueError("lower bound exceeds upper bound")
        if not (np.isfinite(P.data).all() and np.isfinite(M.data).all() and np.isfinite(q).all()):
            raise ValueError("P, q, M entries must be finite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def n_z(self) -> int:
        return self.q.size

    @property
    def n_c(self) -> int:
        return self.lower.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z + self.obj_const)


@dataclass(frozen=True)
class QPSolution:
    z: np.ndarray
    y: np.ndarray
    status: QPStatus
    primal_residual: float
    dual_residual: float
    iterations: int


def dump_qp_coordinate(qp: QPInstance) -> str:
    """Debug dump: coordinate triplets for P and M plus the dense vectors."""
    lines = [f"n_z {qp.n_z}", f"n_c {qp.n_c}"]
    for name, mat in (("P", qp.P.tocoo()), ("M", qp.M.tocoo())):
        lines.append(f"{name} nnz {mat.nnz}")
        for r, c, v in zip(mat.row, mat.col, mat.data):
            lines.append(f"{name} {r} {c} {v!r}")
    for name, vec in (("q", qp.q), ("l", qp.lower), ("u", qp.upper)):
        lines.append(f"{name} " + " ".join(repr(float(v)) for v in vec))
    return "\n".join(lines) + "\n"


def _ruiz_equilibrate(P, q, M, lower, upper, iters):
    """Modified Ruiz equilibration of the KKT block plus cost normalization."""
    n, m = q.size, lower.size
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    P = P.copy()
    M = M.copy()
    q = q.copy()
    lower = lower.copy()
    upper = upper.copy()

    def col_inf_norms(mat):
        mat = abs(mat)
        out = np.zeros(mat.shape[1])
        if mat.nnz:
            out = np.asarray(mat.max(axis=0).todense()).ravel()
        return out

    def row_inf_norms(mat):
        mat = abs(mat)
        out = np.zeros(mat.shape[0])
        if mat.nnz:
            out = np.asarray(mat.max(axis=1).todense()).ravel()
        return out

    for _ in range(iters):
        norms_z = np.maximum(col_inf_norms(P), col_inf_norms(M))
        delta_d = np.where(norms_z > 1e-10, 1.0 / np.sqrt(norms_z), 1.0)
        delta_d = np.clip(delta_d, _MIN_SCALING, _MAX_SCALING)
        norms_c = row_inf_norms(M)
        delta_e = np.where(norms_c > 1e-10, 1.0 / np.sqrt(norms_c), 1.0)
        delta_e = np.clip(delta_e, _MIN_SCALING, _MAX_SCALING)

        Dd = sp.diags(delta_d)
        Ee = sp.diags(delta_e)
        P = (Dd @ P @ Dd).tocsc()
        M = (Ee @ M @ Dd).tocsc()
        q = delta_d * q
        with np.errstate(invalid="ignore"):
            lower = delta_e * lower
            upper = delta_e * upper
        d *= delta_d
        e *= delta_e

        # Cost normalization keeps the quadratic and linear parts comparable.
        p_cols = col_inf_norms(P)
        gamma = max(np.mean(p_cols) if p_cols.size else 0.0,
                    np.abs(q).max(initial=0.0))
        gamma = 1.0 / gamma if gamma > 1e-10 else 1.0
        P = P * gamma
        q = q * gamma
        c *= gamma

    # inf * scaling can produce nan only if scaling were 0; clips prevent that.
    return P.tocsc(), q, M.tocsc(), lower, upper, d, e, c


def _rho_vector(rho_base: float, eq_mask: np.ndarray) -> np.ndarray:
    rho = np.full(eq_mask.size, rho_base)
    rho[eq_mask] = np.clip(rho_base * _RHO_EQ_FACTOR, _RHO_MIN, _RHO_MAX)
    return rho


def _factor_kkt(P, M, sigma, rho_vec):
    n = P.shape[0]
    kkt = sp.vstack(
        [
            sp.hstack([P + sigma * sp.eye(n), M.T]),
            sp.hstack([M, sp.diags(-1.0 / rho_vec)]),
        ]
    ).tocsc()
    return spla.splu(kkt)


def solve_qp(
    qp: QPInstance,
    settings: Optional[QPSettings] = None,
    warm_primal: Optional[np.ndarray] = None,
    warm_dual: Optional[np.ndarray] = None,
) -> QPSolution:
    """Solve the QP; deterministic for fixed inputs and settings.

    Returns SOLVED when unscaled primal/dual residuals meet the tolerances,
    PRIMAL_INFEASIBLE when the dual-update direction certifies an empty
    feasible set, and MAX_ITERATIONS with the last iterate otherwise.
    """
    settings = settings or QPSettings()
    n, m = qp.n_z, qp.n_c

    if m == 0:
        z = spla.spsolve(
            (qp.P + settings.sigma * sp.eye(n)).tocsc(), -qp.q
        )
        z = np.atleast_1d(z)
        r_dual = np.abs(qp.P @ z + qp.q).max(initial=0.0)
        status = QPStatus.SOLVED if r_dual <= settings.eps_abs * 10 else QPStatus.MAX_ITERATIONS
        return QPSolution(z=z, y=np.zeros(0), status=status,
                          primal_residual=0.0, dual_residual=float(r_dual), iterations=1)

    if settings.scaling_iters > 0:
        Ps, qs, Ms, ls, us, d, e, c = _ruiz_equilibrate(
            qp.P, qp.q, qp.M, qp.lower, qp.upper, settings.scaling_iters
        )
    else:
        Ps, qs, Ms, ls, us = qp.P, qp.q, qp.M, qp.lower, qp.upper
        d, e, c = np.ones(n), np.ones(m), 1.0

    eq_mask = (qp.upper - qp.lower) < 1e-12
    rho_base = settings.rho
    rho_vec = _rho_vector(rho_base, eq_mask)
    solver = _factor_kkt(Ps, Ms, settings.sigma, rho_vec)

    x = np.zeros(n) if warm_primal is None else np.asarray(warm_primal, dtype=float) / d
    if warm_dual is None:
        y = np.zeros(m)
    else:
        y = c * np.asarray(warm_dual, dtype=float) / e
    z = np.clip(Ms @ x, ls, us)

    alpha = settings.over_relaxation
    rhs = np.empty(n + m)
    y_unscaled_prev = e * y / c
    status = QPStatus.MAX_ITERATIONS
    r_prim = r_dual = np.inf
    iters_done = settings.max_iter

    for it in range(1, settings.max_iter + 1):
        rhs[:n] = settings.sigma * x - qs
        rhs[n:] = z - y / rho_vec
        sol = solver.solve(rhs)
        x_tilde = sol[:n]
        z_tilde = z + (sol[n:] - y) / rho_vec
        x = alpha * x_tilde + (1.0 - alpha) * x
        z_relaxed = alpha * z_tilde + (1.0 - alpha) * z
        z = np.clip(z_relaxed + y / rho_vec, ls, us)
        y = y + rho_vec * (z_relaxed - z)

        if it % settings.check_interval == 0 or it == settings.max_iter:
            x_u = d * x
            z_u = z / e
            y_u = e * y / c
            Mx = qp.M @ x_u
            Px = qp.P @ x_u
            Mty = qp.M.T @ y_u
            r_prim = np.abs(Mx - z_u).max(initial=0.0)
            r_dual = np.abs(Px + qp.q + Mty).max(initial=0.0)
            eps_prim = settings.eps_abs + settings.eps_rel * max(
                np.abs(Mx).max(initial=0.0), np.abs(z_u).max(initial=0.0)
            )
            eps_dual = settings.eps_abs + settings.eps_rel * max(
                np.abs(Px).max(initial=0.0),
                np.abs(Mty).max(initial=0.0),
                np.abs(qp.q).max(initial=0.0),
            )
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = QPStatus.SOLVED
                iters_done = it
                break

            delta_y = y_u - y_unscaled_prev
            y_unscaled_prev = y_u
            if _certifies_primal_infeasible(qp, delta_y, settings.eps_infeasible):
                status = QPStatus.PRIMAL_INFEASIBLE
                iters_done = it
                break

            if (
                settings.adaptive_rho
                and it % settings.rho_update_interval == 0
                and it < settings.max_iter
            ):
                new_base = _adapted_rho(
                    rho_base, Ps, qs, Ms, x, z, y, r_prim_scaled=np.abs(Ms @ x - z).max(initial=0.0)
                )
                if new_base is not None:
                    rho_base = new_base
                    rho_vec = _rho_vector(rho_base, eq_mask)
                    solver = _factor_kkt(Ps, Ms, settings.sigma, rho_vec)

    z_out = d * x
    y_out = e * y / c
    if status is QPStatus.SOLVED and settings.polish:
        polished = _polish(qp, z_out, y_out, settings)
        if polished is not None:
            z_out, y_out, r_prim, r_dual = polished
    return QPSolution(
        z=z_out,
        y=y_out,
        status=status,
        primal_residual=float(r_prim),
        dual_residual=float(r_dual),
        iterations=iters_done,
    )


def _box_residuals(qp: QPInstance, z: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    Mz = qp.M @ z
    r_prim = np.maximum(qp.lower - Mz, Mz - qp.upper)
    r_prim = np.clip(r_prim, 0.0, None).max(initial=0.0)
    r_dual = np.abs(qp.P @ z + qp.q + qp.M.T @ y).max(initial=0.0)
    return float(r_prim), float(r_dual)


def _solve_active_set(qp: QPInstance, active: np.ndarray, rhs_act: np.ndarray, settings):
    """Equality-constrained solve on the active rows with iterative refinement."""
    n, ma = qp.n_z, active.size
    M_act = qp.M[active].tocsc() if ma else sp.csc_matrix((0, n))
    delta = settings.polish_reg
    kkt_reg = sp.vstack(
        [
            sp.hstack([qp.P + delta * sp.eye(n), M_act.T]),
            sp.hstack([M_act, -delta * sp.eye(ma) if ma else sp.csc_matrix((0, 0))]),
        ]
    ).tocsc()
    rhs = np.concatenate([-qp.q, rhs_act])
    if not np.isfinite(rhs).all():
        return None
    try:
        lu = spla.splu(kkt_reg)
    except RuntimeError:
        return None
    sol = lu.solve(rhs)
    kkt_exact = sp.vstack(
        [
            sp.hstack([qp.P, M_act.T]),
            sp.hstack([M_act, sp.csc_matrix((ma, ma))]),
        ]
    ).tocsc()
    for _ in range(settings.polish_refine_steps):
        sol = sol + lu.solve(rhs - kkt_exact @ sol)
    if not np.isfinite(sol).all():
        return None
    z_pol = sol[:n]
    y_pol = np.zeros(qp.n_c)
    y_pol[active] = sol[n:]
    return z_pol, y_pol


def _polish(qp: QPInstance, z: np.ndarray, y: np.ndarray, settings: QPSettings):
    """Re-solve on the active set guessed from dual signs.

    The guess is refined for a few passes: inactive rows the candidate point
    violates are added, active rows whose multiplier sign points the wrong way
    are dropped. Returns (z, y, r_prim, r_dual) when the polished point beats
    the ADMM iterate's residuals, else None.
    """
    eq = (qp.upper - qp.lower) < 1e-12
    finite_low = np.isfinite(qp.lower)
    finite_upp = np.isfinite(qp.upper)
    low_active = (y < 0) & ~eq & finite_low
    upp_active = (y > 0) & ~eq & finite_upp

    r_prim_old, r_dual_old = _box_residuals(qp, z, y)
    tol = max(1e-9, 0.1 * settings.eps_abs)
    clean = None
    for _ in range(8):
        active = np.flatnonzero(eq | low_active | upp_active)
        rhs_act = np.where(low_active[active] | eq[active], qp.lower[active], qp.upper[active])
        solved = _solve_active_set(qp, active, rhs_act, settings)
        if solved is None:
            return None
        z_pol, y_pol = solved
        Mz = qp.M @ z_pol
        viol_low = (Mz < qp.lower - tol) & ~(eq | low_active) & finite_low
        viol_upp = (Mz > qp.upper + tol) & ~(eq | upp_active) & finite_upp
        wrong_low = low_active & (y_pol > tol)
        wrong_upp = upp_active & (y_pol < -tol)
        if not (viol_low.any() or viol_upp.any() or wrong_low.any() or wrong_upp.any()):
            clean = (z_pol, y_pol)
            break
        low_active = (low_active & ~wrong_low) | viol_low
        upp_active = (upp_active & ~wrong_upp) | viol_upp

    # A pass with misidentified activity or wrong-signed multipliers is a KKT
    # point of the wrong active set; fall back to the splitting iterate.
    if clean is None:
        return None
    z_pol, y_pol = clean
    r_prim_pol, r_dual_pol = _box_residuals(qp, z_pol, y_pol)
    if max(r_prim_pol, r_dual_pol) <= max(r_prim_old, r_dual_old):
        return z_pol, y_pol, r_prim_pol, r_dual_pol
    return None


def _adapted_rho(rho_base, Ps, qs, Ms, x, z, y, r_prim_scaled):
    """OSQP-style penalty rescaling from the ratio of relative residuals."""
    r_dual_scaled = np.abs(Ps @ x + qs + Ms.T @ y).max(initial=0.0)
    prim_ref = max(np.abs(Ms @ x).max(initial=0.0), np.abs(z).max(initial=0.0), 1e-10)
    dual_ref = max(
        np.abs(Ps @ x).max(initial=0.0),
        np.abs(Ms.T @ y).max(initial=0.0),
        np.abs(qs).max(initial=0.0),
        1e-10,
    )
    ratio = np.sqrt((r_prim_scaled / prim_ref) / max(r_dual_scaled / dual_ref, 1e-16))
    if ratio > 5.0 or ratio < 0.2:
        return float(np.clip(rho_base * ratio, _RHO_MIN, _RHO_MAX))
    return None


def _certifies_primal_infeasible(qp: QPInstance, delta_y: np.ndarray, eps: float) -> bool:
    norm = np.abs(delta_y).max(initial=0.0)
    if norm <= eps:
        return False
    v = delta_y / norm
    v_pos = np.clip(v, 0.0, None)
    v_neg = np.clip(v, None, 0.0)
    upper_inf = ~np.isfinite(qp.upper)
    lower_inf = ~np.isfinite(qp.lower)
    if np.any(v_pos[upper_inf] > eps) or np.any(v_neg[lower_inf] < -eps):
        return False
    support = float(
        qp.upper[~upper_inf] @ v_pos[~upper_inf] + qp.lower[~lower_inf] @ v_neg[~lower_inf]
    )
    if support > -eps:
        return False
    return np.abs(qp.M.T @ v).max(initial=0.0) <= eps


@dataclass(frozen=True)
class SubproblemLayout:
    """Index map between the stacked decision vector and (x_k, u_k, s_k) blocks."""

    horizon: int
    n_x: int
    n_u: int
    n_slack: int

    @property
    def block(self) -> int:
        return self.n_x + self.n_u + self.n_slack

    @property
    def n_z(self) -> int:
        return self.horizon * self.block

    def x_slice(self, k: int) -> slice:
        base = k * self.block
        return slice(base, base + self.n_x)

    def u_slice(self, k: int) -> slice:
        base = k * self.block + self.n_x
        return slice(base, base + self.n_u)

    def s_slice(self, k: int) -> slice:
        base = k * self.block + self.n_x + self.n_u
        return slice(base, base + self.n_slack)

    def pack(self, traj: Trajectory, slacks: Optional[np.ndarray] = None) -> np.ndarray:
        z = np.zeros(self.n_z)
        for k in range(self.horizon):
            z[self.x_slice(k)] = traj.states[k]
            z[self.u_slice(k)] = traj.inputs[k]
            if slacks is not None and self.n_slack:
                z[self.s_slice(k)] = slacks[k]
        return z

    def split(self, z: np.ndarray) -> Tuple[Trajectory, np.ndarray]:
        states = np.empty((self.horizon, self.n_x))
        inputs = np.empty((self.horizon, self.n_u))
        slacks = np.empty((self.horizon, self.n_slack))
        for k in range(self.horizon):
            states[k] = z[self.x_slice(k)]
            inputs[k] = z[self.u_slice(k)]
            slacks[k] = z[self.s_slice(k)]
        return Trajectory(states=states, inputs=inputs), slacks


class SubproblemBuilder:
    """Caches the iterate-independent parts of the convexified subproblem.

    The quadratic cost, the initial-state/dynamics/affine rows, and the slack
    nonnegativity rows never change across solver iterations; only the
    linearized-constraint entries, the linear cost, and the offsets do.
    """

    def __init__(self, problem: TrajectoryProblem, gamma_penalty: float, rho: float):
        if gamma_penalty <= 0:
            raise ValueError("gamma_penalty must be positive")
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.problem = problem
        self.gamma_penalty = gamma_penalty
        self.rho = rho
        N = problem.horizon
        self.layout = SubproblemLayout(
            horizon=N, n_x=problem.n_x, n_u=problem.n_u, n_slack=problem.n_nonconvex
        )
        self._build_cost()
        self._build_constant_rows()
        self._build_linearized_pattern()

    def _build_cost(self):
        lay = self.layout
        pr = self.problem
        x_block = 2.0 * pr.C.T @ pr.Q @ pr.C + (1.0 / self.rho) * np.eye(pr.n_x)
        u_block = 2.0 * pr.R + (1.0 / self.rho) * np.eye(pr.n_u)
        step = sp.block_diag(
            [sp.csc_matrix(x_block), sp.csc_matrix(u_block),
             sp.csc_matrix((lay.n_slack, lay.n_slack))]
        )
        self._P = sp.block_diag([step] * lay.horizon).tocsc()
        # Linear cost: constant tracking part plus gamma on the slacks; the
        # prox part -x_prev/rho is filled in per iterate.
        self._q_const = np.zeros(lay.n_z)
        track = -2.0 * pr.C.T @ pr.Q @ pr.reference.T   # (n_x, N)
        for k in range(lay.horizon):
            self._q_const[lay.x_slice(k)] = track[:, k]
            if lay.n_slack:
                self._q_const[lay.s_slice(k)] = self.gamma_penalty
        self._obj_const_track = float(
            np.einsum("ki,ij,kj->", pr.reference, pr.Q, pr.reference)
        )

    def _build_constant_rows(self):
        lay = self.layout
        pr = self.problem
        N = lay.horizon
        rows = []
        lowers = []
        uppers = []

        init = sp.lil_matrix((pr.n_x, lay.n_z))
        init[:, lay.x_slice(0)] = np.eye(pr.n_x)
        rows.append(init)
        lowers.append(pr.initial_state)
        uppers.append(pr.initial_state)

        if N > 1:
            dyn = sp.lil_matrix(((N - 1) * pr.n_x, lay.n_z))
            for k in range(N - 1):
                r = slice(k * pr.n_x, (k + 1) * pr.n_x)
                dyn[r, lay.x_slice(k)] = pr.A
                dyn[r, lay.u_slice(k)] = pr.B
                dyn[r, lay.x_slice(k + 1)] = -np.eye(pr.n_x)
            rows.append(dyn)
            lowers.append(np.zeros((N - 1) * pr.n_x))
            uppers.append(np.zeros((N - 1) * pr.n_x))

        n_c = pr.n_affine
        if n_c:
            aff = sp.lil_matrix((N * n_c, lay.n_z))
            for k in range(N):
                r = slice(k * n_c, (k + 1) * n_c)
                aff[r, lay.x_slice(k)] = pr.affine.G_x
                aff[r, lay.u_slice(k)] = pr.affine.G_u
            rows.append(aff)
            lowers.append(np.full(N * n_c, -np.inf))
            uppers.append(np.tile(pr.affine.h, N))

        self._top = sp.vstack([r.tocsc() for r in rows]).tocsc()
        self._top_lower = np.concatenate(lowers)
        self._top_upper = np.concatenate(uppers)

        if lay.n_slack:
            nonneg = sp.lil_matrix((N * lay.n_slack, lay.n_z))
            for k in range(N):
                r = slice(k * lay.n_slack, (k + 1) * lay.n_slack)
                nonneg[r, lay.s_slice(k)] = np.eye(lay.n_slack)
            self._slack_rows = nonneg.tocsc()
        else:
            self._slack_rows = sp.csc_matrix((0, lay.n_z))

    def _build_linearized_pattern(self):
        lay = self.layout
        N, n_s = lay.horizon, lay.n_slack
        if n_s == 0:
            self._lin_rows = np.zeros(0, dtype=int)
            self._lin_cols = np.zeros(0, dtype=int)
            return
        row_ids = []
        col_ids = []
        for k in range(N):
            base = k * n_s
            for c in range(n_s):
                row = base + c
                for j in range(lay.n_x):
                    row_ids.append(row)
                    col_ids.append(lay.x_slice(k).start + j)
                for j in range(lay.n_u):
                    row_ids.append(row)
                    col_ids.append(lay.u_slice(k).start + j)
                row_ids.append(row)
                col_ids.append(lay.s_slice(k).start + c)
        self._lin_rows = np.array(row_ids, dtype=int)
        self._lin_cols = np.array(col_ids, dtype=int)

    def build(self, iterate: Trajectory, lin: Linearization) -> QPInstance:
        lay = self.layout
        pr = self.problem
        N, n_s = lay.horizon, lay.n_slack
        expected = (N, n_s, pr.n_x)
        if lin.H.shape != expected:
            raise ValueError(f"linearization H has shape {lin.H.shape}, expected {expected}")
        if lin.L.shape != (N, n_s, pr.n_u) or lin.d.shape != (N, n_s):
            raise ValueError("linearization L/d dimensions are inconsistent")
        pr.check_trajectory(iterate)

        q = self._q_const.copy()
        for k in range(N):
            q[lay.x_slice(k)] -= iterate.states[k] / self.rho
            q[lay.u_slice(k)] -= iterate.inputs[k] / self.rho
        obj_const = self._obj_const_track + 0.5 / self.rho * float(
            (iterate.states**2).sum() + (iterate.inputs**2).sum()
        )

        if n_s:
            per_row = np.concatenate(
                [lin.H, lin.L, -np.ones((N, n_s, 1))], axis=2
            ).ravel()
            lin_block = sp.coo_matrix(
                (per_row, (self._lin_rows, self._lin_cols)), shape=(N * n_s, lay.n_z)
            ).tocsc()
            M = sp.vstack([self._top, lin_block, self._slack_rows]).tocsc()
            lower = np.concatenate(
                [self._top_lower, np.full(N * n_s, -np.inf), np.zeros(N * n_s)]
            )
            upper = np.concatenate(
                [self._top_upper, -lin.d.ravel(), np.full(N * n_s, np.inf)]
            )
        else:
            M = self._top
            lower = self._top_lower
            upper = self._top_upper

        return QPInstance(P=self._P, q=q, M=M, lower=lower, upper=upper, obj_const=obj_const)


def assemble_subproblem(
    problem: TrajectoryProblem,
    iterate: Trajectory,
    lin: Linearization,
    gamma_penalty: float,
    rho: float,
) -> Tuple[QPInstance, SubproblemLayout]:
    """One-shot assembly of the convexified subproblem at the given iterate."""
    builder = SubproblemBuilder(problem, gamma_penalty, rho)
    return builder.build(iterate, lin), builder.layout
