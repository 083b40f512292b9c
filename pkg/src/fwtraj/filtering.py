"""Sampling near-optimal trajectories by filtering a virtual stochastic system.

The trajectory problem is recast as state estimation: the augmented state
[x; u] evolves linearly with the input acting as process noise, and the
"measurements" are the tracking output stacked with softplus-smoothed
constraint values. Targets are the reference stacked with a negative offset,
so likely particles are ones that track well while keeping constraints
comfortably negative. A sigma-point transform propagates moments through the
nonlinear output map; multinomial resampling keeps the ensemble alive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .problem import EllipseAvoidance, PairwiseSeparation, Trajectory, TrajectoryProblem

# Jitter added to the innovation covariance before inversion; softplus
# saturation can make the constraint block numerically rank deficient.
INNOVATION_REGULARIZATION = 1e-9

DEFAULT_CONSTRAINT_OFFSET = 10.0
DEFAULT_UT_SPREAD = 0.1


class FilterNumericsError(RuntimeError):
    """Raised when the filter recursion breaks down numerically."""


def softplus(z):
    """Numerically stable ln(1 + exp(z)); elementwise on arrays."""
    z = np.asarray(z, dtype=float)
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return out if out.ndim else float(out)


def matrix_sqrt_psd(mat: np.ndarray, sym_tol: float = 1e-9) -> np.ndarray:
    """Symmetric square root S with S S^T = mat; negative eigenvalues clamp to 0."""
    mat = np.asarray(mat, dtype=float)
    scale = max(1.0, float(np.abs(mat).max())) if mat.size else 1.0
    if np.abs(mat - mat.T).max(initial=0.0) > sym_tol * scale:
        raise ValueError("matrix_sqrt_psd requires a symmetric matrix")
    eigvals, eigvecs = np.linalg.eigh((mat + mat.T) / 2.0)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


@dataclass(frozen=True)
class UTResult:
    mean: np.ndarray        # (l,)
    cov: np.ndarray         # (l, l), includes the additive output covariance
    cross_cov: np.ndarray   # (n, l)


def unscented_transform(
    x: np.ndarray,
    A1: np.ndarray,
    A2: np.ndarray,
    phi: Callable[[np.ndarray], np.ndarray],
    theta: float = DEFAULT_UT_SPREAD,
) -> UTResult:
    """Sigma-point estimate of mean/covariance of phi applied to N(x, A1).

    phi receives the full (n, 2n+1) sigma-point matrix and must return the
    transformed (l, 2n+1) matrix; A2 is added to the output covariance.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 1:
        raise ValueError("mean must have at least one entry")
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    lam = (theta**2 - 1.0) * n
    scale = n + lam   # = n * theta^2 > 0
    root = np.sqrt(scale) * matrix_sqrt_psd(A1)
    sigma = np.empty((n, 2 * n + 1))
    sigma[:, 0] = x
    sigma[:, 1 : n + 1] = x[:, None] + root
    sigma[:, n + 1 :] = x[:, None] - root

    mean_w = np.full(2 * n + 1, 1.0 / (2.0 * scale))
    mean_w[0] = lam / scale
    cov_w = mean_w.copy()
    cov_w[0] = (lam + scale * (3.0 - theta**2)) / scale

    transformed = np.asarray(phi(sigma), dtype=float)
    if transformed.ndim == 1:
        transformed = transformed[None, :]
    y = transformed @ mean_w
    dev_y = transformed - y[:, None]
    dev_x = sigma - x[:, None]
    cov = (dev_y * cov_w) @ dev_y.T + np.asarray(A2, dtype=float)
    cross = (dev_x * cov_w) @ dev_y.T
    return UTResult(mean=y, cov=cov, cross_cov=cross)


@dataclass(frozen=True)
class VirtualSystem:
    """Augmented linear system whose estimation problem encodes the trajectory problem."""

    transition: np.ndarray        # (n_x+n_u, n_x+n_u), [[A, B], [0, 0]]
    output_map: Callable          # (n, cols) -> (n_y+n_g, cols)
    process_cov: np.ndarray       # blkdiag(0, R^-1)
    measurement_cov: np.ndarray   # blkdiag(Q^-1, I)
    targets: np.ndarray           # (N, n_y+n_g), rows [reference_k; -offset]
    constraint_offset: float
    n_x: int
    n_u: int
    n_y: int
    n_g: int

    @property
    def state_dim(self) -> int:
        return self.n_x + self.n_u

    @property
    def output_dim(self) -> int:
        return self.n_y + self.n_g

    @property
    def horizon(self) -> int:
        return self.targets.shape[0]


def _constraint_stack(problem: TrajectoryProblem) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Columnwise evaluation of [g_affine; g_nonconvex] for a batch of (x, u)."""
    aff = problem.affine

    def stack(x_cols: np.ndarray, u_cols: np.ndarray) -> np.ndarray:
        blocks = []
        if aff.n_rows:
            blocks.append(aff.G_x @ x_cols + aff.G_u @ u_cols - aff.h[:, None])
        for con in problem.nonconvex:
            if isinstance(con, EllipseAvoidance):
                rot = np.array(
                    [[np.cos(con.angle), -np.sin(con.angle)],
                     [np.sin(con.angle), np.cos(con.angle)]]
                )
                w_mat = rot @ np.diag(con.axis_weights) @ rot.T
                offset = con.selector @ x_cols - con.center[:, None]
                blocks.append(1.0 - np.einsum("ic,ij,jc->c", offset, w_mat, offset)[None, :])
            elif isinstance(con, PairwiseSeparation):
                gap = (con.selector_i - con.selector_j) @ x_cols
                blocks.append(con.min_distance**2 - np.sum(gap * gap, axis=0)[None, :])
            else:
                vals = np.array(
                    [con.value(x_cols[:, c], u_cols[:, c]) for c in range(x_cols.shape[1])]
                )
                blocks.append(vals[None, :])
        if not blocks:
            return np.zeros((0, x_cols.shape[1]))
        return np.vstack(blocks)

    return stack


def build_virtual_system(
    problem: TrajectoryProblem, nu: float = DEFAULT_CONSTRAINT_OFFSET
) -> VirtualSystem:
    """Assemble the augmented transition, noise covariances, output map, and targets."""
    if nu <= 0:
        raise ValueError("nu must be positive")
    n_x, n_u, n_y = problem.n_x, problem.n_u, problem.n_y
    n_g = problem.n_affine + problem.n_nonconvex
    dim = n_x + n_u

    transition = np.zeros((dim, dim))
    transition[:n_x, :n_x] = problem.A
    transition[:n_x, n_x:] = problem.B

    process_cov = np.zeros((dim, dim))
    process_cov[n_x:, n_x:] = np.linalg.inv(problem.R)

    measurement_cov = np.zeros((n_y + n_g, n_y + n_g))
    measurement_cov[:n_y, :n_y] = np.linalg.inv(problem.Q)
    measurement_cov[n_y:, n_y:] = np.eye(n_g)

    targets = np.hstack(
        [problem.reference, np.full((problem.horizon, n_g), -nu)]
    )

    constraints = _constraint_stack(problem)
    C = problem.C

    def output_map(xi_cols: np.ndarray) -> np.ndarray:
        xi_cols = np.atleast_2d(xi_cols)
        if xi_cols.shape[0] != dim:
            xi_cols = xi_cols.reshape(dim, -1)
        x_cols, u_cols = xi_cols[:n_x], xi_cols[n_x:]
        top = C @ x_cols
        if n_g == 0:
            return top
        return np.vstack([top, softplus(constraints(x_cols, u_cols))])

    return VirtualSystem(
        transition=transition,
        output_map=output_map,
        process_cov=process_cov,
        measurement_cov=measurement_cov,
        targets=targets,
        constraint_offset=nu,
        n_x=n_x,
        n_u=n_u,
        n_y=n_y,
        n_g=n_g,
    )


@dataclass(frozen=True)
class FilterConfig:
    """Particle filter parameters; initial_state is the augmented [x; u] prior mean."""

    num_particles: int
    resample_threshold: float        # effective-sample-size factor, in (1, m)
    sampling_noise: float            # innovation noise variance scale, in (0, 1)
    initial_state: np.ndarray        # (n_x + n_u,)
    initial_covariance: np.ndarray   # (n_x + n_u, n_x + n_u), PSD
    seed: int = 0
    ut_spread: float = DEFAULT_UT_SPREAD

    def __post_init__(self):
        object.__setattr__(
            self, "initial_state", np.asarray(self.initial_state, dtype=float).ravel()
        )
        object.__setattr__(
            self, "initial_covariance", np.asarray(self.initial_covariance, dtype=float)
        )
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        if self.num_particles > 1 and not 1.0 < self.resample_threshold < self.num_particles:
            raise ValueError("resample_threshold must lie in (1, num_particles)")
        if not 0.0 < self.sampling_noise < 1.0:
            raise ValueError("sampling_noise must lie in (0, 1)")


@dataclass(frozen=True)
class ParticleEnsemble:
    """Sampled augmented trajectories with per-step normalized weights."""

    trajectories: np.ndarray   # (m, N, n_x+n_u)
    weights: np.ndarray        # (m, N), each column sums to 1
    covariances: np.ndarray    # (m, n, n), final per-particle covariance
    seed: int
    state_dim: int             # n_x, for splitting back into (x, u)

    def __post_init__(self):
        sums = self.weights.sum(axis=0)
        if np.abs(sums - 1.0).max(initial=0.0) > 1e-9:
            raise ValueError("weights must be normalized per step")

    @property
    def num_particles(self) -> int:
        return self.trajectories.shape[0]

    @property
    def horizon(self) -> int:
        return self.trajectories.shape[1]


def _stream(seed: int, step: int, particle: int, tag: int) -> np.random.Generator:
    # Counter-based streams keyed on (seed, step, particle, purpose) so a
    # parallel particle loop would reproduce the sequential results.
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(step, particle, tag))
    return np.random.Generator(np.random.Philox(seq))


def multinomial_ancestors(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF multinomial selection: one ancestor index per uniform draw."""
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, uniforms, side="left")
    return np.minimum(idx, weights.size - 1).astype(int)


def particle_filter(system: VirtualSystem, config: FilterConfig) -> ParticleEnsemble:
    """Run the constraint-aware filter, returning m weighted trajectory samples.

    Each step propagates every particle through the linear transition, corrects
    toward the next target using sigma-point moments of the output map, adds
    exploration noise scaled by sampling_noise, and reweights by the Gaussian
    innovation likelihood. When the effective sample size degenerates
    (resample_threshold * sum of squared weights >= 1), full particle histories
    are resampled multinomially and weights reset to uniform.
    """
    m = config.num_particles
    n = system.state_dim
    N = system.horizon
    if config.initial_state.shape != (n,):
        raise ValueError(f"initial_state must have shape ({n},)")
    if config.initial_covariance.shape != (n, n):
        raise ValueError(f"initial_covariance must have shape ({n}, {n})")

    transition = system.transition
    process_cov = system.process_cov
    meas_cov = system.measurement_cov

    histories = np.tile(config.initial_state, (m, 1, 1))          # (m, 1, n), grows per step
    histories = np.concatenate(
        [histories, np.zeros((m, N, n))], axis=1
    )                                                              # (m, N+1, n)
    covariances = np.tile(config.initial_covariance, (m, 1, 1))
    weights = np.full(m, 1.0 / m)
    weight_history = np.full((m, N + 1), 1.0 / m)

    reg = INNOVATION_REGULARIZATION * np.eye(system.output_dim)

    for k in range(N):
        target = system.targets[k]
        log_unnorm = np.empty(m)
        with np.errstate(divide="ignore"):
            log_weights = np.log(weights)
        for i in range(m):
            predicted_cov = transition @ covariances[i] @ transition.T + process_cov
            predicted_cov = (predicted_cov + predicted_cov.T) / 2.0
            predicted_mean = transition @ histories[i, k]
            ut = unscented_transform(
                predicted_mean, predicted_cov, meas_cov, system.output_map, config.ut_spread
            )
            innov_cov = (ut.cov + ut.cov.T) / 2.0 + reg
            try:
                chol = cho_factor(innov_cov, lower=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise FilterNumericsError(
                    f"singular innovation covariance at step {k + 1}, particle {i}"
                ) from exc
            gain = cho_solve(chol, ut.cross_cov.T).T          # V U^-1
            posterior_cov = predicted_cov - gain @ ut.cross_cov.T
            posterior_cov = (posterior_cov + posterior_cov.T) / 2.0
            covariances[i] = posterior_cov

            innovation = target - ut.mean
            noise = _stream(config.seed, k, i, 0).standard_normal(n)
            histories[i, k + 1] = (
                predicted_mean
                + gain @ innovation
                + matrix_sqrt_psd(posterior_cov) @ (np.sqrt(config.sampling_noise) * noise)
            )

            logdet = 2.0 * np.log(np.diag(chol[0])).sum()
            quad = innovation @ cho_solve(chol, innovation)
            log_unnorm[i] = log_weights[i] - 0.5 * logdet - 0.5 * quad

        peak = log_unnorm.max()
        if not np.isfinite(peak):
            raise FilterNumericsError(
                f"all particle weights underflowed at step {k + 1}; "
                "consider scaling up the tracking/measurement precision"
            )
        unnorm = np.exp(log_unnorm - peak)
        weights = unnorm / unnorm.sum()
        weight_history[:, k + 1] = weights

        if config.resample_threshold * float(weights @ weights) >= 1.0:
            draws = np.array([_stream(config.seed, k, i, 1).uniform() for i in range(m)])
            ancestors = multinomial_ancestors(weights, draws)
            histories[:, : k + 2] = histories[ancestors, : k + 2]
            covariances = covariances[ancestors]
            weights = np.full(m, 1.0 / m)
            weight_history[:, k + 1] = weights

    return ParticleEnsemble(
        trajectories=histories[:, 1:],
        weights=weight_history[:, 1:],
        covariances=covariances,
        seed=config.seed,
        state_dim=system.n_x,
    )


def ensemble_to_trajectories(ensemble: ParticleEnsemble) -> List[Trajectory]:
    """Split each augmented sample [x; u] into a Trajectory."""
    n_x = ensemble.state_dim
    return [
        Trajectory(states=sample[:, :n_x], inputs=sample[:, n_x:])
        for sample in ensemble.trajectories
    ]
