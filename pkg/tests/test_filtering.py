import numpy as np
import pytest
from hypothesis import given, strategies as st

from fwtraj.filtering import (
    INNOVATION_REGULARIZATION,
    FilterConfig,
    FilterNumericsError,
    build_virtual_system,
    ensemble_to_trajectories,
    matrix_sqrt_psd,
    multinomial_ancestors,
    particle_filter,
    softplus,
    unscented_transform,
)
from fwtraj.problem import TrajectoryProblem

from oracles import kalman_sequence


def test_softplus_at_zero():
    assert softplus(0.0) == pytest.approx(np.log(2.0), abs=1e-12)


def test_softplus_large_positive_is_identity():
    assert softplus(1000.0) == 1000.0


def test_softplus_large_negative_underflows_to_zero():
    # gradual underflow of exp(-1000) to 0 is the intended graceful path
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        value = softplus(-1000.0)
    assert 0.0 <= value < 1e-300


@given(st.floats(min_value=-50, max_value=50), st.floats(min_value=1e-6, max_value=10))
def test_softplus_positive_and_monotone(z, dz):
    assert softplus(z) > 0.0
    assert softplus(z + dz) > softplus(z)


def test_matrix_sqrt_identity():
    assert np.array_equal(matrix_sqrt_psd(np.eye(3)), np.eye(3))


def test_matrix_sqrt_diagonal():
    assert np.allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


@given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(min_value=1, max_value=6))
def test_matrix_sqrt_reconstructs_random_psd(seed, n):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    A = G @ G.T
    S = matrix_sqrt_psd(A)
    err = np.linalg.norm(S @ S.T - A) / (1.0 + np.linalg.norm(A))
    assert err <= 1e-8


def test_matrix_sqrt_rejects_asymmetric():
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_matrix_sqrt_clamps_negative_eigenvalues():
    A = np.diag([1.0, -1e-12])
    S = matrix_sqrt_psd(A)
    assert np.all(np.isfinite(S))
    assert S[1, 1] == 0.0


@pytest.mark.parametrize("n", range(1, 9))
def test_ut_exact_for_identity_map(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    G1 = rng.standard_normal((n, n))
    G2 = rng.standard_normal((n, n))
    A1 = G1 @ G1.T + 0.1 * np.eye(n)
    A2 = G2 @ G2.T
    result = unscented_transform(x, A1, A2, lambda X: X, theta=0.1)
    assert np.abs(result.mean - x).max() <= 1e-10
    assert np.abs(result.cov - (A1 + A2)).max() <= 1e-10
    assert np.abs(result.cross_cov - A1).max() <= 1e-10


def test_ut_sigma_point_spread_n4():
    # theta=0.1, n=4: scale n+lambda = n*theta^2 = 0.04, so the sigma points
    # sit at x +/- sqrt(0.04) * sqrt(A1) columns
    captured = {}

    def phi(X):
        captured["X"] = X.copy()
        return X

    x = np.zeros(4)
    unscented_transform(x, np.eye(4), np.zeros((4, 4)), phi, theta=0.1)
    X = captured["X"]
    assert X.shape == (4, 9)
    assert np.allclose(X[:, 0], x)
    assert X[0, 1] == pytest.approx(np.sqrt(0.04), abs=1e-14)
    assert X[0, 5] == pytest.approx(-np.sqrt(0.04), abs=1e-14)


def test_ut_softplus_mean_close_to_monte_carlo():
    # Frozen Monte-Carlo moment oracle: mean of softplus(z), z ~ N(mu, A1),
    # computed once with 10^6 samples (default_rng(12345)):
    #   mu = [0.3, -0.5], A1 = [[0.8, 0.2], [0.2, 0.5]]
    mc_mean = np.array([0.94509018, 0.5304776])
    x = np.array([0.3, -0.5])
    A1 = np.array([[0.8, 0.2], [0.2, 0.5]])
    result = unscented_transform(x, A1, np.zeros((2, 2)), softplus, theta=0.1)
    assert np.abs(result.mean / mc_mean - 1.0).max() <= 0.05


def unconstrained_problem(n_x=2, n_u=2, n_y=2, N=12, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    A = 0.8 * np.eye(n_x) + 0.1 * rng.standard_normal((n_x, n_x))
    B = rng.standard_normal((n_x, n_u))
    C = rng.standard_normal((n_y, n_x))
    return TrajectoryProblem(
        A=A, B=B, C=C, Q=scale * np.eye(n_y), R=scale * np.eye(n_u),
        initial_state=rng.standard_normal(n_x),
        reference=rng.standard_normal((N, n_y)),
    )


def test_virtual_system_blocks(two_agent_problem):
    problem = two_agent_problem
    system = build_virtual_system(problem, nu=10.0)
    n_x, n_u = problem.n_x, problem.n_u
    assert np.array_equal(system.transition[:n_x, :n_x], problem.A)
    assert np.array_equal(system.transition[:n_x, n_x:], problem.B)
    assert np.all(system.transition[n_x:] == 0.0)
    # process covariance: exact zero state block, R^-1 input block
    assert np.all(system.process_cov[:n_x, :n_x] == 0.0)
    r_inv = system.process_cov[n_x:, n_x:]
    assert np.abs(r_inv - np.linalg.inv(problem.R)).max() <= 1e-10
    q_inv = system.measurement_cov[: problem.n_y, : problem.n_y]
    assert np.abs(q_inv - np.linalg.inv(problem.Q)).max() <= 1e-10
    # targets: reference on top, -nu fill below
    assert np.array_equal(system.targets[:, : problem.n_y], problem.reference)
    assert np.all(system.targets[:, problem.n_y :] == -10.0)


def test_virtual_system_output_top_block_is_linear(two_agent_problem):
    system = build_virtual_system(two_agent_problem, nu=10.0)
    problem = two_agent_problem
    rng = np.random.default_rng(2)
    xi = rng.standard_normal((system.state_dim, 20))
    out = system.output_map(xi)
    expected_top = problem.C @ xi[: problem.n_x]
    assert np.array_equal(out[: problem.n_y], expected_top)
    assert np.all(out[problem.n_y :] > 0.0)   # softplus block is strictly positive


def filter_config(problem, system, scale, seed=0, m=1, noise=1e-12, kappa=2.0):
    return FilterConfig(
        num_particles=m,
        resample_threshold=kappa,
        sampling_noise=noise,
        initial_state=np.concatenate([problem.initial_state, np.zeros(problem.n_u)]),
        initial_covariance=scale * np.eye(problem.n_x + problem.n_u),
        seed=seed,
    )


def test_single_particle_matches_kalman_oracle():
    # n_g = 0 makes the output map linear, so the filter recursion must agree
    # with a standalone Kalman filter; tiny covariances keep the injected
    # exploration noise below the comparison tolerance.
    scale = 1e-9
    problem = unconstrained_problem(n_x=2, n_u=2, N=20, seed=4, scale=1e9)
    system = build_virtual_system(problem, nu=10.0)
    config = filter_config(problem, system, scale, seed=9)
    ensemble = particle_filter(system, config)

    n_x, n_u = problem.n_x, problem.n_u
    H = np.hstack([problem.C, np.zeros((problem.n_y, n_u))])
    reference = kalman_sequence(
        system.transition, H, system.process_cov, system.measurement_cov,
        system.targets, config.initial_state, config.initial_covariance,
        reg=INNOVATION_REGULARIZATION,
    )
    assert np.abs(ensemble.trajectories[0] - reference).max() <= 1e-8


def test_no_resampling_with_uniform_weights():
    # kappa * m * (1/m)^2 = kappa/m < 1, so the effective-sample-size test
    # never fires; histories must stay distinct continuations.
    problem = unconstrained_problem(N=6, seed=1)
    system = build_virtual_system(problem, nu=10.0)
    m, kappa = 8, 4.0
    assert kappa * m * (1.0 / m) ** 2 < 1.0
    config = filter_config(problem, system, 1.0, seed=3, m=m, noise=0.5, kappa=kappa)
    ensemble = particle_filter(system, config)
    assert len({tuple(t[0]) for t in ensemble.trajectories}) > 1


def test_one_hot_weights_trigger_resampling():
    weights = np.zeros(6)
    weights[2] = 1.0
    draws = np.random.default_rng(0).uniform(size=6)
    ancestors = multinomial_ancestors(weights, draws)
    assert np.all(ancestors == 2)


def test_resampling_selection_frequencies_match_weights():
    weights = np.array([0.1, 0.4, 0.25, 0.25])
    rng = np.random.default_rng(42)
    total = 10_000
    draws = rng.uniform(size=total)
    counts = np.bincount(multinomial_ancestors(weights, draws), minlength=4)
    freq = counts / total
    se = np.sqrt(weights * (1 - weights) / total)
    assert np.all(np.abs(freq - weights) <= 3 * se)


def test_weights_normalized_every_step(two_agent_ensemble):
    sums = two_agent_ensemble.weights.sum(axis=0)
    assert np.abs(sums - 1.0).max() <= 1e-12


def test_covariances_symmetric(two_agent_ensemble):
    cov = two_agent_ensemble.covariances
    assert np.abs(cov - np.transpose(cov, (0, 2, 1))).max() <= 1e-9


def test_filter_deterministic_under_fixed_seed():
    problem = unconstrained_problem(N=5, seed=2)
    system = build_virtual_system(problem, nu=10.0)
    config = filter_config(problem, system, 1.0, seed=11, m=5, noise=0.3, kappa=3.0)
    a = particle_filter(system, config)
    b = particle_filter(system, config)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert np.array_equal(a.weights, b.weights)


def test_ensemble_split_by_dimension():
    problem = unconstrained_problem(n_x=2, n_u=1, N=3, seed=5)
    system = build_virtual_system(problem, nu=1.0)
    config = FilterConfig(
        num_particles=1, resample_threshold=2.0, sampling_noise=0.1,
        initial_state=np.array([1.0, 2.0, 3.0]),
        initial_covariance=np.eye(3), seed=0,
    )
    ensemble = particle_filter(system, config)
    trajs = ensemble_to_trajectories(ensemble)
    assert trajs[0].states.shape == (3, 2)
    assert trajs[0].inputs.shape == (3, 1)
    recombined = np.hstack([trajs[0].states, trajs[0].inputs])
    assert np.array_equal(recombined, ensemble.trajectories[0])


def test_two_agent_ensemble_horizon(two_agent_ensemble):
    trajs = ensemble_to_trajectories(two_agent_ensemble)
    assert all(t.horizon == 30 for t in trajs)
    assert len(trajs) == 30


def test_ut_rejects_bad_spread():
    with pytest.raises(ValueError):
        unscented_transform(np.zeros(2), np.eye(2), np.eye(2), lambda X: X, theta=0.0)
    with pytest.raises(ValueError):
        unscented_transform(np.zeros(2), np.eye(2), np.eye(2), lambda X: X, theta=1.5)


def test_singular_innovation_covariance_raises():
    from fwtraj.filtering import VirtualSystem

    bad = VirtualSystem(
        transition=np.eye(2),
        output_map=lambda X: np.full((1, X.shape[1]), np.nan),
        process_cov=np.eye(2),
        measurement_cov=np.eye(1),
        targets=np.zeros((3, 1)),
        constraint_offset=1.0,
        n_x=1, n_u=1, n_y=1, n_g=0,
    )
    config = FilterConfig(
        num_particles=2, resample_threshold=1.5, sampling_noise=0.1,
        initial_state=np.zeros(2), initial_covariance=np.eye(2),
    )
    with pytest.raises(FilterNumericsError, match="step 1, particle 0"):
        particle_filter(bad, config)


def test_weight_underflow_raises_with_advice():
    from fwtraj.filtering import VirtualSystem

    huge = VirtualSystem(
        transition=np.eye(2),
        output_map=lambda X: X[:1],
        process_cov=np.eye(2),
        measurement_cov=np.eye(1),
        targets=np.full((3, 1), 1e200),   # astronomically far target
        constraint_offset=1.0,
        n_x=1, n_u=1, n_y=1, n_g=0,
    )
    config = FilterConfig(
        num_particles=3, resample_threshold=2.0, sampling_noise=0.1,
        initial_state=np.zeros(2), initial_covariance=np.eye(2),
    )
    with pytest.raises(FilterNumericsError, match="precision"):
        particle_filter(huge, config)


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(num_particles=4, resample_threshold=5.0, sampling_noise=0.1,
                     initial_state=np.zeros(2), initial_covariance=np.eye(2))
    with pytest.raises(ValueError):
        FilterConfig(num_particles=4, resample_threshold=2.0, sampling_noise=1.5,
                     initial_state=np.zeros(2), initial_covariance=np.eye(2))
    # m = 1 accepts any threshold: resampling is an identity operation
    FilterConfig(num_particles=1, resample_threshold=2.0, sampling_noise=0.1,
                 initial_state=np.zeros(2), initial_covariance=np.eye(2))
