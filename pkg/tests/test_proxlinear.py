import numpy as np
import pytest

from fwtraj.problem import Trajectory, evaluate_objective, linearize_nonconvex
from fwtraj.proxlinear import (
    ConvergenceLog,
    IterationRecord,
    ProxLinearSettings,
    SolveStatus,
    prox_linear_solve,
)
from fwtraj.qp import QPSettings, QPStatus, assemble_subproblem, solve_qp

from test_problem import lq_problem


def lq_optimum(problem):
    """One-shot oracle: solve the LQ tracking problem as a single QP (no prox)."""
    traj0 = Trajectory(
        states=np.zeros((problem.horizon, problem.n_x)),
        inputs=np.zeros((problem.horizon, problem.n_u)),
    )
    lin = linearize_nonconvex(problem, traj0)
    # a huge rho makes the proximal term numerically irrelevant
    qp, layout = assemble_subproblem(problem, traj0, lin, gamma_penalty=1.0, rho=1e12)
    sol = solve_qp(qp, QPSettings(eps_abs=1e-10, eps_rel=1e-10))
    assert sol.status is QPStatus.SOLVED
    traj, _ = layout.split(sol.z)
    return traj


def test_unconstrained_converges_in_one_iteration_from_optimum():
    problem = lq_problem(n_x=3, n_u=2, N=6, seed=1)
    star = lq_optimum(problem)
    result = prox_linear_solve(problem, star, ProxLinearSettings(gamma_penalty=100.0))
    assert result.status is SolveStatus.CONVERGED
    assert len(result.log) == 1
    assert result.log.records[0].step_norm <= 1e-6
    assert evaluate_objective(problem, result.trajectory) == pytest.approx(
        evaluate_objective(problem, star), abs=1e-6
    )


def test_already_optimal_warm_start_is_fixed_point():
    problem = lq_problem(n_x=2, n_u=2, N=5, seed=3)
    star = lq_optimum(problem)
    result = prox_linear_solve(problem, star, ProxLinearSettings())
    assert result.status is SolveStatus.CONVERGED
    assert len(result.log) == 1
    assert result.log.records[0].slack_norm <= 1e-6


def test_unconstrained_far_start_reaches_lq_objective():
    problem = lq_problem(n_x=2, n_u=2, N=4, seed=9)
    star = lq_optimum(problem)
    rng = np.random.default_rng(0)
    far = Trajectory(
        states=rng.standard_normal((4, 2)), inputs=rng.standard_normal((4, 2))
    )
    result = prox_linear_solve(
        problem, far, ProxLinearSettings(gamma_penalty=2.0, max_iterations=2000)
    )
    assert result.status is SolveStatus.CONVERGED
    assert evaluate_objective(problem, result.trajectory) == pytest.approx(
        evaluate_objective(problem, star), abs=1e-5
    )


def test_log_has_one_record_per_iteration_and_monotone_time():
    problem = lq_problem(n_x=2, n_u=1, N=4, seed=5)
    rng = np.random.default_rng(2)
    start = Trajectory(states=rng.standard_normal((4, 2)), inputs=rng.standard_normal((4, 1)))
    result = prox_linear_solve(
        problem, start, ProxLinearSettings(gamma_penalty=5.0, max_iterations=50)
    )
    iters = [r.iteration for r in result.log.records]
    assert iters == list(range(1, len(result.log) + 1))
    times = [r.time_s for r in result.log.records]
    assert all(b >= a for a, b in zip(times, times[1:]))


def test_iteration_limit_status():
    problem = lq_problem(n_x=2, n_u=2, N=4, seed=7)
    rng = np.random.default_rng(1)
    far = Trajectory(states=10 * rng.standard_normal((4, 2)),
                     inputs=10 * rng.standard_normal((4, 2)))
    result = prox_linear_solve(
        problem, far, ProxLinearSettings(gamma_penalty=1000.0, max_iterations=3)
    )
    assert result.status is SolveStatus.MAX_ITERATIONS
    assert len(result.log) == 3


def test_numeric_log_deterministic():
    problem = lq_problem(n_x=2, n_u=1, N=5, seed=8)
    rng = np.random.default_rng(4)
    start = Trajectory(states=rng.standard_normal((5, 2)), inputs=rng.standard_normal((5, 1)))
    settings = ProxLinearSettings(gamma_penalty=10.0, max_iterations=20)
    a = prox_linear_solve(problem, start, settings)
    b = prox_linear_solve(problem, start, settings)
    for ra, rb in zip(a.log.records, b.log.records):
        assert (ra.objective, ra.violation, ra.step_norm, ra.slack_norm) == (
            rb.objective, rb.violation, rb.step_norm, rb.slack_norm
        )
    assert np.array_equal(a.trajectory.states, b.trajectory.states)


def test_qp_failure_carries_iteration_and_status():
    problem = lq_problem(n_x=2, n_u=2, N=4, seed=7)
    rng = np.random.default_rng(1)
    far = Trajectory(states=rng.standard_normal((4, 2)), inputs=rng.standard_normal((4, 2)))
    # a one-iteration QP budget cannot reach tolerance, which the outer loop
    # must surface as a failure while still returning the last iterate
    settings = ProxLinearSettings(
        gamma_penalty=5.0,
        qp_settings=QPSettings(max_iter=1, check_interval=1, polish=False),
    )
    result = prox_linear_solve(problem, far, settings)
    assert result.status is SolveStatus.QP_FAILURE
    assert result.failed_iteration == 1
    assert result.qp_status is QPStatus.MAX_ITERATIONS
    assert np.array_equal(result.trajectory.states, far.states)


def test_settings_validation():
    with pytest.raises(ValueError):
        ProxLinearSettings(gamma_penalty=0.5)
    with pytest.raises(ValueError):
        ProxLinearSettings(tolerance=0.0)
    assert ProxLinearSettings(gamma_penalty=50.0).step_size == pytest.approx(0.02)


def test_csv_serialization_roundtrip():
    log = ConvergenceLog()
    log.append(IterationRecord(1, 2.5, 0.125, 1e-3, 0.0, 0.75))
    log.append(IterationRecord(2, 2.0, 0.0, 1e-8, 0.0, 1.5))
    text = log.to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "iter,objective,violation,step_norm,slack_norm,time_s"
    assert lines[1] == "1,2.5,0.125,0.001,0.0,0.75"
    parsed = [float(v) for v in lines[2].split(",")]
    assert parsed == [2.0, 2.0, 0.0, 1e-8, 0.0, 1.5]
