import hashlib
import json

import numpy as np
import pytest

from fwtraj import serialize
from fwtraj.cli import main
from fwtraj.multiagent import Scenario
from fwtraj.pipeline import (
    ConfigError,
    PipelineConfig,
    apply_overrides,
    random_warm_start,
    run_montecarlo,
    run_pipeline,
)
from fwtraj.multiagent import build_benchmark


def tiny_scenario():
    """One agent, no obstacles, short horizon: converges in a few iterations."""
    return Scenario(
        num_agents=1,
        time_step=1.0,
        horizon=8,
        starts=np.array([[0.0, 0.0]]),
        goals=np.array([[3.0, 2.0]]),
        obstacles=(),
        v_min=-2.0 * np.ones(2),
        v_max=2.0 * np.ones(2),
        a_min=-1.0 * np.ones(2),
        a_max=1.0 * np.ones(2),
    )


@pytest.fixture()
def tiny_scenario_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(serialize.scenario_to_json(tiny_scenario()))
    return path


def tiny_config(scenario_path, **solver_overrides):
    config = PipelineConfig(scenario_preset=None, scenario_path=str(scenario_path))
    config.filter.num_particles = 6
    config.filter.resample_threshold = 3.0
    config.solver.gamma_penalty = solver_overrides.pop("gamma_penalty", 2.0)
    for key, value in solver_overrides.items():
        setattr(config.solver, key, value)
    return config


def test_pipeline_emits_artifacts_and_manifest(tmp_path, tiny_scenario_file):
    out = tmp_path / "run"
    outcome = run_pipeline(tiny_config(tiny_scenario_file), out_dir=str(out))
    assert outcome.status == "ok"
    expected = {
        "ensemble.json", "dendrogram.csv", "assignment.json",
        "warm_start.json", "final_trajectory.json", "convergence.csv", "manifest.json",
    }
    assert {p.name for p in out.iterdir()} == expected
    manifest = json.loads((out / "manifest.json").read_text())
    for name, digest in manifest["files"].items():
        actual = hashlib.sha256((out / name).read_bytes()).hexdigest()
        assert actual == digest
    # manifest covers every artifact except itself
    assert set(manifest["files"]) == expected - {"manifest.json"}
    assert outcome.final_objective <= outcome.warm_start_merit


def test_pipeline_random_warm_start_skips_filter_stage(tmp_path, tiny_scenario_file):
    config = tiny_config(tiny_scenario_file)
    config.warm_start = "random"
    out = tmp_path / "rand"
    outcome = run_pipeline(config, out_dir=str(out))
    assert outcome.status == "ok"
    names = {p.name for p in out.iterdir()}
    assert "ensemble.json" not in names
    assert "warm_start.json" in names


def test_random_warm_start_respects_bounds_and_dynamics(tiny_scenario_file):
    scenario = serialize.scenario_from_json(tiny_scenario_file.read_text())
    problem = build_benchmark(scenario)
    traj = random_warm_start(problem, scenario, seed=5)
    assert np.all(traj.inputs >= scenario.a_min - 1e-12)
    assert np.all(traj.inputs <= scenario.a_max + 1e-12)
    for k in range(traj.horizon - 1):
        rolled = problem.A @ traj.states[k] + problem.B @ traj.inputs[k]
        assert np.allclose(traj.states[k + 1], rolled)
    assert np.array_equal(traj.states[0], problem.initial_state)


def test_pipeline_rerun_is_byte_identical(tmp_path, tiny_scenario_file):
    config = tiny_config(tiny_scenario_file)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    run_pipeline(config, out_dir=str(out_a))
    run_pipeline(config, out_dir=str(out_b))
    for name in ["warm_start.json", "final_trajectory.json", "ensemble.json",
                 "dendrogram.csv", "assignment.json"]:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    # convergence CSV is identical except for the wall-time column
    def strip_time(path):
        rows = path.read_text().strip().splitlines()
        return [",".join(r.split(",")[:-1]) for r in rows]

    assert strip_time(out_a / "convergence.csv") == strip_time(out_b / "convergence.csv")


def test_pipeline_stage_failure_keeps_partial_artifacts(tmp_path, tiny_scenario_file):
    config = tiny_config(tiny_scenario_file)
    config.warm_start = "file"
    config.warm_start_file = str(tmp_path / "missing.json")
    out = tmp_path / "fail"
    outcome = run_pipeline(config, out_dir=str(out))
    assert outcome.status == "stage_failure"
    assert "warm_start" in outcome.error
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "stage_failure"
    assert "error" in manifest


def test_apply_overrides_roundtrip():
    config = PipelineConfig()
    updated = apply_overrides(
        config,
        ["filter.num_particles=60", "clustering.cut_fraction=0.25",
         "scenario_preset=six-agent", "filter.paper_init=true"],
    )
    assert updated.filter.num_particles == 60
    assert updated.clustering.cut_fraction == 0.25
    assert updated.scenario_preset == "six-agent"
    assert updated.filter.paper_init is True


def test_apply_overrides_rejects_unknown_path():
    with pytest.raises(ConfigError):
        apply_overrides(PipelineConfig(), ["solver.bogus=1"])


def test_config_hash_stable_and_sensitive():
    a = PipelineConfig()
    b = PipelineConfig()
    assert a.config_hash() == b.config_hash()
    b.filter.seed = 2
    assert a.config_hash() != b.config_hash()


def test_montecarlo_single_seed(tmp_path, tiny_scenario_file):
    config = tiny_config(tiny_scenario_file)
    aggregate, series = run_montecarlo(
        config, seeds=[1], out_dir=str(tmp_path / "mc"), threads=1
    )
    rows = aggregate.read_text().strip().splitlines()
    assert rows[0].startswith("seed,method,status")
    assert len(rows) == 1 + 2    # seeds x methods
    # aggregate must match the per-run convergence log
    run_conv = (tmp_path / "mc" / "filter-seed1" / "convergence.csv").read_text()
    last = run_conv.strip().splitlines()[-1].split(",")
    filter_row = next(r for r in rows[1:] if r.split(",")[1] == "filter")
    assert float(filter_row.split(",")[4]) == float(last[1])

    series_rows = series.read_text().strip().splitlines()
    assert series_rows[0].startswith("method,iter")
    for row in series_rows[1:]:
        parts = row.split(",")
        q25, med, q75 = float(parts[3]), float(parts[4]), float(parts[5])
        assert q25 <= med <= q75


def test_cli_generate_is_deterministic(tmp_path):
    out1 = tmp_path / "s1.json"
    out2 = tmp_path / "s2.json"
    assert main(["generate", "--preset", "two-agent", "--out", str(out1)]) == 0
    assert main(["generate", "--preset", "two-agent", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    scenario = serialize.scenario_from_json(out1.read_text())
    assert scenario.num_agents == 2
    assert len(scenario.obstacles) == 3


def test_cli_generate_dt_override(tmp_path):
    out = tmp_path / "s.json"
    assert main(["generate", "--preset", "two-agent", "--dt", "0.5", "--out", str(out)]) == 0
    assert serialize.scenario_from_json(out.read_text()).time_step == 0.5


def test_cli_unknown_preset_exits_2(tmp_path):
    assert main(["generate", "--preset", "nope", "--out", str(tmp_path / "x.json")]) == 2


def test_cli_bad_override_exits_2(tmp_path, tiny_scenario_file):
    code = main([
        "pipeline", "--config", "/nonexistent/config.json", "--out", str(tmp_path / "o"),
    ])
    assert code == 2
    code = main([
        "pipeline", "--set", "bogus.path=1", "--out", str(tmp_path / "o2"),
    ])
    assert code == 2


def test_cli_pipeline_tiny_scenario(tmp_path, tiny_scenario_file):
    out = tmp_path / "run"
    code = main([
        "pipeline",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--set", "filter.num_particles=6",
        "--set", "filter.resample_threshold=3.0",
        "--set", "solver.gamma_penalty=2.0",
        "--seed", "3",
        "--out", str(out),
    ])
    assert code == 0
    assert (out / "final_trajectory.json").exists()


def test_cli_non_convergence_exits_3(tmp_path, tiny_scenario_file):
    out = tmp_path / "short"
    code = main([
        "pipeline",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--set", "filter.num_particles=6",
        "--set", "filter.resample_threshold=3.0",
        "--set", "solver.max_iterations=1",
        "--out", str(out),
    ])
    assert code == 3


def test_cli_montecarlo_subcommand(tmp_path, tiny_scenario_file):
    out = tmp_path / "mc"
    code = main([
        "montecarlo",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--set", "filter.num_particles=6",
        "--set", "filter.resample_threshold=3.0",
        "--set", "solver.gamma_penalty=2.0",
        "--seeds", "1,2",
        "--threads", "1",
        "--out", str(out),
    ])
    assert code == 0
    rows = (out / "montecarlo.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4   # 2 seeds x 2 methods
    assert (out / "montecarlo_series.csv").exists()


def test_cli_pipeline_dump_qp_flag(tmp_path, tiny_scenario_file):
    out = tmp_path / "dump"
    code = main([
        "pipeline",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--set", "filter.num_particles=6",
        "--set", "filter.resample_threshold=3.0",
        "--set", "solver.gamma_penalty=2.0",
        "--dump-qp",
        "--out", str(out),
    ])
    assert code == 0
    dump = (out / "subproblem_qp.txt").read_text()
    assert dump.startswith("n_z ")


def test_cli_seeds_count_form(tmp_path, tiny_scenario_file):
    from fwtraj.cli import _parse_seeds

    assert _parse_seeds("3") == [1, 2, 3]
    assert _parse_seeds("4,7,9") == [4, 7, 9]


def test_cli_filter_then_cluster(tmp_path, tiny_scenario_file):
    fdir = tmp_path / "f"
    code = main([
        "filter",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--set", "filter.num_particles=6",
        "--set", "filter.resample_threshold=3.0",
        "--out", str(fdir),
    ])
    assert code == 0
    assert (fdir / "ensemble.json").exists()
    cdir = tmp_path / "c"
    code = main([
        "cluster",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--ensemble", str(fdir / "ensemble.json"),
        "--out", str(cdir),
    ])
    assert code == 0
    assert (cdir / "dendrogram.csv").exists()
    assert (cdir / "warm_start.json").exists()
    labels = json.loads((cdir / "assignment.json").read_text())
    assert len(labels["labels"]) == 6


def test_cli_solve_from_file(tmp_path, tiny_scenario_file):
    scenario = serialize.scenario_from_json(tiny_scenario_file.read_text())
    problem = build_benchmark(scenario)
    warm = random_warm_start(problem, scenario, seed=2)
    wfile = tmp_path / "warm.json"
    wfile.write_text(serialize.trajectory_to_json(warm))
    out = tmp_path / "solve"
    code = main([
        "solve",
        "--set", f"scenario_path={tiny_scenario_file}",
        "--set", "scenario_preset=null",
        "--set", "solver.gamma_penalty=2.0",
        "--warm-start", "file",
        "--warm-start-file", str(wfile),
        "--out", str(out),
    ])
    assert code == 0
    assert (out / "convergence.csv").exists()


def test_ensemble_json_roundtrip(two_agent_ensemble):
    text = serialize.ensemble_to_json(two_agent_ensemble)
    back = serialize.ensemble_from_json(text)
    assert np.array_equal(back.trajectories, two_agent_ensemble.trajectories)
    assert np.array_equal(back.weights, two_agent_ensemble.weights)
    assert back.seed == two_agent_ensemble.seed
    assert serialize.ensemble_to_json(back) == text


def test_problem_json_roundtrip(two_agent_problem):
    text = serialize.problem_to_json(two_agent_problem)
    back = serialize.problem_from_json(text)
    assert np.array_equal(back.A, two_agent_problem.A)
    assert np.array_equal(back.affine.G_x, two_agent_problem.affine.G_x)
    assert len(back.nonconvex) == len(two_agent_problem.nonconvex)
    assert type(back.nonconvex[0]).__name__ == "EllipseAvoidance"
    assert type(back.nonconvex[-1]).__name__ == "PairwiseSeparation"
    assert serialize.problem_to_json(back) == text


def test_problem_json_rejects_generic_constraint(two_agent_problem):
    from fwtraj.problem import GenericSmooth, TrajectoryProblem

    con = GenericSmooth(
        value_fn=lambda x, u: 0.0,
        grad_fn=lambda x, u: (np.zeros(8), np.zeros(4)),
    )
    pr = two_agent_problem
    modified = TrajectoryProblem(
        A=pr.A, B=pr.B, C=pr.C, Q=pr.Q, R=pr.R,
        initial_state=pr.initial_state, reference=pr.reference,
        affine=pr.affine, nonconvex=(con,),
    )
    with pytest.raises(ValueError, match="no JSON form"):
        serialize.problem_to_json(modified)


def test_trajectory_json_roundtrip():
    rng = np.random.default_rng(0)
    from fwtraj.problem import Trajectory

    traj = Trajectory(states=rng.standard_normal((4, 3)), inputs=rng.standard_normal((4, 2)))
    text = serialize.trajectory_to_json(traj)
    back = serialize.trajectory_from_json(text)
    assert np.array_equal(back.states, traj.states)
    assert serialize.trajectory_to_json(back) == text
