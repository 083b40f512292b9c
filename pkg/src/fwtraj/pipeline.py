"""End-to-end runs: scenario -> filter -> cluster -> warm start -> solver.

A run is described by one JSON-serializable PipelineConfig; artifacts land in
a per-run directory together with a manifest that hashes every emitted file.
Monte-Carlo sweeps dispatch independent seeded runs to a process pool and
aggregate per-seed results plus median/quartile convergence series.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .clustering import (
    agglomerate_group_average,
    cluster_centers,
    cost_weight_matrix,
    cut_dendrogram,
    distance_matrix,
    select_warm_start,
)
from .filtering import FilterConfig, build_virtual_system, particle_filter
from .multiagent import Scenario, build_benchmark, paper_scenario
from .problem import Trajectory, TrajectoryProblem, merit_phi
from .proxlinear import ProxLinearSettings, SolveStatus, prox_linear_solve
from .qp import QPSettings
from . import serialize


class ConfigError(ValueError):
    """Malformed or inconsistent pipeline configuration."""


@dataclass
class FilterStageConfig:
    num_particles: int = 30
    resample_threshold: float = 12.0
    sampling_noise: float = 5e-3
    sigma0: object = "identity"     # "identity" or a diagonal vector
    constraint_offset: float = 10.0
    seed: int = 1
    paper_init: bool = False        # start particles at the origin
    ut_spread: float = 0.1


@dataclass
class ClusterStageConfig:
    cut_fraction: float = 0.5
    merit_alpha: float = 100.0


@dataclass
class SolverStageConfig:
    gamma_penalty: float = 100.0
    tolerance: float = 1e-6
    max_iterations: int = 400
    qp_eps_abs: float = 1e-6
    qp_eps_rel: float = 1e-6
    qp_max_iter: int = 20000
    qp_over_relaxation: float = 1.6


@dataclass
class PipelineConfig:
    scenario_preset: Optional[str] = "two-agent"
    scenario_path: Optional[str] = None
    warm_start: str = "filter"       # "filter", "random", or "file"
    warm_start_file: Optional[str] = None
    filter: FilterStageConfig = field(default_factory=FilterStageConfig)
    clustering: ClusterStageConfig = field(default_factory=ClusterStageConfig)
    solver: SolverStageConfig = field(default_factory=SolverStageConfig)
    output_dir: Optional[str] = None
    threads: Optional[int] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        try:
            for name, sub in (
                ("filter", FilterStageConfig),
                ("clustering", ClusterStageConfig),
                ("solver", SolverStageConfig),
            ):
                if name in payload and isinstance(payload[name], dict):
                    payload[name] = sub(**payload[name])
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def apply_overrides(config: PipelineConfig, overrides: Sequence[str]) -> PipelineConfig:
    """Apply dotted-path overrides like 'filter.num_particles=60'."""
    payload = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = payload
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config path {path!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config path {path!r}")
        node[keys[-1]] = json.loads(raw) if _looks_like_json(raw) else raw
    return PipelineConfig.from_dict(payload)


def _looks_like_json(raw: str) -> bool:
    try:
        json.loads(raw)
        return True
    except json.JSONDecodeError:
        return False


def resolve_scenario(config: PipelineConfig) -> Scenario:
    if config.scenario_path:
        return serialize.scenario_from_json(Path(config.scenario_path).read_text())
    if config.scenario_preset:
        return paper_scenario(config.scenario_preset)
    raise ConfigError("config must give either a scenario preset or a scenario path")


def _resolve_sigma0(spec, dim: int) -> np.ndarray:
    if isinstance(spec, str):
        if spec != "identity":
            raise ConfigError(f"sigma0 must be 'identity' or a diagonal vector, got {spec!r}")
        return np.eye(dim)
    diag = np.asarray(spec, dtype=float).ravel()
    if diag.shape != (dim,):
        raise ConfigError(f"sigma0 diagonal must have length {dim}, got {diag.shape}")
    return np.diag(diag)


def random_warm_start(problem: TrajectoryProblem, scenario: Scenario, seed: int) -> Trajectory:
    """Uniform random inputs within the acceleration box, rolled through the dynamics."""
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))
    )
    N = problem.horizon
    inputs = rng.uniform(scenario.a_min, scenario.a_max, size=(N, problem.n_u))
    states = np.empty((N, problem.n_x))
    states[0] = problem.initial_state
    for k in range(N - 1):
        states[k + 1] = problem.A @ states[k] + problem.B @ inputs[k]
    return Trajectory(states=states, inputs=inputs)


def solver_settings(config: SolverStageConfig) -> ProxLinearSettings:
    return ProxLinearSettings(
        gamma_penalty=config.gamma_penalty,
        tolerance=config.tolerance,
        max_iterations=config.max_iterations,
        qp_settings=QPSettings(
            eps_abs=config.qp_eps_abs,
            eps_rel=config.qp_eps_rel,
            max_iter=config.qp_max_iter,
            over_relaxation=config.qp_over_relaxation,
        ),
    )


@dataclass
class PipelineOutcome:
    status: str
    solver_status: Optional[SolveStatus]
    iterations: int
    final_objective: Optional[float]
    final_violation: Optional[float]
    warm_start_merit: Optional[float]
    num_clusters: Optional[int]
    wall_time_s: float
    out_dir: Optional[str]
    error: Optional[str] = None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(config: PipelineConfig, out_dir: Optional[str] = None) -> PipelineOutcome:
    """Execute the configured stages, writing artifacts and a manifest.

    Stage failures are captured in the outcome (and manifest) rather than
    raised; artifacts produced before the failure are retained.
    """
    t_start = time.perf_counter()
    out = Path(out_dir or config.output_dir or "fwtraj-run")
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    manifest = {
        "package_version": __version__,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.filter.seed,
        "versions": _tool_versions(),
        "files": {},
        "timings_s": timings,
    }
    written: List[Path] = []

    def emit(name: str, text: str) -> Path:
        path = out / name
        path.write_text(text)
        written.append(path)
        return path

    def finish(outcome: PipelineOutcome) -> PipelineOutcome:
        manifest["status"] = outcome.status
        if outcome.error:
            manifest["error"] = outcome.error
        if outcome.solver_status is not None:
            manifest["solver_status"] = outcome.solver_status.value
        for path in written:
            manifest["files"][path.name] = _sha256(path)
        (out / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        return outcome

    def fail(stage: str, exc: Exception) -> PipelineOutcome:
        return finish(
            PipelineOutcome(
                status="stage_failure",
                solver_status=None,
                iterations=0,
                final_objective=None,
                final_violation=None,
                warm_start_merit=None,
                num_clusters=None,
                wall_time_s=time.perf_counter() - t_start,
                out_dir=str(out),
                error=f"{stage}: {exc}",
            )
        )

    try:
        scenario = resolve_scenario(config)
        problem = build_benchmark(scenario)
    except Exception as exc:
        return fail("scenario", exc)

    num_clusters = None
    warm_merit = None
    try:
        t0 = time.perf_counter()
        if config.warm_start == "filter":
            warm, num_clusters = _filter_warm_start(config, problem, emit)
        elif config.warm_start == "random":
            warm = random_warm_start(problem, scenario, config.filter.seed)
        elif config.warm_start == "file":
            if not config.warm_start_file:
                raise ConfigError("warm_start 'file' requires warm_start_file")
            warm = serialize.trajectory_from_json(Path(config.warm_start_file).read_text())
        else:
            raise ConfigError(f"unknown warm_start mode {config.warm_start!r}")
        warm_merit = merit_phi(problem, warm, config.clustering.merit_alpha)
        emit("warm_start.json", serialize.trajectory_to_json(warm))
        timings["warm_start"] = time.perf_counter() - t0
    except Exception as exc:
        return fail("warm_start", exc)

    try:
        t0 = time.perf_counter()
        result = prox_linear_solve(problem, warm, solver_settings(config.solver))
        timings["solver"] = time.perf_counter() - t0
        emit("final_trajectory.json", serialize.trajectory_to_json(result.trajectory))
        emit("convergence.csv", result.log.to_csv())
    except Exception as exc:
        return fail("solver", exc)

    last = result.log.records[-1] if result.log.records else None
    return finish(
        PipelineOutcome(
            status="ok" if result.status is SolveStatus.CONVERGED else "not_converged",
            solver_status=result.status,
            iterations=len(result.log),
            final_objective=last.objective if last else None,
            final_violation=last.violation if last else None,
            warm_start_merit=warm_merit,
            num_clusters=num_clusters,
            wall_time_s=time.perf_counter() - t_start,
            out_dir=str(out),
        )
    )


def sample_ensemble(config: PipelineConfig, problem: TrajectoryProblem):
    """Run just the sampling stage for the configured problem."""
    system = build_virtual_system(problem, config.filter.constraint_offset)
    dim = system.state_dim
    if config.filter.paper_init:
        xi0 = np.zeros(dim)
    else:
        xi0 = np.concatenate([problem.initial_state, np.zeros(problem.n_u)])
    fcfg = FilterConfig(
        num_particles=config.filter.num_particles,
        resample_threshold=config.filter.resample_threshold,
        sampling_noise=config.filter.sampling_noise,
        initial_state=xi0,
        initial_covariance=_resolve_sigma0(config.filter.sigma0, dim),
        seed=config.filter.seed,
        ut_spread=config.filter.ut_spread,
    )
    return particle_filter(system, fcfg)


def _filter_warm_start(config: PipelineConfig, problem: TrajectoryProblem, emit):
    ensemble = sample_ensemble(config, problem)
    emit("ensemble.json", serialize.ensemble_to_json(ensemble))

    weight = cost_weight_matrix(problem)
    dend = agglomerate_group_average(distance_matrix(ensemble.trajectories, weight))
    emit("dendrogram.csv", dend.to_csv())
    assignment = cut_dendrogram(dend, config.clustering.cut_fraction)
    emit("assignment.json", serialize.assignment_to_json(assignment))
    centers = cluster_centers(ensemble, assignment)
    warm, _scores = select_warm_start(problem, centers, config.clustering.merit_alpha)
    return warm, assignment.num_clusters


def _tool_versions() -> dict:
    import numpy
    import scipy

    return {"numpy": numpy.__version__, "scipy": scipy.__version__}


MC_CSV_HEADER = "seed,method,status,iterations,final_objective,final_violation,wall_time_s"
MC_SERIES_HEADER = (
    "method,iter,time_median,objective_q25,objective_median,objective_q75,"
    "violation_q25,violation_median,violation_q75"
)

MC_METHODS = ("filter", "random")


def _run_one_mc(args) -> Tuple[int, str, dict]:
    payload, seed, method, run_dir = args
    config = PipelineConfig.from_dict(payload)
    config.filter.seed = seed
    config.warm_start = method
    outcome = run_pipeline(config, out_dir=run_dir)
    log_rows = []
    conv = Path(run_dir) / "convergence.csv"
    if conv.exists():
        lines = conv.read_text().strip().splitlines()[1:]
        for line in lines:
            parts = line.split(",")
            log_rows.append((float(parts[1]), float(parts[2]), float(parts[5])))
    return (
        seed,
        method,
        {
            "status": outcome.status,
            "solver_status": outcome.solver_status.value if outcome.solver_status else "error",
            "iterations": outcome.iterations,
            "final_objective": outcome.final_objective,
            "final_violation": outcome.final_violation,
            "wall_time_s": outcome.wall_time_s,
            "series": log_rows,
            "error": outcome.error,
        },
    )


def run_montecarlo(
    config: PipelineConfig,
    seeds: Sequence[int],
    out_dir: str,
    methods: Sequence[str] = MC_METHODS,
    threads: Optional[int] = None,
) -> Tuple[Path, Path]:
    """Run every (seed, method) pipeline and write aggregate + series CSVs.

    Individual run failures are recorded in the aggregate and skipped in the
    series statistics; the sweep continues.
    """
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env_threads = os.environ.get("FWTRAJ_THREADS")
    workers = (
        threads or config.threads or (int(env_threads) if env_threads else None)
        or os.cpu_count() or 1
    )
    payload = config.to_dict()
    jobs = [
        (payload, seed, method, str(out / f"{method}-seed{seed}"))
        for method in methods
        for seed in seeds
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_mc, jobs))
    else:
        results = [_run_one_mc(job) for job in jobs]

    rows = []
    series = {method: [] for method in methods}
    for seed, method, info in sorted(results, key=lambda r: (r[1], r[0])):
        obj = info["final_objective"]
        vio = info["final_violation"]
        rows.append(
            f"{seed},{method},{info['solver_status']},{info['iterations']},"
            f"{'' if obj is None else repr(obj)},{'' if vio is None else repr(vio)},"
            f"{info['wall_time_s']!r}"
        )
        if info["series"]:
            series[method].append(info["series"])

    aggregate_path = out / "montecarlo.csv"
    aggregate_path.write_text(MC_CSV_HEADER + "\n" + "\n".join(rows) + "\n")

    series_lines = [MC_SERIES_HEADER]
    for method in methods:
        logs = series[method]
        if not logs:
            continue
        depth = max(len(lg) for lg in logs)
        for it in range(depth):
            objs = np.array([lg[min(it, len(lg) - 1)][0] for lg in logs])
            vios = np.array([lg[min(it, len(lg) - 1)][1] for lg in logs])
            times = np.array([lg[min(it, len(lg) - 1)][2] for lg in logs])
            stats = [
                np.median(times),
                np.quantile(objs, 0.25), np.median(objs), np.quantile(objs, 0.75),
                np.quantile(vios, 0.25), np.median(vios), np.quantile(vios, 0.75),
            ]
            series_lines.append(
                f"{method},{it + 1}," + ",".join(repr(float(s)) for s in stats)
            )
    series_path = out / "montecarlo_series.csv"
    series_path.write_text("\n".join(series_lines) + "\n")
    return aggregate_path, series_path
