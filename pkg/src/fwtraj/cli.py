"""Command-line front end.

Subcommands: generate, filter, cluster, solve, pipeline, montecarlo.
Exit codes: 0 success, 2 config error, 3 solver non-convergence, 4 stage
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import serialize
from .clustering import (
    agglomerate_group_average,
    cluster_centers,
    cost_weight_matrix,
    cut_dendrogram,
    distance_matrix,
    select_warm_start,
)
from .multiagent import UnknownPresetError, build_benchmark, paper_scenario
from .pipeline import (
    ConfigError,
    PipelineConfig,
    apply_overrides,
    run_montecarlo,
    run_pipeline,
)
from .qp import dump_qp_coordinate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_STAGE_FAILURE = 4


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", help="scenario preset name (two-agent, six-agent)")
    parser.add_argument("--config", help="pipeline config JSON file")
    parser.add_argument("--seed", type=int, help="filter/warm-start seed")
    parser.add_argument("--out", default="fwtraj-out", help="output directory")
    parser.add_argument("--threads", type=int, help="worker count for sweeps")
    parser.add_argument("--cut-fraction", type=float, help="dendrogram cut fraction")
    parser.add_argument(
        "--paper-init", action="store_true",
        help="start filter particles at the origin instead of the initial state",
    )
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="PATH=VALUE", help="dotted-path config override, e.g. filter.num_particles=60",
    )


def _load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        payload = json.loads(Path(args.config).read_text())
        config = PipelineConfig.from_dict(payload)
    else:
        config = PipelineConfig()
    if getattr(args, "preset", None):
        config.scenario_preset = args.preset
        config.scenario_path = None
    if getattr(args, "seed", None) is not None:
        config.filter.seed = args.seed
    if getattr(args, "cut_fraction", None) is not None:
        config.clustering.cut_fraction = args.cut_fraction
    if getattr(args, "paper_init", False):
        config.filter.paper_init = True
    if getattr(args, "threads", None) is not None:
        config.threads = args.threads
    if getattr(args, "warm_start", None):
        config.warm_start = args.warm_start
        if args.warm_start == "file":
            if not getattr(args, "warm_start_file", None):
                raise ConfigError("--warm-start file requires --warm-start-file")
    if getattr(args, "warm_start_file", None):
        config.warm_start_file = args.warm_start_file
    if getattr(args, "overrides", None):
        config = apply_overrides(config, args.overrides)
    return config


def cmd_generate(args) -> int:
    scenario = paper_scenario(args.preset or "two-agent")
    if args.dt is not None or args.horizon is not None:
        from .multiagent import Scenario

        fields = {
            "num_agents": scenario.num_agents,
            "time_step": args.dt if args.dt is not None else scenario.time_step,
            "horizon": args.horizon if args.horizon is not None else scenario.horizon,
            "starts": scenario.starts,
            "goals": scenario.goals,
            "obstacles": scenario.obstacles,
            "v_min": scenario.v_min,
            "v_max": scenario.v_max,
            "a_min": scenario.a_min,
            "a_max": scenario.a_max,
            "min_separation": scenario.min_separation,
            "Q": scenario.Q,
            "R": scenario.R,
        }
        scenario = Scenario(**fields)
    text = serialize.scenario_to_json(scenario)
    out = Path(args.out)
    if out.is_dir():
        out = out / "scenario.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(out)
    return EXIT_OK


def cmd_filter(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pipeline import resolve_scenario, sample_ensemble

    scenario = resolve_scenario(config)
    problem = build_benchmark(scenario)
    ensemble = sample_ensemble(config, problem)
    path = out / "ensemble.json"
    path.write_text(serialize.ensemble_to_json(ensemble))
    print(path)
    return EXIT_OK


def cmd_cluster(args) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .pipeline import resolve_scenario

    scenario = resolve_scenario(config)
    problem = build_benchmark(scenario)
    ensemble = serialize.ensemble_from_json(Path(args.ensemble).read_text())
    weight = cost_weight_matrix(problem)
    dend = agglomerate_group_average(distance_matrix(ensemble.trajectories, weight))
    (out / "dendrogram.csv").write_text(dend.to_csv())
    assignment = cut_dendrogram(dend, config.clustering.cut_fraction)
    (out / "assignment.json").write_text(serialize.assignment_to_json(assignment))
    centers = cluster_centers(ensemble, assignment)
    warm, scores = select_warm_start(problem, centers, config.clustering.merit_alpha)
    (out / "warm_start.json").write_text(serialize.trajectory_to_json(warm))
    print(f"{assignment.num_clusters} clusters; scores: {[float(s) for s in scores]}")
    return EXIT_OK


def cmd_solve(args) -> int:
    config = _load_config(args)
    if config.warm_start == "filter" and args.warm_start is None:
        config.warm_start = "random"
    outcome = run_pipeline(config, out_dir=args.out)
    return _report(outcome)


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    if args.dump_qp:
        _dump_first_qp(config, Path(args.out))
    outcome = run_pipeline(config, out_dir=args.out)
    return _report(outcome)


def _dump_first_qp(config: PipelineConfig, out: Path) -> None:
    from .pipeline import resolve_scenario, random_warm_start, solver_settings
    from .problem import linearize_nonconvex
    from .qp import SubproblemBuilder

    scenario = resolve_scenario(config)
    problem = build_benchmark(scenario)
    warm = random_warm_start(problem, scenario, config.filter.seed)
    settings = solver_settings(config.solver)
    builder = SubproblemBuilder(problem, settings.gamma_penalty, settings.step_size)
    qp = builder.build(warm, linearize_nonconvex(problem, warm))
    out.mkdir(parents=True, exist_ok=True)
    (out / "subproblem_qp.txt").write_text(dump_qp_coordinate(qp))


def _report(outcome) -> int:
    print(
        json.dumps(
            {
                "status": outcome.status,
                "solver_status": outcome.solver_status.value if outcome.solver_status else None,
                "iterations": outcome.iterations,
                "final_objective": outcome.final_objective,
                "final_violation": outcome.final_violation,
                "num_clusters": outcome.num_clusters,
                "wall_time_s": outcome.wall_time_s,
                "out_dir": outcome.out_dir,
                "error": outcome.error,
            },
            indent=2,
        )
    )
    if outcome.status == "ok":
        return EXIT_OK
    if outcome.status == "not_converged":
        return EXIT_NOT_CONVERGED
    return EXIT_STAGE_FAILURE


def _parse_seeds(raw: str) -> list:
    if "," in raw:
        return [int(s) for s in raw.split(",") if s.strip()]
    value = int(raw)
    if value <= 0:
        raise ConfigError("seed count must be positive")
    return list(range(1, value + 1))


def cmd_montecarlo(args) -> int:
    config = _load_config(args)
    seeds = _parse_seeds(args.seeds)
    aggregate, series = run_montecarlo(
        config, seeds, out_dir=args.out, threads=args.threads
    )
    print(aggregate)
    print(series)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fwtraj",
        description="Filter-warm-started trajectory optimization benchmark runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a scenario JSON file")
    p_gen.add_argument("--preset", default="two-agent")
    p_gen.add_argument("--dt", type=float, help="override the time step")
    p_gen.add_argument("--horizon", type=int, help="override the horizon")
    p_gen.add_argument("--out", default="scenario.json")
    p_gen.set_defaults(func=cmd_generate)

    p_fil = sub.add_parser("filter", help="sample trajectories with the particle filter")
    _add_config_args(p_fil)
    p_fil.set_defaults(func=cmd_filter)

    p_clu = sub.add_parser("cluster", help="cluster a saved ensemble and pick a warm start")
    _add_config_args(p_clu)
    p_clu.add_argument("--ensemble", required=True, help="ensemble JSON from the filter step")
    p_clu.set_defaults(func=cmd_cluster)

    p_sol = sub.add_parser("solve", help="run the prox-linear solver from a warm start")
    _add_config_args(p_sol)
    p_sol.add_argument("--warm-start", choices=["filter", "random", "file"])
    p_sol.add_argument("--warm-start-file")
    p_sol.set_defaults(func=cmd_solve)

    p_pipe = sub.add_parser("pipeline", help="run filter -> cluster -> select -> solve")
    _add_config_args(p_pipe)
    p_pipe.add_argument("--warm-start", choices=["filter", "random", "file"])
    p_pipe.add_argument("--warm-start-file")
    p_pipe.add_argument("--dump-qp", action="store_true",
                        help="also dump the first subproblem in coordinate format")
    p_pipe.set_defaults(func=cmd_pipeline)

    p_mc = sub.add_parser("montecarlo", help="seed sweep over filter and random warm starts")
    _add_config_args(p_mc)
    p_mc.add_argument("--seeds", required=True,
                      help="comma-separated seed list, or a count N meaning 1..N")
    p_mc.set_defaults(func=cmd_montecarlo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownPresetError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # stage failure surfaced to the shell
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
