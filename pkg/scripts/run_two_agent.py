#!/usr/bin/env python3
"""Run the two-agent benchmark end to end and print a short summary.

Equivalent to `fwtraj pipeline --preset two-agent`; kept as a script for
quick experimentation with the stage parameters below.
"""

import argparse

from fwtraj.pipeline import PipelineConfig, run_pipeline


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", default="out/two-agent")
    parser.add_argument("--warm-start", choices=["filter", "random"], default="filter")
    parser.add_argument("--gamma", type=float, default=100.0, help="slack penalty weight")
    args = parser.parse_args()

    config = PipelineConfig()
    config.filter.seed = args.seed
    config.warm_start = args.warm_start
    config.solver.gamma_penalty = args.gamma

    outcome = run_pipeline(config, out_dir=args.out)
    print(f"status           {outcome.status} ({outcome.solver_status.value})")
    print(f"iterations       {outcome.iterations}")
    print(f"clusters         {outcome.num_clusters}")
    print(f"warm-start merit {outcome.warm_start_merit:.4f}")
    print(f"final objective  {outcome.final_objective:.4f}")
    print(f"final violation  {outcome.final_violation:.3e}")
    print(f"wall time        {outcome.wall_time_s:.1f}s")
    print(f"artifacts        {outcome.out_dir}")


if __name__ == "__main__":
    main()
