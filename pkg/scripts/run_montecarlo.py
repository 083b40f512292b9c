#!/usr/bin/env python3
"""Seed sweep comparing filter-based and random warm starts.

Writes montecarlo.csv (one row per seed and method) and
montecarlo_series.csv (per-iteration median and interquartile objective and
violation) under --out.
"""

import argparse

from fwtraj.pipeline import PipelineConfig, run_montecarlo


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--preset", default="two-agent")
    parser.add_argument("--seeds", type=int, default=20, help="runs seeds 1..N")
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", default="out/montecarlo")
    args = parser.parse_args()

    config = PipelineConfig(scenario_preset=args.preset)
    aggregate, series = run_montecarlo(
        config, seeds=list(range(1, args.seeds + 1)), out_dir=args.out,
        threads=args.threads,
    )
    print(aggregate)
    print(series)


if __name__ == "__main__":
    main()
