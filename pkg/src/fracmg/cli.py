"""Command line entry point.

    fracmg run [--config FILE] [--solver S] [--refine N] [--steps K]
               [--out DIR] [--warm-start-displacement] [--tol X]

Command line flags override configuration-file keys; without a file the
standard notched-tension defaults apply.
"""

from __future__ import annotations

import argparse
import sys

from .bench import SOLVERS, RunConfig, parse_config, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracmg",
        description="Phase-field brittle fracture benchmark driver")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a load-stepping experiment")
    run.add_argument("--config", help="flat key = value configuration file")
    run.add_argument("--solver", choices=SOLVERS, help="solver selection")
    run.add_argument("--refine", type=int, help="uniform refinement steps")
    run.add_argument("--steps", type=int, help="number of load steps")
    run.add_argument("--out", help="output directory")
    run.add_argument("--tol", type=float, help="solver tolerance")
    run.add_argument("--warm-start-displacement", action="store_true",
                     help="one displacement multigrid step before each solve")
    return parser


def _progress(step, report, force):
    status = "ok" if report.converged else "NOT CONVERGED"
    print(f"step {step:4d}  iters {report.iterations:5d}  "
          f"force {force: .6e} kN  [{status}]")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "run":  # pragma: no cover - argparse enforces this
        return 2
    try:
        config = parse_config(args.config) if args.config else RunConfig()
        overrides = {
            "solver": args.solver,
            "refine_steps": args.refine,
            "steps": args.steps,
            "out_dir": args.out,
            "tolerance": args.tol,
        }
        for key, value in overrides.items():
            if value is not None:
                setattr(config, key, value)
        if args.warm_start_displacement:
            config.warm_start_displacement = True
        config.__post_init__()
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run_experiment(config, progress=_progress)


if __name__ == "__main__":
    sys.exit(main())
