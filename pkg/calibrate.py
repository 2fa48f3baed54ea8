#!/usr/bin/env python3
"""Virtual Flow Meter Calibration.

Sequential Monte Carlo calibration of choke-model virtual flow meters
from commingled separator measurements and occasional well tests.

Usage:
    ./calibrate.py generate constructed --output data/constructed
    ./calibrate.py generate random --seed 3 --output data/random_3
    ./calibrate.py run --config run/constructed.yaml
    ./calibrate.py run --config run/synthetic_copy.yaml --apply-mods no_welltests
    ./calibrate.py evaluate runs/a runs/b --output comparison
    ./calibrate.py pipeline pipelines/synthetic_random_paired.yaml
"""

import argparse
import logging
import sys

from src import Runner

RUN_FLAGS = {
    "features": "dataset.features",
    "observations": "dataset.observations",
    "truth": "dataset.truth",
    "dataset_dir": "dataset.directory",
    "output_dir": "output_dir",
    "n_particles": "filter.n_particles",
    "seed": "filter.seed",
    "resampling_scheme": "filter.resampling_scheme",
    "resample_every_step": "filter.resample_every_step",
    "ess_threshold": "filter.ess_threshold",
    "workers": "filter.n_workers",
    "block_size": "filter.block_size",
    "p_z": "transition.p_z",
    "sigma_eps": "noise.sigma_eps",
    "sigma_e": "noise.sigma_e",
    "sigma_f": "noise.sigma_f",
    "include_welltests": "include_welltests",
    "rate_scale": "rate_scale",
    "target_source": "evaluation.target_source",
    "bucket_days": "evaluation.bucket_days",
    "burn_in": "evaluation.burn_in",
}


def parse_groups(run_dirs, group_specs):
    """Turn positional run directories and ``LABEL=DIR[,DIR...]`` specs into
    evaluation groups."""
    groups = {}
    for run_dir in run_dirs or []:
        groups[run_dir.rstrip("/").split("/")[-1]] = [run_dir]
    for spec in group_specs or []:
        if "=" not in spec:
            raise ValueError(f"Invalid --group '{spec}'. Expected LABEL=DIR[,DIR...]")
        label, dirs = spec.split("=", 1)
        groups[label] = [d for d in dirs.split(",") if d]
    return groups


def build_parser():
    parser = argparse.ArgumentParser(
        description="Virtual Flow Meter Calibration",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the constructed three-well case
  %(prog)s generate constructed --output data/constructed

  # Generate a randomized benchmark dataset from the frozen well-test table
  %(prog)s generate random --seed 3 --output data/random_3

  # Run the filter from a configuration file
  %(prog)s run --config run/constructed.yaml

  # Hide well tests from the filter
  %(prog)s run --config run/synthetic_copy.yaml --apply-mods no_welltests

  # Override configuration values at runtime
  %(prog)s run --config run/constructed.yaml --set filter.n_particles=100000

  # Compare runs, averaging seeds per column
  %(prog)s evaluate --group with=runs/w1,runs/w2 --group without=runs/n1,runs/n2

  # Pipeline mode
  %(prog)s pipeline pipelines/synthetic_random_paired.yaml
        """,
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true", help="Enable debug logging"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="Generate a synthetic dataset")
    generate.add_argument(
        "case",
        choices=["constructed", "copy", "random"],
        help="Scenario to generate",
    )
    generate.add_argument(
        "--output", "-o", required=True, help="Output directory of the dataset"
    )
    generate.add_argument(
        "--seed", type=int, help="Generator seed (default: scenario seed)"
    )
    generate.add_argument(
        "--scenario",
        help="Scenario YAML for copy/random (default: scenarios/benchmark.yaml)",
    )
    generate.add_argument(
        "--no-noise",
        dest="noise",
        action="store_false",
        help="Write noise-free measurements",
    )
    generate.add_argument(
        "--well-terms",
        dest="well_terms",
        action="store_true",
        default=None,
        help="Include per-well noise terms",
    )
    generate.add_argument(
        "--no-well-terms",
        dest="well_terms",
        action="store_false",
        help="Separator noise only",
    )

    run = subparsers.add_parser("run", help="Run the calibration filter")
    run.add_argument("--config", "-c", help="Run configuration YAML")
    run.add_argument(
        "--apply-mods",
        nargs="+",
        help="Apply modifiers (names from config/run/modifier/ or paths)",
    )
    run.add_argument(
        "--set",
        dest="set_overrides",
        action="append",
        metavar="KEY=VALUE",
        help="Override a configuration value in dot notation (repeatable)",
    )
    run.add_argument(
        "--list-mods", action="store_true", help="List available modifiers"
    )
    run.add_argument("--features", help="Features CSV")
    run.add_argument("--observations", help="Observations CSV")
    run.add_argument("--truth", help="Truth CSV of synthetic datasets")
    run.add_argument(
        "--dataset-dir", help="Directory holding features/observations/truth CSVs"
    )
    run.add_argument(
        "--output-dir",
        "-o",
        help="Run output directory (VFMCAL_OUTPUT_DIR takes precedence)",
    )
    run.add_argument("--n-particles", "-N", type=int, help="Number of particles")
    run.add_argument("--seed", type=int, help="Filter seed")
    run.add_argument(
        "--resampling-scheme",
        choices=["systematic", "multinomial", "stratified"],
        help="Resampling scheme",
    )
    run.add_argument(
        "--adaptive-resampling",
        dest="resample_every_step",
        action="store_const",
        const=False,
        help="Resample only when the relative ESS falls below --ess-threshold",
    )
    run.add_argument("--ess-threshold", type=float, help="Adaptive resampling threshold")
    run.add_argument("--workers", type=int, help="Propagation threads")
    run.add_argument("--block-size", type=int, help="Particles per random stream")
    run.add_argument("--p-z", type=float, help="Jump probability")
    run.add_argument("--sigma-eps", type=float, help="Separator noise level")
    run.add_argument("--sigma-e", type=float, help="Well noise level")
    run.add_argument("--sigma-f", type=float, help="Flow model error level")
    run.add_argument(
        "--no-welltests",
        dest="include_welltests",
        action="store_const",
        const=False,
        help="Hide well tests from the filter (they are still evaluated)",
    )
    run.add_argument("--rate-scale", type=float, help="Rate scaling factor")
    run.add_argument(
        "--target-source",
        choices=["auto", "truth", "welltest"],
        help="Validation targets (default: truth when available)",
    )
    run.add_argument("--bucket-days", type=int, help="Error bucket width")
    run.add_argument("--burn-in", type=int, help="Steps excluded from the MAD")

    evaluate = subparsers.add_parser("evaluate", help="Compare run reports")
    evaluate.add_argument("runs", nargs="*", help="Run directories, one column each")
    evaluate.add_argument(
        "--group",
        action="append",
        metavar="LABEL=DIR[,DIR...]",
        help="Column averaging several runs (repeatable)",
    )
    evaluate.add_argument(
        "--output", "-o", default="comparison", help="Output directory"
    )
    evaluate.add_argument("--title", default="", help="Table title")

    pipeline = subparsers.add_parser("pipeline", help="Run a multi-stage pipeline")
    pipeline.add_argument("pipeline", help="Pipeline YAML file")

    return parser


def main():
    """Main entry point for the calibration tool."""
    args = build_parser().parse_args()

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s: %(message)s",
    )

    try:
        runner = Runner()

        if args.command == "generate":
            runner.generate(
                case=args.case,
                output_dir=args.output,
                seed=args.seed,
                scenario=args.scenario,
                noise=args.noise,
                well_terms=args.well_terms,
            )

        elif args.command == "run":
            if args.list_mods:
                print("Available modifiers:")
                for name in runner.config_mgr.list_modifiers():
                    print(f"  {name}")
                return 0

            overrides = {
                key: getattr(args, flag)
                for flag, key in RUN_FLAGS.items()
                if getattr(args, flag) is not None
            }
            return runner.run(
                config=args.config,
                apply_mods=args.apply_mods,
                set_overrides=args.set_overrides,
                overrides=overrides,
            )

        elif args.command == "evaluate":
            groups = parse_groups(args.runs, args.group)
            runner.evaluate(groups, output_dir=args.output, title=args.title)

        else:
            status_map = runner.run_pipeline(args.pipeline)
            print("=== Pipeline finished ===")
            for stage, status in status_map.items():
                print(f"{stage}: {'ok' if status == 0 else 'failed'}")
            if any(status_map.values()):
                return 1

    except (FileNotFoundError, ValueError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 1

    return 0


if __name__ == "__main__":
    sys.exit(main())
