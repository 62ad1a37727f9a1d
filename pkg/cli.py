"""
Command-line entry point

    python cli.py run experiment.json [--workers N] [--out DIR] [--seed-offset K]
    python cli.py validate experiment.json
    python cli.py grid
    python cli.py report runs/manifest.json

Exit status: 0 when every chain completed, 2 on partial failure, 1 on an
invalid configuration or unreadable input.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from config import DEFAULT_OUTPUT_DIR, OUTPUT_DIR_ENV
from data_utils import BudgetInfeasibleError
from experiment_runner import ExperimentConfig, ExperimentRunner, RunManifest, default_temperature_grid
from pdf_utils import generate_pdf_report
from report_utils import emit_report

logger = logging.getLogger("cpe_lab")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARTIAL = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(output_dir=None, verbose=False):
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(stream)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(output_dir) / "run.log")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)


def build_parser():
    parser = argparse.ArgumentParser(prog="cpe-lab", description="Cold posterior effect experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment")
    run.add_argument("config", help="Experiment JSON document")
    run.add_argument("--workers", type=int, default=None, help="Parallel chains (default: config, $CPE_LAB_WORKERS, else one per chain up to the core count)")
    run.add_argument("--out", default=None, help=f"Output directory (default: config, ${OUTPUT_DIR_ENV} or '{DEFAULT_OUTPUT_DIR}')")
    run.add_argument("--seed-offset", type=int, default=0, help="Added to every configured seed")

    validate = sub.add_parser("validate", help="Check an experiment document without running it")
    validate.add_argument("config")

    sub.add_parser("grid", help="Print the default temperature grid")

    report = sub.add_parser("report", help="Render report.md and report.pdf from a manifest")
    report.add_argument("manifest", help="manifest.json or the run directory holding it")
    return parser


def cmd_run(args):
    try:
        config = ExperimentConfig.load(args.config)
    except (OSError, ValueError) as e:
        logger.error("Invalid configuration %s: %s", args.config, e)
        return EXIT_INVALID
    runner = ExperimentRunner(config, output_dir=args.out, workers=args.workers, seed_offset=args.seed_offset)
    setup_logging(runner.output_dir, args.verbose)
    try:
        manifest = runner.run()
    except BudgetInfeasibleError as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except ValueError as e:
        logger.error("Experiment could not be planned: %s", e)
        return EXIT_INVALID
    print(f"{manifest.status}: {len(manifest.entries)} chains, manifest at {Path(manifest.output_dir) / 'manifest.json'}")
    return EXIT_OK if manifest.status == "completed" else EXIT_PARTIAL


def cmd_validate(args):
    try:
        config = ExperimentConfig.load(args.config)
    except (OSError, ValueError) as e:
        print(f"invalid: {e}")
        return EXIT_INVALID
    print(f"valid: {config.kind}, {len(config.temperatures)} temperatures, {len(config.seeds)} seeds")
    return EXIT_OK


def cmd_grid(args):
    print(json.dumps(default_temperature_grid()))
    return EXIT_OK


def cmd_report(args):
    try:
        manifest = RunManifest.load(args.manifest)
        out = Path(args.manifest)
        out = out if out.is_dir() else out.parent
        text = emit_report(manifest, out / "report.md")
        (out / "report.pdf").write_bytes(generate_pdf_report(manifest))
    except (OSError, ValueError) as e:
        logger.error("Cannot report on %s: %s", args.manifest, e)
        return EXIT_INVALID
    print(text)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "grid": cmd_grid, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
