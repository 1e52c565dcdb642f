"""
Command-line entry point.

    python main.py [--seed S] [--config PATH] [--out DIR] [--threads N]
                   [--log-level L] <command> [options]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from carmpose import __version__
from carmpose.cli.commands import COMMANDS
from carmpose.cli.config import LOG_LEVELS, load_run_config
from carmpose.errors import CarmPoseError, ConfigError

LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# argparse dest -> RunConfig key
_FLAG_KEYS = {
    "seed": "seed",
    "out": "out",
    "threads": "threads",
    "log_level": "log_level",
    "instrument": "instrument",
    "n": "n",
    "constraint": "constraint",
    "fiducial_noise": "fiducial_noise_px",
    "split": "split",
    "dataset": "dataset",
    "jitter": "jitter_px",
    "background": "background",
    "predictions": "predictions",
    "poses": "poses",
    "refine": "refine",
    "assume_geometry": "assume_geometry_sid",
    "min_confidence": "min_confidence",
    "thresholds": "thresholds",
    "pixel_threshold": "pixel_threshold",
    "iterations": "bench_iterations",
    "points": "calib_points",
    "noise_levels": "noise_levels",
    "trials": "trials",
    "collinear": "collinear",
}


def _add_solve_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instrument", help="instrument for non-built-in datasets (JSON path)")
    p.add_argument("--no-refine", dest="refine", action="store_const", const=False,
                   help="skip Gauss-Newton refinement after EPnP")
    p.add_argument("--assume-geometry", type=float, metavar="SID",
                   help="solve every sample with one nominal geometry at this SID (mm)")
    p.add_argument("--min-confidence", type=float, help="objectness gate (default 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carmpose",
        description="Variable-geometry X-ray instrument pose toolkit",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, help="random seed (default 0)")
    parser.add_argument("--config", help="JSON file with configuration overrides")
    parser.add_argument("--out", help="output directory (default .)")
    parser.add_argument("--threads", type=int, help="worker threads (default 1)")
    parser.add_argument("--log-level", choices=LOG_LEVELS, help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a labelled dataset")
    p.add_argument("--instrument", help="cube, screw or an instrument JSON file")
    p.add_argument("--n", type=int, help="number of samples (default 1000)")
    p.add_argument("--clinical", dest="constraint", action="store_const", const="clinical",
                   help="restrict viewing angles to the clinical range")
    p.add_argument("--fiducial-noise", type=float, metavar="PX",
                   help="re-estimate the board pose from noisy fiducials")
    p.add_argument("--split", type=float, metavar="F", help="also write a train/val split")

    p = sub.add_parser("predict-oracle", help="noisy ground-truth predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--jitter", type=float, metavar="PX", help="keypoint jitter sigma (default 0)")
    p.add_argument("--background", type=int, metavar="N", help="clutter records per sample (default 16)")

    p = sub.add_parser("solve", help="recover poses from predictions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--predictions", required=True)
    _add_solve_flags(p)

    p = sub.add_parser("evaluate", help="score poses against ground truth")
    p.add_argument("--dataset", required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--poses")
    source.add_argument("--predictions")
    p.add_argument("--thresholds", nargs="+", metavar="T", help="e.g. 0.1d 0.05d 1mm 0.02d")
    p.add_argument("--pixel-threshold", type=float, metavar="PX", help="2D pass threshold (default 5)")
    _add_solve_flags(p)

    p = sub.add_parser("bench", help="time the selection and PnP stages")
    p.add_argument("--dataset", required=True)
    p.add_argument("--iterations", type=int, help="timed iterations per stage (default 1000)")
    p.add_argument("--instrument", help="instrument for non-built-in datasets (JSON path)")

    p = sub.add_parser("calibrate", help="optical/X-ray link recovery sweep")
    p.add_argument("--points", type=int, help="dome points (default 12)")
    p.add_argument("--noise-levels", type=float, nargs="+", metavar="MM")
    p.add_argument("--trials", type=int, help="trials per noise level (default 20)")
    p.add_argument("--collinear", action="store_const", const=True,
                   help="lay the dome points on a line")
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items() if hasattr(args, dest)}
    try:
        cfg = load_run_config(args.config, flags)
    except ConfigError as exc:
        configure_logging("INFO")
        LOGGER.error("%s", exc)
        return exc.exit_code

    configure_logging(cfg.log_level)
    LOGGER.debug("Effective configuration:\n%s", cfg.canonical_json())
    try:
        return COMMANDS[args.command](cfg)
    except CarmPoseError as exc:
        LOGGER.error("%s: %s", args.command, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
