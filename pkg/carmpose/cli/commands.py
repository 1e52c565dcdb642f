"""
Subcommands: generate, predict-oracle, solve, evaluate, bench, calibrate.

Each takes the merged RunConfig, writes its outputs under `cfg.out`, prints
a short summary on stdout and returns the process exit code.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from carmpose import __version__
from carmpose.cli.config import RunConfig
from carmpose.cli.pipeline import (
    PoseRecord,
    SolveSettings,
    check_ids,
    nominal_geometry,
    ordered_map,
    read_poses,
    solve_all,
    write_poses,
)
from carmpose.codec.grid import PredictionGrid, layout_for, select_best
from carmpose.codec.records import read_predictions, write_predictions
from carmpose.core.geometry import project_points
from carmpose.core.instruments import BUILTIN_INSTRUMENTS, InstrumentModel, load_instrument
from carmpose.errors import ConfigError, DataError, DegenerateConfigurationError, EmptyInputError
from carmpose.metrics.pose_metrics import angular_error, evaluate_pose, translation_error
from carmpose.metrics.report import aggregate, write_evaluations, write_report_csv, write_table_csv
from carmpose.simulation.capture import describe
from carmpose.simulation.dataset import (
    DatasetSample,
    build_dataset,
    read_dataset,
    split_dataset,
    write_dataset,
    write_manifest,
)
from carmpose.simulation.fiducials import random_link, simulate_dome_link
from carmpose.simulation.oracle import OracleConfig, oracle_predict
from carmpose.solver.pnp import CorrespondenceSet, solve_epnp, solve_pnp
from carmpose.solver.registration import register_point_sets

LOGGER = logging.getLogger(__name__)

BENCH_WARMUP = 20
BENCH_POINT_COUNTS = (9, 27, 81)
BENCH_GRIDS = 8


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {"tool": "carmpose", "version": __version__, "command": command,
            "config": cfg.to_dict(), **extra}


def _require_path(value: str | None, flag: str) -> str:
    if not value:
        raise ConfigError(f"{flag} is required")
    return value


def _instrument_for(samples: Sequence[DatasetSample], cfg: RunConfig) -> InstrumentModel:
    """The dataset's instrument: a built-in by name, else the configured file."""
    names = sorted({s.instrument for s in samples})
    if len(names) > 1:
        raise DataError(f"dataset mixes instruments: {', '.join(names)}")
    if names and names[0] in BUILTIN_INSTRUMENTS:
        return load_instrument(names[0])
    model = load_instrument(cfg.instrument)
    if names and model.name != names[0]:
        raise ConfigError(f"dataset instrument '{names[0]}' does not match --instrument '{model.name}'")
    return model


def _solve_settings(cfg: RunConfig) -> SolveSettings:
    assumed = None
    if cfg.assume_geometry_sid is not None:
        assumed = nominal_geometry(cfg.ranges, cfg.assume_geometry_sid)
        LOGGER.info("Solving with a fixed geometry: SID %.1f mm, FOV %.1f mm",
                    assumed.focal_length_mm, assumed.fov_diagonal_mm)
    return SolveSettings(cfg.codec, cfg.min_confidence, cfg.refine, assumed)


# ============================================================================
# generate
# ============================================================================

def cmd_generate(cfg: RunConfig) -> int:
    instrument = load_instrument(cfg.instrument)
    out = _out_dir(cfg)
    LOGGER.info("Sampling %s", describe(cfg.ranges, cfg.constraint))
    build = build_dataset(instrument, cfg.ranges, cfg.n, cfg.seed, cfg.constraint,
                          cfg.fiducial_noise_px, cfg.rig, cfg.threads)

    write_dataset(out / "dataset.jsonl", build.samples)
    files = ["dataset.jsonl"]
    if cfg.split is not None:
        train, val = split_dataset(build.samples, cfg.split, cfg.seed)
        write_dataset(out / "dataset_train.jsonl", train)
        write_dataset(out / "dataset_val.jsonl", val)
        files += ["dataset_train.jsonl", "dataset_val.jsonl"]

    write_manifest(out / "manifest.json", _manifest(
        cfg, "generate",
        seed=cfg.seed,
        constraint=cfg.constraint,
        instrument=instrument.name,
        diameter_mm=instrument.diameter_mm,
        n=len(build.samples),
        draws=build.attempts,
        rejection_rate=build.rejection_rate,
        ranges=cfg.ranges.to_dict(),
        files=files,
    ))
    print(f"generate: {len(build.samples)} {instrument.name} samples, "
          f"rejection rate {100.0 * build.rejection_rate:.1f}% -> {out / 'dataset.jsonl'}")
    return 0


# ============================================================================
# predict-oracle
# ============================================================================

def cmd_predict_oracle(cfg: RunConfig) -> int:
    samples = read_dataset(_require_path(cfg.dataset, "--dataset"))
    out = _out_dir(cfg)
    oracle = OracleConfig(jitter_px=cfg.jitter_px, background_cells=cfg.background)
    per_sample = ordered_map(lambda s: oracle_predict(s, oracle, cfg.seed, cfg.codec), samples, cfg.threads)
    records = [r for batch in per_sample for r in batch]
    write_predictions(out / "predictions.jsonl", records)
    write_manifest(out / "predictions_manifest.json", _manifest(cfg, "predict-oracle", records=len(records)))
    print(f"predict-oracle: {len(records)} records for {len(samples)} samples "
          f"(jitter {cfg.jitter_px:g} px) -> {out / 'predictions.jsonl'}")
    return 0


# ============================================================================
# solve / evaluate
# ============================================================================

def _solve_from_predictions(cfg: RunConfig, samples: list[DatasetSample],
                            instrument: InstrumentModel) -> list[PoseRecord]:
    predictions = read_predictions(_require_path(cfg.predictions, "--predictions"))
    return solve_all(samples, predictions, instrument, _solve_settings(cfg), cfg.threads)


def cmd_solve(cfg: RunConfig) -> int:
    samples = read_dataset(_require_path(cfg.dataset, "--dataset"))
    instrument = _instrument_for(samples, cfg)
    out = _out_dir(cfg)
    records = _solve_from_predictions(cfg, samples, instrument)
    write_poses(out / "poses.jsonl", records)
    solved = sum(1 for r in records if r.solved)
    print(f"solve: {solved}/{len(records)} poses -> {out / 'poses.jsonl'}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    samples = read_dataset(_require_path(cfg.dataset, "--dataset"))
    instrument = _instrument_for(samples, cfg)
    thresholds = cfg.parsed_thresholds()
    out = _out_dir(cfg)

    if cfg.poses:
        poses = read_poses(cfg.poses)
        check_ids(samples, set(poses), "poses", require_all=True)
        records = [poses[s.sample_id] for s in samples]
    elif cfg.predictions:
        records = _solve_from_predictions(cfg, samples, instrument)
    else:
        raise ConfigError("evaluate needs --poses or --predictions")

    by_id = {s.sample_id: s for s in samples}
    solved = [r for r in records if r.solved]
    evals = ordered_map(
        lambda r: evaluate_pose(instrument, by_id[r.sample_id].pose, r.pose,
                                by_id[r.sample_id].geometry, thresholds,
                                by_id[r.sample_id].points_2d, r.sample_id),
        solved, cfg.threads)
    report = aggregate(evals, thresholds, cfg.pixel_threshold, missed=len(records) - len(solved))

    write_evaluations(out / "evaluations.jsonl", evals)
    write_report_csv(out / "report.csv", report)
    print(f"evaluate: {report.n} samples ({report.missed} without a pose)")
    for row in report.rows():
        label = f"{row['metric']} {row['threshold']}".strip()
        rate = f"{row['pass_rate']:.2f}%" if row["pass_rate"] != "" else ""
        spread = f"{row['mean']:.2f}±{row['std']:.2f}" if row["mean"] != "" else f"n={row['n']}"
        print(f"  {label:<20} {rate:>8} {spread}")
    return 0


# ============================================================================
# bench
# ============================================================================

def _time_ms(fn: Callable[[], object], iterations: int) -> tuple[float, float]:
    for _ in range(BENCH_WARMUP):
        fn()
    samples = np.empty(iterations)
    for k in range(iterations):
        start = time.perf_counter_ns()
        fn()
        samples[k] = (time.perf_counter_ns() - start) / 1e6
    return float(np.median(samples)), float(np.percentile(samples, 95))


def cmd_bench(cfg: RunConfig) -> int:
    samples = read_dataset(_require_path(cfg.dataset, "--dataset"))
    if not samples:
        raise EmptyInputError("bench needs at least one sample")
    instrument = _instrument_for(samples, cfg)
    out = _out_dir(cfg)
    iterations = cfg.bench_iterations
    rows = []

    # Prediction filtering over full padded grids.
    subset = samples[:BENCH_GRIDS]
    grids = []
    for sample in subset:
        layout = layout_for(sample.geometry.image_size_px, cfg.codec)
        cells = [r.cell for r in oracle_predict(sample, OracleConfig(background_cells=cfg.background),
                                                cfg.seed, cfg.codec, layout)]
        grids.append(PredictionGrid.from_cells(layout, cells))
    rotation = itertools.cycle(grids)
    median, p95 = _time_ms(lambda: select_best(next(rotation)), iterations)
    rows.append({"stage": "select_best", "n": grids[0].layout.total_predictions,
                 "median_ms": median, "p95_ms": p95})

    # PnP on the control points, then on denser vertex subsets.
    sample = samples[0]
    control = CorrespondenceSet(instrument.control_points, sample.points_2d, sample.geometry)
    for stage, fn in (("epnp", lambda: solve_epnp(control)),
                      ("epnp+gauss_newton", lambda: solve_pnp(control))):
        median, p95 = _time_ms(fn, iterations)
        rows.append({"stage": stage, "n": len(control), "median_ms": median, "p95_ms": p95})

    rng = np.random.default_rng(cfg.seed)
    for count in BENCH_POINT_COUNTS[1:]:
        if count > len(instrument.vertices):
            break
        pts = instrument.vertices[rng.choice(len(instrument.vertices), count, replace=False)]
        dense = CorrespondenceSet(pts, project_points(pts, sample.pose, sample.geometry), sample.geometry)
        median, p95 = _time_ms(lambda: solve_epnp(dense), iterations)
        rows.append({"stage": "epnp", "n": count, "median_ms": median, "p95_ms": p95})

    write_table_csv(out / "bench.csv", ["stage", "n", "median_ms", "p95_ms"], rows)
    print(f"bench: {iterations} iterations per stage")
    for row in rows:
        print(f"  {row['stage']:<18} n={row['n']:<6} median {row['median_ms']:.4f} ms  "
              f"p95 {row['p95_ms']:.4f} ms")
    return 0


# ============================================================================
# calibrate
# ============================================================================

def calibration_rows(cfg: RunConfig) -> list[dict]:
    """
    Registration sweep over noise levels. Trial k uses the same link, dome
    and unit noise at every level, so levels differ only in noise scale.
    """
    rows = []
    for noise in cfg.noise_levels:
        rot_err, trans_err, rms = [], [], []
        degenerate = 0
        for trial in range(cfg.trials):
            rng = np.random.default_rng([cfg.seed, trial])
            link = random_link(rng)
            optical, xray = simulate_dome_link(cfg.calib_points, link, noise, rng, collinear=cfg.collinear)
            try:
                result = register_point_sets(optical, xray)
            except DegenerateConfigurationError:
                degenerate += 1
                continue
            rot_err.append(angular_error(link, result.transform))
            trans_err.append(translation_error(link, result.transform))
            rms.append(result.rms_residual_mm)
        rows.append({
            "noise_mm": float(noise),
            "points": cfg.calib_points,
            "trials": cfg.trials,
            "status": "degenerate" if degenerate == cfg.trials else "ok",
            "degenerate": degenerate,
            "median_translation_mm": float(np.median(trans_err)) if trans_err else math.nan,
            "median_rotation_deg": float(np.median(rot_err)) if rot_err else math.nan,
            "median_rms_mm": float(np.median(rms)) if rms else math.nan,
        })
    return rows


def cmd_calibrate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rows = calibration_rows(cfg)
    header = ["noise_mm", "points", "trials", "status", "degenerate",
              "median_translation_mm", "median_rotation_deg", "median_rms_mm"]
    write_table_csv(out / "calibration.csv", header, rows)
    print(f"calibrate: {len(rows)} noise levels x {cfg.trials} trials -> {out / 'calibration.csv'}")
    for row in rows:
        print(f"  noise {row['noise_mm']:<6g} {row['status']:<10} translation {row['median_translation_mm']:.3g} mm  "
              f"rotation {row['median_rotation_deg']:.3g} deg")
    return 0


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "generate": cmd_generate,
    "predict-oracle": cmd_predict_oracle,
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "calibrate": cmd_calibrate,
}
