"""
Per-sample solve stage: pick the best prediction slot, gate it on
objectness, decode the keypoints and recover the pose.

Pose record (one per line):
    {id, R (9), C (3), reproj_px, iterations}   or   {id, status}
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, TypeVar

import numpy as np

from carmpose.codec.grid import CellPrediction, CodecConfig, layout_for, select_best
from carmpose.codec.records import iter_jsonl, require, require_numbers, write_jsonl
from carmpose.core.geometry import AcquisitionGeometry, RigidTransform
from carmpose.core.instruments import InstrumentModel
from carmpose.errors import (
    CarmPoseError,
    EmptyInputError,
    NoDetectionError,
    NumericalError,
    RecordFormatError,
    SampleMismatchError,
)
from carmpose.simulation.capture import CaptureRanges
from carmpose.simulation.dataset import DatasetSample
from carmpose.solver.pnp import CorrespondenceSet, solve_pnp

LOGGER = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_NO_DETECTION = "no-detection"
STATUS_FAILED = "solve-failed"

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class SolveSettings:
    codec: CodecConfig = CodecConfig()
    min_confidence: float = 0.5
    refine: bool = True
    assumed_geometry: Optional[AcquisitionGeometry] = None


@dataclass(frozen=True, eq=False)
class PoseRecord:
    sample_id: int
    status: str = STATUS_OK
    pose: Optional[RigidTransform] = None
    reproj_px: float = float("nan")
    iterations: int = 0

    @property
    def solved(self) -> bool:
        return self.status == STATUS_OK

    def to_dict(self) -> dict:
        if not self.solved:
            return {"id": self.sample_id, "status": self.status}
        return {
            "id": self.sample_id,
            "R": self.pose.rotation.reshape(-1).tolist(),
            "C": self.pose.translation.tolist(),
            "reproj_px": self.reproj_px,
            "iterations": self.iterations,
        }


def nominal_geometry(ranges: CaptureRanges, sid_mm: float) -> AcquisitionGeometry:
    """One fixed geometry: the given SID and the mid-range FOV."""
    fov = 0.5 * (ranges.fov_diagonal.min + ranges.fov_diagonal.max)
    return AcquisitionGeometry.from_fov(sid_mm, fov, ranges.image_size)


def solve_sample(
    sample: DatasetSample,
    cells: Sequence[CellPrediction],
    instrument: InstrumentModel,
    settings: SolveSettings = SolveSettings(),
) -> PoseRecord:
    try:
        best = detect(cells, sample, settings)
    except NoDetectionError as exc:
        LOGGER.debug("%s", exc)
        return PoseRecord(sample.sample_id, STATUS_NO_DETECTION)

    geometry = settings.assumed_geometry or sample.geometry
    keypoints = best.keypoints_px(layout_for(sample.geometry.image_size_px, settings.codec))
    try:
        solution = solve_pnp(CorrespondenceSet(instrument.control_points, keypoints, geometry),
                             refine=settings.refine)
    except NumericalError as exc:
        LOGGER.warning("Sample %d: %s", sample.sample_id, exc)
        return PoseRecord(sample.sample_id, STATUS_FAILED)
    return PoseRecord(sample.sample_id, STATUS_OK, solution.pose,
                      solution.mean_reprojection_error_px, solution.refinement_iterations)


def detect(
    cells: Sequence[CellPrediction],
    sample: DatasetSample,
    settings: SolveSettings = SolveSettings(),
) -> CellPrediction:
    """Best slot above the confidence gate; raises NoDetectionError otherwise."""
    layout = layout_for(sample.geometry.image_size_px, settings.codec)
    try:
        best = select_best(cells, layout)
    except EmptyInputError:
        raise NoDetectionError(f"sample {sample.sample_id}: no predictions") from None
    if best.conf < settings.min_confidence:
        raise NoDetectionError(f"sample {sample.sample_id}: best objectness {best.conf:.3f} "
                               f"below {settings.min_confidence:.3f}")
    return best


def check_ids(samples: Sequence[DatasetSample], ids: set[int], what: str, require_all: bool) -> None:
    known = {s.sample_id for s in samples}
    extra = sorted(ids - known)
    if extra:
        raise SampleMismatchError(f"{what} reference unknown sample ids: {extra[:5]}")
    if require_all:
        missing = sorted(known - ids)
        if missing:
            raise SampleMismatchError(f"{what} lack sample ids: {missing[:5]}")


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> list[R]:
    """map() over items, optionally threaded; results keep input order."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def solve_all(
    samples: Sequence[DatasetSample],
    predictions: dict[int, list[CellPrediction]],
    instrument: InstrumentModel,
    settings: SolveSettings = SolveSettings(),
    threads: int = 1,
) -> list[PoseRecord]:
    check_ids(samples, set(predictions), "predictions", require_all=False)
    records = ordered_map(
        lambda s: solve_sample(s, predictions.get(s.sample_id, []), instrument, settings),
        list(samples), threads)
    misses = sum(1 for r in records if not r.solved)
    LOGGER.info("Solved %d of %d samples", len(records) - misses, len(records))
    return records


# ============================================================================
# Pose files
# ============================================================================

def write_poses(path: str | Path, records: Sequence[PoseRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def parse_pose(obj: dict, line: int, path: str | Path) -> PoseRecord:
    sample_id = require(obj, "id", int, line, path)
    if "status" in obj:
        status = require(obj, "status", str, line, path)
        if status not in (STATUS_NO_DETECTION, STATUS_FAILED):
            raise RecordFormatError(f"unknown status '{status}'", line, str(path))
        return PoseRecord(sample_id, status)
    try:
        pose = RigidTransform(np.array(require_numbers(obj, "R", 9, line, path)).reshape(3, 3),
                              np.array(require_numbers(obj, "C", 3, line, path)))
    except RecordFormatError:
        raise
    except CarmPoseError as exc:
        raise RecordFormatError(str(exc), line, str(path)) from None
    reproj = obj.get("reproj_px")
    iterations = obj.get("iterations", 0)
    return PoseRecord(sample_id, STATUS_OK, pose,
                      float(reproj) if isinstance(reproj, (int, float)) else float("nan"),
                      int(iterations) if isinstance(iterations, int) else 0)


def read_poses(path: str | Path) -> dict[int, PoseRecord]:
    poses: dict[int, PoseRecord] = {}
    for line_no, obj in iter_jsonl(path):
        record = parse_pose(obj, line_no, path)
        if record.sample_id in poses:
            raise RecordFormatError(f"duplicate sample id {record.sample_id}", line_no, str(path))
        poses[record.sample_id] = record
    return poses
