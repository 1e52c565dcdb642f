"""
Labelled dataset generation.

Each sample runs the capture chain object -> board -> optical camera ->
X-ray source, resolves the object pose in the source frame, and projects
the instrument's control points through that frame's geometry. Captures
that put a control point outside the image are redrawn.

Dataset record (one per line):
    {id, f, k_u, k_v, x_0, y_0, W_img, H_img, R (9, row-major), C (3),
     points_2d (18), instrument, r_deg (3) [, label_add_mm]}
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from carmpose.codec.records import iter_jsonl, require, require_numbers, write_jsonl
from carmpose.core.frames import BOARD, OBJECT, OPTICAL_CAMERA, XRAY_SOURCE, FrameChain
from carmpose.core.geometry import AcquisitionGeometry, RigidTransform, compose, invert, project_points
from carmpose.core.instruments import InstrumentModel
from carmpose.errors import (
    CarmPoseError,
    ConfigError,
    DataError,
    InfeasibleConfigurationError,
    NumericalError,
    RecordFormatError,
)
from carmpose.metrics.pose_metrics import add
from carmpose.simulation.capture import CaptureRanges, draw_geometry, lattice_order
from carmpose.simulation.fiducials import RigConfig, simulate_fiducial_board
from carmpose.solver.pnp import estimate_board_pose

LOGGER = logging.getLogger(__name__)

MAX_ATTEMPTS = 100
_SPLIT_STREAM = 0x5917


@dataclass(frozen=True, eq=False)
class DatasetSample:
    sample_id: int
    geometry: AcquisitionGeometry
    pose: RigidTransform                  # object -> X-ray source
    points_2d: NDArray[np.float64]        # (9, 2) control points, center first
    instrument: str
    rotation_deg: tuple[float, float, float]
    label_add_mm: Optional[float] = None  # labelling error when fiducials are noisy

    def to_dict(self) -> dict:
        record: dict[str, Any] = {"id": self.sample_id}
        record.update(self.geometry.to_dict())
        record["R"] = self.pose.rotation.reshape(-1).tolist()
        record["C"] = self.pose.translation.tolist()
        record["points_2d"] = self.points_2d.reshape(-1).tolist()
        record["instrument"] = self.instrument
        record["r_deg"] = list(self.rotation_deg)
        if self.label_add_mm is not None:
            record["label_add_mm"] = self.label_add_mm
        return record


@dataclass(frozen=True)
class DatasetBuild:
    samples: list[DatasetSample]
    attempts: int

    @property
    def rejections(self) -> int:
        return self.attempts - len(self.samples)

    @property
    def rejection_rate(self) -> float:
        return self.rejections / self.attempts if self.attempts else 0.0


# ============================================================================
# Generation
# ============================================================================

def acquisition_chain(
    target: RigidTransform,
    sid_mm: float,
    rig: RigConfig,
    fiducial_noise_px: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> FrameChain:
    """
    Chain whose resolved object -> source pose is `target` up to rounding.

    With fiducial noise the board -> camera link is replaced by the pose
    estimated from the noisy board detections.
    """
    object_to_board = rig.object_to_board()
    camera_to_source = rig.camera_to_source(sid_mm)
    board_to_camera = compose(invert(camera_to_source), compose(target, invert(object_to_board)))

    measured = board_to_camera
    if fiducial_noise_px > 0:
        detections, fiducials = simulate_fiducial_board(
            rig.fiducials, rig.camera, board_to_camera, fiducial_noise_px, rng)
        measured = estimate_board_pose(fiducials, detections, rig.camera).pose

    chain = FrameChain.from_links(
        (OBJECT, BOARD, object_to_board),
        (BOARD, OPTICAL_CAMERA, measured),
        (OPTICAL_CAMERA, XRAY_SOURCE, camera_to_source),
    )
    return chain


def _generate_one(
    index: int,
    rotation_deg: tuple[float, float, float],
    instrument: InstrumentModel,
    ranges: CaptureRanges,
    seed: int,
    rig: RigConfig,
    fiducial_noise_px: float,
    max_attempts: int,
) -> tuple[DatasetSample, int]:
    rng = np.random.default_rng([seed, index])
    control_points = instrument.control_points
    for attempt in range(1, max_attempts + 1):
        translation, geometry = draw_geometry(ranges, rng)
        target = RigidTransform.from_euler(rotation_deg, translation)
        try:
            chain = acquisition_chain(target, geometry.focal_length_mm, rig, fiducial_noise_px, rng)
            pose = chain.resolve(OBJECT, XRAY_SOURCE)
            points = project_points(control_points, pose, geometry)
        except NumericalError as exc:
            LOGGER.debug("Sample %d attempt %d rejected: %s", index, attempt, exc)
            continue
        if not np.all(geometry.contains(points)):
            continue
        label_error = add(instrument, target, pose) if fiducial_noise_px > 0 else None
        sample = DatasetSample(index, geometry, pose, points, instrument.name, rotation_deg, label_error)
        return sample, attempt
    raise InfeasibleConfigurationError(
        f"sample {index}: no in-frame capture after {max_attempts} draws "
        f"(rotation {list(rotation_deg)}); ranges are too wide for the detector"
    )


def build_dataset(
    instrument: InstrumentModel,
    ranges: CaptureRanges,
    n: int,
    seed: int,
    constraint: str = "full",
    fiducial_noise_px: float = 0.0,
    rig: Optional[RigConfig] = None,
    threads: int = 1,
    max_attempts: int = MAX_ATTEMPTS,
) -> DatasetBuild:
    """Samples plus the number of capture draws it took to get them."""
    if n < 0:
        raise ConfigError(f"sample count must be non-negative, got {n}")
    if fiducial_noise_px < 0:
        raise ConfigError(f"fiducial noise must be non-negative, got {fiducial_noise_px}")
    rig = rig or RigConfig()
    order = lattice_order(ranges, seed, constraint)
    rotations = [order.rotation(k) for k in range(n)]

    def work(index: int) -> tuple[DatasetSample, int]:
        return _generate_one(index, rotations[index], instrument, ranges, seed, rig,
                             fiducial_noise_px, max_attempts)

    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n)))
    else:
        results = [work(k) for k in range(n)]

    samples = [s for s, _ in results]
    attempts = sum(a for _, a in results)
    build = DatasetBuild(samples, attempts)
    LOGGER.info("Generated %d %s samples (%d draws, rejection rate %.1f%%)",
                n, instrument.name, attempts, 100.0 * build.rejection_rate)
    return build


def generate_dataset(
    instrument: InstrumentModel,
    ranges: CaptureRanges,
    n: int,
    seed: int,
    constraint: str = "full",
    fiducial_noise_px: float = 0.0,
    rig: Optional[RigConfig] = None,
    threads: int = 1,
) -> list[DatasetSample]:
    return build_dataset(instrument, ranges, n, seed, constraint, fiducial_noise_px, rig, threads).samples


def split_dataset(
    samples: Sequence[DatasetSample],
    fraction: float = 0.7,
    seed: int = 0,
) -> tuple[list[DatasetSample], list[DatasetSample]]:
    """Deterministic train/validation split; both parts keep id order."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"split fraction must lie in [0, 1], got {fraction}")
    n_train = int(math.floor(fraction * len(samples) + 0.5))
    order = np.random.default_rng([seed, _SPLIT_STREAM]).permutation(len(samples))
    train_idx = set(order[:n_train].tolist())
    train = [s for k, s in enumerate(samples) if k in train_idx]
    val = [s for k, s in enumerate(samples) if k not in train_idx]
    return train, val


# ============================================================================
# Files
# ============================================================================

def write_dataset(path: str | Path, samples: Sequence[DatasetSample]) -> int:
    return write_jsonl(path, (s.to_dict() for s in samples))


def parse_sample(obj: dict, line: int, path: str | Path) -> DatasetSample:
    sample_id = require(obj, "id", int, line, path)
    try:
        geometry = AcquisitionGeometry.from_dict({
            key: require(obj, key, (int, float), line, path)
            for key in ("f", "k_u", "k_v", "x_0", "y_0", "W_img", "H_img")
        })
        pose = RigidTransform(
            np.array(require_numbers(obj, "R", 9, line, path)).reshape(3, 3),
            np.array(require_numbers(obj, "C", 3, line, path)),
        )
    except RecordFormatError:
        raise
    except CarmPoseError as exc:
        raise RecordFormatError(str(exc), line, str(path)) from None
    points = np.array(require_numbers(obj, "points_2d", 18, line, path)).reshape(9, 2)
    instrument = require(obj, "instrument", str, line, path)
    r_deg = tuple(require_numbers(obj, "r_deg", 3, line, path)) if "r_deg" in obj else (math.nan,) * 3
    label = obj.get("label_add_mm")
    return DatasetSample(sample_id, geometry, pose, points, instrument, r_deg,
                         float(label) if label is not None else None)


def read_dataset(path: str | Path) -> list[DatasetSample]:
    samples: list[DatasetSample] = []
    seen: set[int] = set()
    for line_no, obj in iter_jsonl(path):
        sample = parse_sample(obj, line_no, path)
        if sample.sample_id in seen:
            raise RecordFormatError(f"duplicate sample id {sample.sample_id}", line_no, str(path))
        seen.add(sample.sample_id)
        samples.append(sample)
    LOGGER.debug("Read %d samples from %s", len(samples), path)
    return samples


def write_manifest(path: str | Path, manifest: dict) -> None:
    """Pretty JSON with sorted keys; stable across runs."""
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"invalid JSON ({exc.msg})", exc.lineno, str(path)) from None
