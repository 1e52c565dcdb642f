"""
Pose-accuracy metrics: ADD, ADD-S, 2D reprojection, translation and angular
error, threshold accuracies.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import cKDTree

from carmpose.core.geometry import AcquisitionGeometry, RigidTransform, project_points
from carmpose.core.instruments import InstrumentModel, Symmetry
from carmpose.errors import BehindSourceError, ConfigError, EmptyInputError, ShapeMismatchError

LOGGER = logging.getLogger(__name__)

DEFAULT_PIXEL_THRESHOLD = 5.0


@dataclass(frozen=True)
class Threshold:
    """Pass threshold either relative to the diameter (factor * d) or absolute in mm."""
    factor: Optional[float] = None
    absolute_mm: Optional[float] = None

    def __post_init__(self) -> None:
        if (self.factor is None) == (self.absolute_mm is None):
            raise ConfigError("a threshold is either relative or absolute")
        value = self.factor if self.factor is not None else self.absolute_mm
        if not value > 0:
            raise ConfigError(f"threshold must be positive, got {value}")

    @property
    def label(self) -> str:
        if self.factor is not None:
            return f"{self.factor:g}d"
        return f"{self.absolute_mm:g}mm"

    def value_mm(self, diameter_mm: float) -> float:
        if self.factor is not None:
            return self.factor * diameter_mm
        return float(self.absolute_mm)

    @classmethod
    def parse(cls, text: str) -> "Threshold":
        """'0.1d' or '1.0mm'."""
        match = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(d|mm)\s*", text)
        if not match:
            raise ConfigError(f"cannot parse threshold '{text}' (expected e.g. 0.1d or 1.0mm)")
        value = float(match.group(1))
        return cls(factor=value) if match.group(2) == "d" else cls(absolute_mm=value)


DEFAULT_THRESHOLDS: tuple[Threshold, ...] = (
    Threshold(factor=0.1),
    Threshold(factor=0.05),
    Threshold(absolute_mm=1.0),
    Threshold(factor=0.02),
)


def _vertices(model: InstrumentModel) -> NDArray[np.float64]:
    if len(model.vertices) == 0:
        raise EmptyInputError(f"instrument '{model.name}' has no vertices")
    return model.vertices


def add(model: InstrumentModel, gt: RigidTransform, pred: RigidTransform) -> float:
    """Mean distance between corresponding vertices under the two poses (mm)."""
    verts = _vertices(model)
    return float(np.mean(np.linalg.norm(gt.apply(verts) - pred.apply(verts), axis=1)))


def add_s(model: InstrumentModel, gt: RigidTransform, pred: RigidTransform) -> float:
    """
    Mean closest-vertex distance (mm): each ground-truth vertex is matched to
    the nearest predicted vertex.
    """
    verts = _vertices(model)
    gt_pts = gt.apply(verts)
    pred_pts = pred.apply(verts)
    nearest, _ = cKDTree(pred_pts).query(gt_pts, k=1)
    matched = np.linalg.norm(gt_pts - pred_pts, axis=1)
    return float(np.mean(np.minimum(nearest, matched)))


def add_s_bruteforce(model: InstrumentModel, gt: RigidTransform, pred: RigidTransform) -> float:
    """O(|M|^2) reference for add_s."""
    verts = _vertices(model)
    gt_pts = gt.apply(verts)
    pred_pts = pred.apply(verts)
    dists = np.linalg.norm(gt_pts[:, None, :] - pred_pts[None, :, :], axis=2)
    return float(np.mean(dists.min(axis=1)))


def reprojection_error_2d(points_gt_px: ArrayLike, points_pred_px: ArrayLike) -> float:
    """Mean Euclidean pixel distance."""
    gt = np.asarray(points_gt_px, dtype=np.float64).reshape(-1, 2)
    pred = np.asarray(points_pred_px, dtype=np.float64).reshape(-1, 2)
    if len(gt) != len(pred):
        raise ShapeMismatchError(f"{len(gt)} ground-truth points vs {len(pred)} predicted points")
    if len(gt) == 0:
        raise EmptyInputError("no points to compare")
    return float(np.mean(np.linalg.norm(gt - pred, axis=1)))


def translation_error(gt: RigidTransform, pred: RigidTransform) -> float:
    return float(np.linalg.norm(gt.translation - pred.translation))


def _angle_between(a: NDArray[np.float64], b: NDArray[np.float64]) -> float:
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b)))


def angular_error(gt: RigidTransform, pred: RigidTransform, symmetry: Optional[Symmetry] = None) -> float:
    """
    Rotation angle of R_gt^T R_pred in degrees. For an axially symmetric
    instrument, the angle between the ground-truth and predicted symmetry axes.
    """
    if symmetry is not None and symmetry.is_symmetric:
        axis = np.asarray(symmetry.axis)
        return _angle_between(gt.rotation @ axis, pred.rotation @ axis)
    rel = gt.rotation.T @ pred.rotation
    # atan2 form of arccos((trace - 1) / 2); stays accurate near 0 and 180 degrees.
    sin_part = 0.5 * math.sqrt(
        (rel[2, 1] - rel[1, 2]) ** 2 + (rel[0, 2] - rel[2, 0]) ** 2 + (rel[1, 0] - rel[0, 1]) ** 2
    )
    cos_part = 0.5 * (float(np.trace(rel)) - 1.0)
    return math.degrees(math.atan2(sin_part, cos_part))


@dataclass(frozen=True)
class PoseEvaluation:
    """Per-sample metric bundle."""
    add_mm: float
    add_s_mm: float
    reproj_err_px: float
    translation_err_mm: float
    angular_err_deg: float
    diameter_mm: float
    symmetric: bool
    passes: dict[str, bool] = field(default_factory=dict)
    sample_id: Optional[int] = None

    @property
    def headline_mm(self) -> float:
        """ADD-S for symmetric instruments, ADD otherwise."""
        return self.add_s_mm if self.symmetric else self.add_mm

    def passes_threshold(self, threshold: Threshold) -> bool:
        return self.headline_mm < threshold.value_mm(self.diameter_mm)

    def passes_2d(self, pixel_threshold: float = DEFAULT_PIXEL_THRESHOLD) -> bool:
        return self.reproj_err_px < pixel_threshold

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "add_mm": self.add_mm,
            "add_s_mm": self.add_s_mm,
            "reproj_px": self.reproj_err_px if math.isfinite(self.reproj_err_px) else None,
            "translation_mm": self.translation_err_mm,
            "angle_deg": self.angular_err_deg,
            "diameter_mm": self.diameter_mm,
            "symmetric": self.symmetric,
            "passes": dict(self.passes),
        }


def evaluate_pose(
    model: InstrumentModel,
    gt: RigidTransform,
    pred: RigidTransform,
    geom: Optional[AcquisitionGeometry] = None,
    thresholds: Sequence[Threshold] = DEFAULT_THRESHOLDS,
    gt_points_px: Optional[ArrayLike] = None,
    sample_id: Optional[int] = None,
) -> PoseEvaluation:
    """
    Full metric bundle. The 2D error compares the control points projected
    under both poses (or the stored ground-truth pixels when given); a
    predicted pose that puts points behind the source scores infinity.
    """
    reproj = math.nan
    if geom is not None:
        truth = gt_points_px if gt_points_px is not None else project_points(model.control_points, gt, geom)
        try:
            reproj = reprojection_error_2d(truth, project_points(model.control_points, pred, geom))
        except BehindSourceError:
            reproj = math.inf

    add_mm = add(model, gt, pred)
    add_s_mm = add_s(model, gt, pred)
    evaluation = PoseEvaluation(
        add_mm=add_mm,
        add_s_mm=add_s_mm,
        reproj_err_px=reproj,
        translation_err_mm=translation_error(gt, pred),
        angular_err_deg=angular_error(gt, pred, model.symmetry),
        diameter_mm=model.diameter_mm,
        symmetric=model.is_symmetric,
        sample_id=sample_id,
    )
    passes = {t.label: evaluation.passes_threshold(t) for t in thresholds}
    return replace(evaluation, passes=passes)
