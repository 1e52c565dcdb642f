"""
Multi-scale grid keypoint codec.

Every (scale, cell, anchor) slot carries 19 raw values:
    [t_x0, t_y0, (t_x, t_y) x 8, objectness logit]
The center uses the scaled sigmoid 2*sigmoid(t) - 0.5 plus the cell corner;
the 8 box corners are plain additive offsets from the cell corner.

Cell (i, j): i is the column (x), j the row (y). Grid tensors are stored per
scale with shape (n_anchors, H, W, 19).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit, logit

from carmpose.errors import ConfigError, EmptyInputError, ShapeMismatchError

LOGGER = logging.getLogger(__name__)

VALUES_PER_PREDICTION = 19
NUM_KEYPOINTS = 9
OBJECTNESS_INDEX = 18
STRIDES = (8, 16, 32)
PAD_MULTIPLE = 32

DEFAULT_ANCHORS: tuple[tuple[tuple[float, float], ...], ...] = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)


@dataclass(frozen=True)
class CodecConfig:
    """Codec hyperparameters."""
    alpha: float = 2.0                # confidence sharpness
    beta: float = 0.2                 # cutoff as a fraction of the grid diagonal
    lambda_points: float = 1.0
    lambda_conf: float = 1.0
    anchor_ratio: float = 4.0
    distance_norm: str = "l1"         # l1 | l2
    normalized_confidence: bool = True
    anchors: tuple[tuple[tuple[float, float], ...], ...] = DEFAULT_ANCHORS
    padding: str = "bottom-right"     # bottom-right | center

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("alpha and beta must be positive")
        if self.lambda_points < 0 or self.lambda_conf < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.anchor_ratio <= 1.0:
            raise ConfigError("anchor ratio threshold must exceed 1")
        if self.distance_norm not in ("l1", "l2"):
            raise ConfigError(f"unknown distance norm '{self.distance_norm}'")
        if self.padding not in ("bottom-right", "center"):
            raise ConfigError(f"unknown padding mode '{self.padding}'")
        anchors = tuple(tuple((float(w), float(h)) for w, h in scale) for scale in self.anchors)
        if len(anchors) != len(STRIDES) or any(len(scale) == 0 for scale in anchors):
            raise ConfigError(f"expected anchors for {len(STRIDES)} scales")
        if any(w <= 0 or h <= 0 for scale in anchors for w, h in scale):
            raise ConfigError("anchor sizes must be positive")
        object.__setattr__(self, "anchors", anchors)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "lambda_points": self.lambda_points,
            "lambda_conf": self.lambda_conf,
            "anchor_ratio": self.anchor_ratio,
            "distance_norm": self.distance_norm,
            "normalized_confidence": self.normalized_confidence,
            "anchors": [[list(a) for a in scale] for scale in self.anchors],
            "padding": self.padding,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CodecConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "anchors" in known:
            known["anchors"] = tuple(tuple(tuple(a) for a in scale) for scale in known["anchors"])
        return cls(**known)

    @classmethod
    def from_json(cls, path: str | Path) -> "CodecConfig":
        path = Path(path)
        if not path.exists():
            return cls()
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


# ============================================================================
# Layout
# ============================================================================

@dataclass(frozen=True)
class ScaleLayout:
    stride: int
    grid_w: int
    grid_h: int
    anchors: tuple[tuple[float, float], ...]

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    @property
    def cells(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def predictions(self) -> int:
        return self.cells * self.n_anchors

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        return (self.n_anchors, self.grid_h, self.grid_w, VALUES_PER_PREDICTION)


@dataclass(frozen=True)
class GridLayout:
    """Per-scale grids over the input padded up to a multiple of 32."""
    image_size: tuple[int, int]
    padded_size: tuple[int, int]
    pad_offset: tuple[int, int]       # (left, top) padding in pixels
    scales: tuple[ScaleLayout, ...]

    @property
    def total_predictions(self) -> int:
        return sum(s.predictions for s in self.scales)

    def to_grid(self, points_px: ArrayLike, scale: int) -> NDArray[np.float64]:
        """Image pixels to grid units of one scale."""
        pts = np.asarray(points_px, dtype=np.float64)
        return (pts + np.asarray(self.pad_offset, dtype=np.float64)) / self.scales[scale].stride

    def to_pixels(self, points_grid: ArrayLike, scale: int) -> NDArray[np.float64]:
        """Grid units of one scale back to image pixels."""
        pts = np.asarray(points_grid, dtype=np.float64)
        return pts * self.scales[scale].stride - np.asarray(self.pad_offset, dtype=np.float64)

    def in_image(self, point_px: ArrayLike) -> bool:
        x, y = np.asarray(point_px, dtype=np.float64)
        width, height = self.image_size
        return bool(0.0 <= x < width and 0.0 <= y < height)


def make_grid_layout(
    image_size: tuple[int, int],
    anchors: Sequence[Sequence[tuple[float, float]]] = DEFAULT_ANCHORS,
    padding: str = "bottom-right",
) -> GridLayout:
    """
    Pad each dimension up to the next multiple of 32, then grid = padded / stride.
    640x480 with 3 anchors per scale gives 18,900 predictions.
    """
    width, height = int(image_size[0]), int(image_size[1])
    if width <= 0 or height <= 0:
        raise ConfigError(f"image size must be positive, got {image_size}")
    if len(anchors) != len(STRIDES):
        raise ConfigError(f"expected anchors for {len(STRIDES)} scales, got {len(anchors)}")

    padded_w = -(-width // PAD_MULTIPLE) * PAD_MULTIPLE
    padded_h = -(-height // PAD_MULTIPLE) * PAD_MULTIPLE
    if padding == "center":
        offset = ((padded_w - width) // 2, (padded_h - height) // 2)
    else:
        offset = (0, 0)

    scales = tuple(
        ScaleLayout(
            stride=stride,
            grid_w=padded_w // stride,
            grid_h=padded_h // stride,
            anchors=tuple((float(w), float(h)) for w, h in scale_anchors),
        )
        for stride, scale_anchors in zip(STRIDES, anchors)
    )
    return GridLayout((width, height), (padded_w, padded_h), offset, scales)


def layout_for(image_size: tuple[int, int], config: CodecConfig) -> GridLayout:
    return make_grid_layout(image_size, config.anchors, config.padding)


# ============================================================================
# Decoding and confidence
# ============================================================================

def decode_center(raw_logits: ArrayLike, cell: tuple[int, int]) -> NDArray[np.float64]:
    """(2 sigmoid(t) - 0.5) + cell corner, per axis; range (i - 0.5, i + 1.5)."""
    t = np.asarray(raw_logits, dtype=np.float64)
    return 2.0 * expit(t) - 0.5 + np.asarray(cell, dtype=np.float64)


def decode_corners(raw: ArrayLike, cell: tuple[int, int]) -> NDArray[np.float64]:
    """Unbounded additive offsets from the cell corner, (8, 2)."""
    return np.asarray(raw, dtype=np.float64).reshape(8, 2) + np.asarray(cell, dtype=np.float64)


def decode_keypoints(raw: ArrayLike, cell: tuple[int, int]) -> NDArray[np.float64]:
    """(9, 2) grid-space keypoints (center first) from the first 18 raw values."""
    values = np.asarray(raw, dtype=np.float64)
    return np.vstack((decode_center(values[0:2], cell), decode_corners(values[2:18], cell)))


def encode_center(center_grid: ArrayLike, cell: tuple[int, int]) -> NDArray[np.float64]:
    """Logits whose decoded center equals `center_grid` (must lie in the open decode range)."""
    rel = np.asarray(center_grid, dtype=np.float64) - np.asarray(cell, dtype=np.float64)
    return logit((rel + 0.5) / 2.0)


def confidence(
    distance: ArrayLike,
    grid: tuple[int, int],
    alpha: float = 2.0,
    beta: float = 0.2,
    normalized: bool = True,
) -> Union[float, NDArray[np.float64]]:
    """
    Distance-based cell confidence with cutoff d_T = beta * sqrt(W^2 + H^2).

    normalized: exp(-alpha D / d_T) inside the cutoff (so c(0) = 1);
    raw: exp(alpha (1 - D / d_T)), which exceeds 1 near D = 0.
    """
    d = np.asarray(distance, dtype=np.float64)
    d_t = beta * math.hypot(grid[0], grid[1])
    ratio = d / d_t
    if normalized:
        values = np.exp(-alpha * ratio)
    else:
        values = np.exp(alpha * (1.0 - ratio))
    out = np.where(d < d_t, values, 0.0)
    return float(out) if out.ndim == 0 else out


def keypoint_distance(
    predicted: ArrayLike,
    target: ArrayLike,
    norm: str = "l1",
) -> Union[float, NDArray[np.float64]]:
    """Mean over keypoints of the per-point distance; broadcasts over leading axes."""
    diff = np.asarray(predicted, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    if norm == "l1":
        per_point = np.abs(diff).sum(axis=-1)
    else:
        per_point = np.sqrt((diff ** 2).sum(axis=-1))
    out = per_point.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ============================================================================
# Prediction containers
# ============================================================================

@dataclass(frozen=True, eq=False)
class CellPrediction:
    """One (scale, cell, anchor) slot with raw and decoded values."""
    scale: int
    i: int
    j: int
    anchor: int
    raw: NDArray[np.float64]

    def __post_init__(self) -> None:
        raw = np.array(self.raw, dtype=np.float64).reshape(-1)
        if raw.size != VALUES_PER_PREDICTION:
            raise ShapeMismatchError(f"a prediction carries {VALUES_PER_PREDICTION} values, got {raw.size}")
        raw.flags.writeable = False
        object.__setattr__(self, "raw", raw)

    @property
    def index(self) -> tuple[int, int, int, int]:
        return (self.scale, self.i, self.j, self.anchor)

    @property
    def objectness_logit(self) -> float:
        return float(self.raw[OBJECTNESS_INDEX])

    @property
    def conf(self) -> float:
        return float(expit(self.raw[OBJECTNESS_INDEX]))

    @property
    def keypoints_grid(self) -> NDArray[np.float64]:
        return decode_keypoints(self.raw, (self.i, self.j))

    def keypoints_px(self, layout: GridLayout) -> NDArray[np.float64]:
        return layout.to_pixels(self.keypoints_grid, self.scale)


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    """Full network output: one (n_a, H, W, 19) tensor per scale."""
    layout: GridLayout
    tensors: tuple[NDArray[np.float64], ...]

    def __post_init__(self) -> None:
        if len(self.tensors) != len(self.layout.scales):
            raise ShapeMismatchError(f"expected {len(self.layout.scales)} scale tensors, got {len(self.tensors)}")
        frozen = []
        for tensor, scale in zip(self.tensors, self.layout.scales):
            arr = np.array(tensor, dtype=np.float64)
            if arr.shape != scale.tensor_shape:
                raise ShapeMismatchError(f"scale stride {scale.stride}: expected {scale.tensor_shape}, got {arr.shape}")
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "tensors", tuple(frozen))

    @classmethod
    def from_cells(
        cls,
        layout: GridLayout,
        cells: Iterable[CellPrediction],
        background_logit: float = -20.0,
    ) -> "PredictionGrid":
        """Grid with the given slots filled and every other slot at `background_logit`."""
        tensors = []
        for scale in layout.scales:
            arr = np.zeros(scale.tensor_shape)
            arr[..., OBJECTNESS_INDEX] = background_logit
            tensors.append(arr)
        for cell in cells:
            check_slot(layout, cell.scale, cell.i, cell.j, cell.anchor)
            tensors[cell.scale][cell.anchor, cell.j, cell.i] = cell.raw
        return cls(layout, tuple(tensors))

    def cell(self, scale: int, i: int, j: int, anchor: int) -> CellPrediction:
        check_slot(self.layout, scale, i, j, anchor)
        return CellPrediction(scale, i, j, anchor, self.tensors[scale][anchor, j, i])


def check_slot(layout: GridLayout, scale: int, i: int, j: int, anchor: int) -> None:
    if not 0 <= scale < len(layout.scales):
        raise ShapeMismatchError(f"scale index {scale} out of range")
    s = layout.scales[scale]
    if not (0 <= i < s.grid_w and 0 <= j < s.grid_h and 0 <= anchor < s.n_anchors):
        raise ShapeMismatchError(
            f"slot (i={i}, j={j}, anchor={anchor}) outside the {s.grid_w}x{s.grid_h}x{s.n_anchors} grid "
            f"of stride {s.stride}"
        )


# ============================================================================
# Target encoding
# ============================================================================

@dataclass(frozen=True, eq=False)
class Assignment:
    scale: int
    i: int
    j: int
    anchor: int
    target_grid: NDArray[np.float64]   # (9, 2) grid units of this scale
    confidence: float

    @property
    def index(self) -> tuple[int, int, int, int]:
        return (self.scale, self.i, self.j, self.anchor)

    def encode_raw(self, objectness_logit: float = 10.0) -> NDArray[np.float64]:
        """19 raw values that decode exactly to this assignment's targets."""
        cell = (self.i, self.j)
        center = encode_center(self.target_grid[0], cell)
        corners = (self.target_grid[1:] - np.asarray(cell, dtype=np.float64)).reshape(-1)
        return np.concatenate((center, corners, [objectness_logit]))


@dataclass(frozen=True)
class TargetEncoding:
    assignments: tuple[Assignment, ...] = field(default_factory=tuple)

    @property
    def is_empty(self) -> bool:
        return len(self.assignments) == 0

    def __len__(self) -> int:
        return len(self.assignments)


def anchor_ratio(extent: tuple[float, float], anchor: tuple[float, float]) -> float:
    """Worst per-axis size ratio between the target extent and an anchor."""
    w, h = extent
    aw, ah = anchor
    return max(w / aw, aw / w, h / ah, ah / h)


def _participating_cells(center_grid: NDArray[np.float64], scale: ScaleLayout) -> list[tuple[int, int]]:
    """Own cell plus the x and y neighbours nearest the center's fractional position."""
    i, j = int(np.floor(center_grid[0])), int(np.floor(center_grid[1]))
    fx, fy = center_grid[0] - i, center_grid[1] - j
    cells = [(i, j)]
    if fx < 0.5 and i - 1 >= 0:
        cells.append((i - 1, j))
    elif fx > 0.5 and i + 1 < scale.grid_w:
        cells.append((i + 1, j))
    if fy < 0.5 and j - 1 >= 0:
        cells.append((i, j - 1))
    elif fy > 0.5 and j + 1 < scale.grid_h:
        cells.append((i, j + 1))
    return cells


def encode_targets(
    gt_points_px: ArrayLike,
    layout: GridLayout,
    config: Optional[CodecConfig] = None,
) -> TargetEncoding:
    """
    Assign a 9-keypoint target (center first) to grid slots.

    An anchor matches when the worst size ratio against the keypoint extents
    is below the threshold; when no anchor of any scale matches, the single
    best anchor is used. A center outside the image yields an empty encoding.
    """
    config = config or CodecConfig()
    points = np.asarray(gt_points_px, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
    if not layout.in_image(points[0]):
        LOGGER.debug("Target center %s outside the image, no assignment", points[0])
        return TargetEncoding()

    span = points.max(axis=0) - points.min(axis=0)
    extent = (max(float(span[0]), 1e-6), max(float(span[1]), 1e-6))

    matched: list[tuple[int, int]] = []
    best: Optional[tuple[float, int, int]] = None
    for s_idx, scale in enumerate(layout.scales):
        for a_idx, anchor in enumerate(scale.anchors):
            ratio = anchor_ratio(extent, anchor)
            if ratio < config.anchor_ratio:
                matched.append((s_idx, a_idx))
            if best is None or ratio < best[0]:
                best = (ratio, s_idx, a_idx)
    if not matched and best is not None:
        matched.append((best[1], best[2]))

    assignments = []
    for s_idx, a_idx in matched:
        scale = layout.scales[s_idx]
        target = layout.to_grid(points, s_idx)
        for i, j in _participating_cells(target[0], scale):
            distance = keypoint_distance(np.array([[i + 0.5, j + 0.5]]), target[:1], config.distance_norm)
            conf = confidence(distance, (scale.grid_w, scale.grid_h), config.alpha, config.beta,
                              normalized=config.normalized_confidence)
            assignments.append(Assignment(s_idx, i, j, a_idx, target, float(conf)))
    assignments.sort(key=lambda a: a.index)
    return TargetEncoding(tuple(assignments))


# ============================================================================
# Selection
# ============================================================================

def _iter_grid_best(grid: PredictionGrid) -> Optional[tuple[float, tuple[int, int, int, int]]]:
    best: Optional[tuple[float, tuple[int, int, int, int]]] = None
    for s_idx, tensor in enumerate(grid.tensors):
        # (n_a, H, W) -> (W, H, n_a): flat order follows (i, j, anchor).
        logits = np.transpose(tensor[..., OBJECTNESS_INDEX], (2, 1, 0))
        flat = int(np.argmax(logits))
        value = float(logits.reshape(-1)[flat])
        if best is None or value > best[0]:
            i, j, a = np.unravel_index(flat, logits.shape)
            best = (value, (s_idx, int(i), int(j), int(a)))
    return best


def select_best(
    predictions: Union[PredictionGrid, Sequence[CellPrediction]],
    layout: Optional[GridLayout] = None,
) -> CellPrediction:
    """
    Slot with the highest objectness; ties go to the lowest
    (scale, i, j, anchor). Pixel keypoints come from `keypoints_px(layout)`.
    """
    if isinstance(predictions, PredictionGrid):
        best = _iter_grid_best(predictions)
        if best is None:
            raise EmptyInputError("no predictions to select from")
        return predictions.cell(*best[1])

    cells = list(predictions)
    if not cells:
        raise EmptyInputError("no predictions to select from")
    if layout is not None:
        for cell in cells:
            check_slot(layout, *cell.index)
    return min(cells, key=lambda c: (-c.objectness_logit, c.index))


# ============================================================================
# Loss
# ============================================================================

@dataclass(frozen=True)
class LossBreakdown:
    points: float
    conf: float
    total: float
    lambda_points: float
    lambda_conf: float


def bce_with_logits(logits: NDArray[np.float64], targets: NDArray[np.float64]) -> NDArray[np.float64]:
    """Elementwise binary cross-entropy on logits, stable for large |x|."""
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def compute_loss(
    pred: PredictionGrid,
    target: TargetEncoding,
    lambda_points: Optional[float] = None,
    lambda_conf: Optional[float] = None,
    config: Optional[CodecConfig] = None,
) -> LossBreakdown:
    """
    L_points: mean |decoded - target| over the 18 coordinates of assigned slots.
    L_conf: mean BCE over all slots; assigned slots target the confidence of
    their decoded keypoints, all others target 0.
    """
    config = config or CodecConfig()
    lp = config.lambda_points if lambda_points is None else lambda_points
    lc = config.lambda_conf if lambda_conf is None else lambda_conf
    layout = pred.layout

    conf_targets = [np.zeros(s.tensor_shape[:3]) for s in layout.scales]
    point_terms: list[float] = []
    for a in target.assignments:
        check_slot(layout, a.scale, a.i, a.j, a.anchor)
        if a.target_grid.shape != (NUM_KEYPOINTS, 2):
            raise ShapeMismatchError(f"assignment target must be (9, 2), got {a.target_grid.shape}")
        raw = pred.tensors[a.scale][a.anchor, a.j, a.i]
        decoded = decode_keypoints(raw, (a.i, a.j))
        point_terms.extend(np.abs(decoded - a.target_grid).reshape(-1).tolist())
        scale = layout.scales[a.scale]
        distance = keypoint_distance(decoded, a.target_grid, config.distance_norm)
        conf_targets[a.scale][a.anchor, a.j, a.i] = confidence(
            distance, (scale.grid_w, scale.grid_h), config.alpha, config.beta,
            normalized=config.normalized_confidence,
        )

    l_points = math.fsum(point_terms) / len(point_terms) if point_terms else 0.0
    conf_terms: list[float] = []
    for tensor, tgt in zip(pred.tensors, conf_targets):
        conf_terms.extend(bce_with_logits(tensor[..., OBJECTNESS_INDEX], tgt).reshape(-1).tolist())
    l_conf = math.fsum(conf_terms) / layout.total_predictions
    return LossBreakdown(l_points, l_conf, lp * l_points + lc * l_conf, lp, lc)
