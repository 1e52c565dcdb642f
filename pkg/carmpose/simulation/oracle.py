"""
Noisy-oracle predictions: what a perfectly localizing network would emit.

The ground-truth keypoints, jittered by Gaussian pixel noise, are written
into every slot the codec would assign them to, with high objectness.
Randomly chosen other slots carry low-objectness clutter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from carmpose.codec.grid import (
    OBJECTNESS_INDEX,
    VALUES_PER_PREDICTION,
    CellPrediction,
    CodecConfig,
    GridLayout,
    encode_targets,
    layout_for,
)
from carmpose.codec.records import PredictionRecord
from carmpose.errors import ConfigError
from carmpose.simulation.dataset import DatasetSample

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleConfig:
    """
    Planted slots get objectness logit `planted_logit + planted_gain * c`,
    where c is the slot's prior confidence, so the slot closest to the
    target center wins selection. Clutter logits are uniform in
    `background_logit`.
    """
    jitter_px: float = 0.0
    background_cells: int = 16
    planted_logit: float = 4.0
    planted_gain: float = 4.0
    background_logit: tuple[float, float] = (-8.0, -1.0)
    plant_signal: bool = True

    def __post_init__(self) -> None:
        if self.jitter_px < 0:
            raise ConfigError(f"jitter must be non-negative, got {self.jitter_px}")
        if self.background_cells < 0:
            raise ConfigError(f"background cell count must be non-negative, got {self.background_cells}")
        lo, hi = self.background_logit
        if lo > hi:
            raise ConfigError(f"background logit range is inverted: {lo} > {hi}")


def slot_from_flat(layout: GridLayout, flat: int) -> tuple[int, int, int, int]:
    """(scale, i, j, anchor) of a flat slot index; scales in order, then anchor, row, column."""
    for s_idx, scale in enumerate(layout.scales):
        if flat < scale.predictions:
            anchor, rest = divmod(flat, scale.cells)
            j, i = divmod(rest, scale.grid_w)
            return (s_idx, int(i), int(j), int(anchor))
        flat -= scale.predictions
    raise IndexError("flat slot index beyond the layout")


def oracle_predict(
    sample: DatasetSample,
    config: OracleConfig = OracleConfig(),
    seed: int = 0,
    codec: Optional[CodecConfig] = None,
    layout: Optional[GridLayout] = None,
) -> list[PredictionRecord]:
    """Planted and clutter records for one sample; deterministic in (seed, sample id)."""
    codec = codec or CodecConfig()
    layout = layout or layout_for(sample.geometry.image_size_px, codec)
    rng = np.random.default_rng([seed, sample.sample_id])

    points = np.array(sample.points_2d, dtype=np.float64)
    if config.jitter_px > 0:
        points = points + rng.normal(0.0, config.jitter_px, points.shape)

    records: list[PredictionRecord] = []
    taken: set[tuple[int, int, int, int]] = set()
    if config.plant_signal:
        for a in encode_targets(points, layout, codec).assignments:
            raw = a.encode_raw(config.planted_logit + config.planted_gain * a.confidence)
            records.append(PredictionRecord(sample.sample_id, CellPrediction(*a.index, raw=raw)))
            taken.add(a.index)
        if not taken:
            LOGGER.debug("Sample %d: jittered center left the image, nothing planted", sample.sample_id)

    wanted = min(config.background_cells, layout.total_predictions - len(taken))
    lo, hi = config.background_logit
    while wanted > 0:
        slot = slot_from_flat(layout, int(rng.integers(layout.total_predictions)))
        if slot in taken:
            continue
        raw = rng.normal(0.0, 1.0, VALUES_PER_PREDICTION)
        raw[OBJECTNESS_INDEX] = rng.uniform(lo, hi)
        records.append(PredictionRecord(sample.sample_id, CellPrediction(*slot, raw=raw)))
        taken.add(slot)
        wanted -= 1
    return records
