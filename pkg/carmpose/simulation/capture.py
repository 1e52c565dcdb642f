"""
C-arm capture ranges and acquisition-geometry sampling.

Rotations are enumerated on a lattice (default 10 degree step), visiting
every lattice pose once per pass in a seeded order. SID, FOV and table
translations are drawn uniformly per sample from a stream seeded by
(seed, sample index), so any sample can be regenerated on its own.

Ranges (JSON based, data/capture/default_ranges.json):
    rotation r_x, r_y, r_z (deg), translation t_x, t_y, t_z (mm, center +/- spread),
    SID (mm), FOV diagonal (mm), rotation step (deg), image size (px)
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from carmpose.core.geometry import AcquisitionGeometry, RigidTransform
from carmpose.errors import InvalidRangesError

LOGGER = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
DEFAULT_RANGES_PATH = DATA_DIR / "capture" / "default_ranges.json"

CONSTRAINTS = ("full", "clinical")
CLINICAL_TILT_LIMIT_DEG = 45.0
CLINICAL_SPIN_RANGE_DEG = (-180.0, 180.0)

# Mixed into the lattice-order seed so it never collides with per-sample streams.
_LATTICE_STREAM = 0x1A77


@dataclass
class Range:
    """Closed interval [min, max]."""
    min: float = 0.0
    max: float = 0.0

    def check(self, name: str) -> None:
        if not (np.isfinite(self.min) and np.isfinite(self.max)):
            raise InvalidRangesError(f"{name} range must be finite")
        if self.min > self.max:
            raise InvalidRangesError(f"{name} range is inverted: {self.min:g} > {self.max:g}")

    def contains(self, value: float, tol: float = 1e-9) -> bool:
        return self.min - tol <= value <= self.max + tol

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.min, self.max)) if self.max > self.min else float(self.min)

    def clamp(self, lo: float, hi: float) -> "Range":
        return Range(max(self.min, lo), min(self.max, hi))

    @classmethod
    def around(cls, center: float, spread: float) -> "Range":
        return cls(center - spread, center + spread)

    @classmethod
    def from_dict(cls, data: dict | list, default: "Range") -> "Range":
        if isinstance(data, list):
            return cls(float(data[0]), float(data[1]))
        if "center" in data:
            return cls.around(float(data["center"]), float(data.get("spread", 0.0)))
        return cls(float(data.get("min", default.min)), float(data.get("max", default.max)))

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max}


@dataclass
class CaptureRanges:
    """Sampling ranges for the simulated C-arm and table."""
    r_x: Range = field(default_factory=lambda: Range(-45.0, 45.0))
    r_y: Range = field(default_factory=lambda: Range(-45.0, 45.0))
    r_z: Range = field(default_factory=lambda: Range(-45.0, 45.0))
    t_x: Range = field(default_factory=lambda: Range.around(0.0, 40.0))
    t_y: Range = field(default_factory=lambda: Range.around(0.0, 40.0))
    t_z: Range = field(default_factory=lambda: Range.around(700.0, 40.0))
    sid: Range = field(default_factory=lambda: Range(950.0, 1230.0))
    fov_diagonal: Range = field(default_factory=lambda: Range(156.0, 484.0))
    principal_shift_x: Range = field(default_factory=Range)
    principal_shift_y: Range = field(default_factory=Range)
    rotation_step: float = 10.0
    image_size: tuple[int, int] = (960, 742)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("r_x", "r_y", "r_z", "t_x", "t_y", "t_z", "sid", "fov_diagonal",
                     "principal_shift_x", "principal_shift_y"):
            getattr(self, name).check(name)
        if not self.rotation_step > 0:
            raise InvalidRangesError(f"rotation step must be positive, got {self.rotation_step}")
        if self.sid.min <= 0 or self.fov_diagonal.min <= 0:
            raise InvalidRangesError("SID and FOV ranges must be positive")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise InvalidRangesError(f"image size must be positive, got {self.image_size}")

    @classmethod
    def from_dict(cls, data: dict) -> "CaptureRanges":
        base = cls()
        kwargs = {}
        for name in ("r_x", "r_y", "r_z", "t_x", "t_y", "t_z", "sid", "fov_diagonal",
                     "principal_shift_x", "principal_shift_y"):
            if name in data:
                kwargs[name] = Range.from_dict(data[name], getattr(base, name))
        if "rotation_step" in data:
            kwargs["rotation_step"] = float(data["rotation_step"])
        if "image_size" in data:
            kwargs["image_size"] = (int(data["image_size"][0]), int(data["image_size"][1]))
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str | Path = DEFAULT_RANGES_PATH) -> "CaptureRanges":
        """Load from JSON; a missing file gives the built-in defaults."""
        path = Path(path)
        if not path.exists():
            return cls()
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        data = {name: getattr(self, name).to_dict()
                for name in ("r_x", "r_y", "r_z", "t_x", "t_y", "t_z", "sid", "fov_diagonal",
                             "principal_shift_x", "principal_shift_y")}
        data["rotation_step"] = self.rotation_step
        data["image_size"] = list(self.image_size)
        return data

    def to_json(self, path: str | Path) -> None:
        with open(Path(path), "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    def rotation_ranges(self, constraint: str = "full") -> tuple[Range, Range, Range]:
        if constraint not in CONSTRAINTS:
            raise InvalidRangesError(f"unknown constraint '{constraint}' (expected one of {', '.join(CONSTRAINTS)})")
        if constraint == "clinical":
            limit = CLINICAL_TILT_LIMIT_DEG
            return (self.r_x.clamp(-limit, limit), self.r_y.clamp(-limit, limit),
                    Range(*CLINICAL_SPIN_RANGE_DEG))
        return (self.r_x, self.r_y, self.r_z)


def _axis_values(rng: Range, step: float) -> np.ndarray:
    if rng.min > rng.max:
        return np.empty(0)
    values = np.arange(rng.min, rng.max + step / 2, step)
    values = values[values <= rng.max + 1e-9]
    # A full turn lists -180 and +180 once.
    if values.size > 1 and values[-1] - values[0] >= 360.0 - 1e-9:
        values = values[:-1]
    return values


def rotation_lattice(ranges: CaptureRanges, constraint: str = "full") -> np.ndarray:
    """(n, 3) lattice of (r_x, r_y, r_z) in degrees."""
    axes = [_axis_values(r, ranges.rotation_step) for r in ranges.rotation_ranges(constraint)]
    if any(a.size == 0 for a in axes):
        raise InvalidRangesError(f"empty rotation lattice for constraint '{constraint}'")
    return np.array(list(itertools.product(*axes)), dtype=np.float64)


@dataclass(frozen=True)
class CaptureDraw:
    """One sampled acquisition: lattice rotation plus continuous draws."""
    index: int
    rotation_deg: tuple[float, float, float]
    translation_mm: tuple[float, float, float]
    geometry: AcquisitionGeometry

    @property
    def pose(self) -> RigidTransform:
        """Object pose in the X-ray source frame."""
        return RigidTransform.from_euler(self.rotation_deg, self.translation_mm)


class LatticeOrder:
    """Per-pass seeded permutation of the rotation lattice."""

    def __init__(self, lattice: np.ndarray, seed: int):
        self.lattice = lattice
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def rotation(self, index: int) -> tuple[float, float, float]:
        size = len(self.lattice)
        pass_no, pos = divmod(index, size)
        order = self._cache.get(pass_no)
        if order is None:
            order = np.random.default_rng([self.seed, pass_no, _LATTICE_STREAM]).permutation(size)
            self._cache[pass_no] = order
        rx, ry, rz = self.lattice[order[pos]]
        return (float(rx), float(ry), float(rz))


def draw_geometry(
    ranges: CaptureRanges,
    rng: np.random.Generator,
) -> tuple[tuple[float, float, float], AcquisitionGeometry]:
    """Uniform draw of table translation and acquisition geometry."""
    translation = (ranges.t_x.sample(rng), ranges.t_y.sample(rng), ranges.t_z.sample(rng))
    sid = ranges.sid.sample(rng)
    fov = ranges.fov_diagonal.sample(rng)
    shift = (ranges.principal_shift_x.sample(rng), ranges.principal_shift_y.sample(rng))
    geometry = AcquisitionGeometry.from_fov(sid, fov, ranges.image_size, shift)
    return translation, geometry


def sample_geometry(
    ranges: CaptureRanges,
    seed: int,
    constraint: str = "full",
    start: int = 0,
) -> Iterator[CaptureDraw]:
    """Endless deterministic stream of captures."""
    order = LatticeOrder(rotation_lattice(ranges, constraint), seed)
    for index in itertools.count(start):
        rng = np.random.default_rng([seed, index])
        translation, geometry = draw_geometry(ranges, rng)
        yield CaptureDraw(index, order.rotation(index), translation, geometry)


def lattice_order(ranges: CaptureRanges, seed: int, constraint: str = "full") -> LatticeOrder:
    return LatticeOrder(rotation_lattice(ranges, constraint), seed)


def describe(ranges: CaptureRanges, constraint: str = "full") -> str:
    lattice = rotation_lattice(ranges, constraint)
    return (f"{len(lattice)} lattice poses, SID [{ranges.sid.min:g}, {ranges.sid.max:g}] mm, "
            f"FOV [{ranges.fov_diagonal.min:g}, {ranges.fov_diagonal.max:g}] mm")


def constraint_ok(rotation_deg: tuple[float, float, float], constraint: Optional[str]) -> bool:
    """True when the rotation honours the clinical tilt limits (always true for 'full')."""
    if constraint != "clinical":
        return True
    rx, ry, _ = rotation_deg
    return abs(rx) <= CLINICAL_TILT_LIMIT_DEG and abs(ry) <= CLINICAL_TILT_LIMIT_DEG
