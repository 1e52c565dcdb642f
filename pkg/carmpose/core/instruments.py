"""
Instrument models: vertex sets, bounding-box control points, diameter and
symmetry.

Built-in instruments are generated procedurally from JSON specs under
data/instruments/ (cube and screw); arbitrary meshes load from an explicit
vertex list.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.distance import pdist

from carmpose.errors import ConfigError, DataError, EmptyInputError

LOGGER = logging.getLogger(__name__)

DATA_DIR = Path(__file__).resolve().parents[2] / "data"
INSTRUMENT_DIR = DATA_DIR / "instruments"

BUILTIN_INSTRUMENTS = ("cube", "screw")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned bounding box in the object frame."""
    min_x: float = 0.0
    min_y: float = 0.0
    min_z: float = 0.0
    max_x: float = 0.0
    max_y: float = 0.0
    max_z: float = 0.0

    @property
    def center(self) -> NDArray[np.float64]:
        return np.array([
            (self.min_x + self.max_x) / 2,
            (self.min_y + self.max_y) / 2,
            (self.min_z + self.max_z) / 2,
        ])

    @property
    def size(self) -> NDArray[np.float64]:
        return np.array([
            self.max_x - self.min_x,
            self.max_y - self.min_y,
            self.max_z - self.min_z,
        ])

    @classmethod
    def from_points(cls, points: NDArray) -> "BoundingBox":
        if len(points) == 0:
            raise EmptyInputError("cannot bound an empty point set")
        return cls(
            min_x=float(points[:, 0].min()),
            min_y=float(points[:, 1].min()),
            min_z=float(points[:, 2].min()),
            max_x=float(points[:, 0].max()),
            max_y=float(points[:, 1].max()),
            max_z=float(points[:, 2].max()),
        )

    def corners(self) -> NDArray[np.float64]:
        """
        The 8 corners, x varying slowest:
        (-,-,-), (-,-,+), (-,+,-), (-,+,+), (+,-,-), (+,-,+), (+,+,-), (+,+,+)
        """
        xs = (self.min_x, self.max_x)
        ys = (self.min_y, self.max_y)
        zs = (self.min_z, self.max_z)
        return np.array([(x, y, z) for x in xs for y in ys for z in zs], dtype=np.float64)

    def contains(self, points: NDArray, tol: float = 1e-9) -> bool:
        lo = np.array([self.min_x, self.min_y, self.min_z]) - tol
        hi = np.array([self.max_x, self.max_y, self.max_z]) + tol
        return bool(np.all((points >= lo) & (points <= hi)))


@dataclass(frozen=True)
class Symmetry:
    """Either asymmetric or rotationally symmetric about an axis."""
    kind: str = "asymmetric"
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self) -> None:
        if self.kind not in ("asymmetric", "continuous-axis"):
            raise ConfigError(f"unknown symmetry kind '{self.kind}'")
        norm = float(np.linalg.norm(self.axis))
        if norm == 0.0:
            raise ConfigError("symmetry axis must be non-zero")
        object.__setattr__(self, "axis", tuple(float(a) / norm for a in self.axis))

    @property
    def is_symmetric(self) -> bool:
        return self.kind == "continuous-axis"

    @classmethod
    def continuous(cls, axis: ArrayLike = (0.0, 0.0, 1.0)) -> "Symmetry":
        return cls("continuous-axis", tuple(np.asarray(axis, dtype=float)))

    def to_dict(self) -> dict:
        if not self.is_symmetric:
            return {"kind": self.kind}
        return {"kind": self.kind, "axis": list(self.axis)}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "Symmetry":
        if not data:
            return cls()
        return cls(data.get("kind", "asymmetric"), tuple(data.get("axis", (0.0, 0.0, 1.0))))


@dataclass(frozen=True, eq=False)
class InstrumentModel:
    """
    Rigid instrument: vertex set M, 9 control points and diameter d.

    `nominal_diameter_mm` overrides the measured diameter when the instrument
    is specified by a catalogue size. Otherwise d is the maximum pairwise
    vertex distance, which bounds every vertex pair by construction.

    The built-in cube is the one override allowed below the vertex span: its
    catalogue size is the 30 mm edge, so d = 30 while its corners are
    30·√3 ≈ 51.96 mm apart. Screw and mesh specs that state a diameter must
    cover every vertex pair (see `_check_stated_diameter`).
    """
    name: str
    vertices: NDArray[np.float64]
    symmetry: Symmetry = field(default_factory=Symmetry)
    nominal_diameter_mm: Optional[float] = None

    def __post_init__(self) -> None:
        verts = np.array(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise DataError(f"instrument '{self.name}': vertices must have shape (N, 3), got {verts.shape}")
        if len(verts) == 0:
            raise EmptyInputError(f"instrument '{self.name}' has no vertices")
        if len(verts) < 4:
            raise DataError(f"instrument '{self.name}' needs at least 4 vertices, got {len(verts)}")
        if not np.all(np.isfinite(verts)):
            raise DataError(f"instrument '{self.name}' has non-finite vertices")
        verts.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        if self.nominal_diameter_mm is not None and not self.nominal_diameter_mm > 0:
            raise ConfigError(f"instrument '{self.name}': diameter must be positive")
        object.__setattr__(self, "_max_vertex_distance", float(pdist(verts).max()))
        if self._max_vertex_distance <= 0:
            raise DataError(f"instrument '{self.name}' vertices are all coincident")

    @property
    def bounding_box(self) -> BoundingBox:
        return BoundingBox.from_points(self.vertices)

    @property
    def control_points(self) -> NDArray[np.float64]:
        """(9, 3): bounding-box center followed by its 8 corners."""
        box = self.bounding_box
        return np.vstack((box.center, box.corners()))

    @property
    def max_vertex_distance(self) -> float:
        return self._max_vertex_distance

    @property
    def diameter_mm(self) -> float:
        if self.nominal_diameter_mm is not None:
            return float(self.nominal_diameter_mm)
        return self._max_vertex_distance

    @property
    def is_symmetric(self) -> bool:
        return self.symmetry.is_symmetric

    def __repr__(self) -> str:
        return (f"InstrumentModel(name={self.name!r}, vertices={len(self.vertices)}, "
                f"d={self.diameter_mm:.3f} mm, symmetry={self.symmetry.kind})")


# ============================================================================
# Procedural builders
# ============================================================================

def cube_vertices(size_mm: float = 30.0, points_per_edge: int = 5) -> NDArray[np.float64]:
    """Surface lattice of an origin-centered cube (corners included)."""
    if size_mm <= 0 or points_per_edge < 2:
        raise ConfigError("cube needs a positive size and at least 2 points per edge")
    ticks = np.linspace(-size_mm / 2, size_mm / 2, points_per_edge)
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    on_surface = np.any(np.isin(grid, (ticks[0], ticks[-1])), axis=1)
    return grid[on_surface]


def screw_vertices(
    length_mm: float = 34.3,
    head_diameter_mm: float = 6.88,
    head_height_mm: float = 3.0,
    shaft_diameter_mm: float = 3.5,
    tip_length_mm: float = 3.0,
    rings: int = 12,
    segments: int = 12,
) -> NDArray[np.float64]:
    """
    Screw along +z: tip point at the origin, conical tip, cylindrical shaft
    and a spherical-cap head whose apex sits at z = length.
    """
    if not (length_mm > head_height_mm + tip_length_mm > 0):
        raise ConfigError("screw length must exceed head height plus tip length")
    if shaft_diameter_mm > head_diameter_mm:
        raise ConfigError("screw shaft cannot be wider than its head")
    if rings < 2 or segments < 3:
        raise ConfigError("screw needs at least 2 rings and 3 segments")

    angles = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    circle = np.column_stack((np.cos(angles), np.sin(angles)))
    shaft_r = shaft_diameter_mm / 2
    head_r = head_diameter_mm / 2
    head_base = length_mm - head_height_mm

    def ring(radius: float, z: float) -> NDArray[np.float64]:
        return np.column_stack((radius * circle, np.full(segments, z)))

    parts = [np.array([[0.0, 0.0, 0.0]])]
    for z in np.linspace(0.0, tip_length_mm, 3)[1:]:
        parts.append(ring(shaft_r * z / tip_length_mm, z))
    for z in np.linspace(tip_length_mm, head_base, rings)[1:]:
        parts.append(ring(shaft_r, z))

    # Spherical cap through the head rim and the apex.
    cap_radius = (head_r ** 2 + head_height_mm ** 2) / (2 * head_height_mm)
    cap_center = length_mm - cap_radius
    polar_max = np.arcsin(min(head_r / cap_radius, 1.0))
    if head_height_mm > cap_radius:
        polar_max = np.pi - polar_max
    for polar in np.linspace(polar_max, 0.0, 4, endpoint=False):
        parts.append(ring(cap_radius * np.sin(polar), cap_center + cap_radius * np.cos(polar)))
    parts.append(np.array([[0.0, 0.0, length_mm]]))
    return np.vstack(parts)


def _check_stated_diameter(model: InstrumentModel) -> InstrumentModel:
    stated = model.nominal_diameter_mm
    if stated is not None and stated < model.max_vertex_distance * (1.0 - 1e-9):
        raise ConfigError(f"instrument '{model.name}': diameter_mm {stated:g} is below its vertex span "
                          f"{model.max_vertex_distance:.3f} mm")
    return model


def build_cube(spec: dict) -> InstrumentModel:
    """Cube lattice; d defaults to the edge length, not the corner diagonal."""
    size = float(spec.get("size_mm", 30.0))
    return InstrumentModel(
        name=spec.get("name", "cube"),
        vertices=cube_vertices(size, int(spec.get("points_per_edge", 5))),
        symmetry=Symmetry.from_dict(spec.get("symmetry")),
        nominal_diameter_mm=spec.get("diameter_mm", size),
    )


def build_screw(spec: dict) -> InstrumentModel:
    vertices = screw_vertices(
        length_mm=float(spec.get("length_mm", 34.3)),
        head_diameter_mm=float(spec.get("head_diameter_mm", 6.88)),
        head_height_mm=float(spec.get("head_height_mm", 3.0)),
        shaft_diameter_mm=float(spec.get("shaft_diameter_mm", 3.5)),
        tip_length_mm=float(spec.get("tip_length_mm", 3.0)),
        rings=int(spec.get("rings", 12)),
        segments=int(spec.get("segments", 12)),
    )
    return _check_stated_diameter(InstrumentModel(
        name=spec.get("name", "screw"),
        vertices=vertices,
        symmetry=Symmetry.from_dict(spec.get("symmetry", {"kind": "continuous-axis", "axis": [0, 0, 1]})),
        nominal_diameter_mm=spec.get("diameter_mm"),
    ))


def build_mesh(spec: dict) -> InstrumentModel:
    if "vertices" not in spec:
        raise ConfigError("mesh instrument spec needs a 'vertices' list")
    return _check_stated_diameter(InstrumentModel(
        name=spec.get("name", "mesh"),
        vertices=np.asarray(spec["vertices"], dtype=np.float64),
        symmetry=Symmetry.from_dict(spec.get("symmetry")),
        nominal_diameter_mm=spec.get("diameter_mm"),
    ))


_BUILDERS = {"cube": build_cube, "screw": build_screw, "mesh": build_mesh}


def instrument_from_dict(spec: dict) -> InstrumentModel:
    kind = spec.get("kind", "mesh")
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ConfigError(f"unknown instrument kind '{kind}' (expected one of {', '.join(_BUILDERS)})") from None
    return builder(spec)


def load_instrument(name_or_path: str | Path) -> InstrumentModel:
    """
    Built-in name ('cube', 'screw') or path to an instrument JSON file.
    A built-in whose data file is missing falls back to the builder defaults.
    """
    text = str(name_or_path)
    if text in BUILTIN_INSTRUMENTS:
        path = INSTRUMENT_DIR / f"{text}.json"
        if not path.exists():
            LOGGER.debug("No data file for built-in '%s', using defaults", text)
            return instrument_from_dict({"kind": text, "name": text})
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ConfigError(f"instrument file not found: {path}")

    try:
        with open(path, "r", encoding="utf-8") as f:
            spec = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid instrument JSON in {path}: {exc}") from exc
    model = instrument_from_dict(spec)
    LOGGER.debug("Loaded %r from %s", model, path)
    return model
