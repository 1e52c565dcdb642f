"""
Simulated calibration hardware: the fiducial board seen by the optical
camera, the camera mount on the detector, and the dome used to link the
optical and X-ray frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from carmpose.core.geometry import AcquisitionGeometry, RigidTransform, project_points
from carmpose.errors import DegenerateConfigurationError, FiducialsOutOfFrameError, InvalidRangesError

LOGGER = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def board_fiducials(cols: int = 6, rows: int = 4, square_mm: float = 25.0) -> NDArray[np.float64]:
    """Inner-corner grid of a planar board (z = 0), centered on the board origin, row-major."""
    if cols < 1 or rows < 1 or square_mm <= 0:
        raise InvalidRangesError(f"invalid board layout {cols}x{rows} @ {square_mm} mm")
    xs = (np.arange(cols) - (cols - 1) / 2.0) * square_mm
    ys = (np.arange(rows) - (rows - 1) / 2.0) * square_mm
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack((gx.ravel(), gy.ravel(), np.zeros(gx.size)))


def default_optical_camera() -> AcquisitionGeometry:
    """6 mm lens on a 1280x1024 sensor with 5 um pixels."""
    return AcquisitionGeometry(
        focal_length_mm=6.0,
        pixel_density_u=200.0,
        pixel_density_v=200.0,
        principal_offset_mm=(3.2, 2.56),
        image_size_px=(1280, 1024),
    )


@dataclass
class RigConfig:
    """
    Physical layout of the capture rig.

    The object sits on the fiducial board at `object_offset_mm` (board frame).
    The optical camera is fixed to the detector, looking back at the source,
    displaced laterally by `mount_offset_mm` from the detector center.
    """
    object_offset_mm: tuple[float, float, float] = (0.0, 0.0, 20.0)
    mount_offset_mm: tuple[float, float] = (40.0, 0.0)
    board_cols: int = 6
    board_rows: int = 4
    square_mm: float = 25.0
    camera: AcquisitionGeometry = field(default_factory=default_optical_camera)

    @property
    def fiducials(self) -> NDArray[np.float64]:
        return board_fiducials(self.board_cols, self.board_rows, self.square_mm)

    def object_to_board(self) -> RigidTransform:
        return RigidTransform(np.eye(3), self.object_offset_mm)

    def camera_to_source(self, sid_mm: float) -> RigidTransform:
        """Camera at the detector plane, its optical axis pointing toward the source."""
        flip = np.diag([1.0, -1.0, -1.0])
        return RigidTransform(flip, (self.mount_offset_mm[0], self.mount_offset_mm[1], sid_mm))

    def to_dict(self) -> dict:
        return {
            "object_offset_mm": list(self.object_offset_mm),
            "mount_offset_mm": list(self.mount_offset_mm),
            "board_cols": self.board_cols,
            "board_rows": self.board_rows,
            "square_mm": self.square_mm,
            "camera": self.camera.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RigConfig":
        base = cls()
        return cls(
            object_offset_mm=tuple(float(v) for v in data.get("object_offset_mm", base.object_offset_mm)),
            mount_offset_mm=tuple(float(v) for v in data.get("mount_offset_mm", base.mount_offset_mm)),
            board_cols=int(data.get("board_cols", base.board_cols)),
            board_rows=int(data.get("board_rows", base.board_rows)),
            square_mm=float(data.get("square_mm", base.square_mm)),
            camera=AcquisitionGeometry.from_dict(data["camera"]) if "camera" in data else base.camera,
        )


# ============================================================================
# Board detection
# ============================================================================

def simulate_fiducial_board(
    board: NDArray[np.float64],
    camera: AcquisitionGeometry,
    pose: RigidTransform,
    noise_px: float = 0.0,
    seed: SeedLike = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Detected fiducial pixels and their board coordinates.

    `pose` maps board coordinates into the camera frame. Fiducials behind the
    camera or outside the optical frame are dropped; detections carry
    isotropic Gaussian pixel noise.
    """
    board = np.asarray(board, dtype=np.float64).reshape(-1, 3)
    in_front = pose.apply(board)[:, 2] > 0.0
    if not np.any(in_front):
        raise FiducialsOutOfFrameError("all fiducials are behind the camera")

    visible = board[in_front]
    pixels = project_points(visible, pose, camera)
    if noise_px > 0:
        pixels = pixels + _rng(seed).normal(0.0, noise_px, pixels.shape)
    inside = camera.contains(pixels)
    if not np.any(inside):
        raise FiducialsOutOfFrameError("all fiducials fall outside the optical frame")

    LOGGER.debug("Board: %d of %d fiducials detected", int(inside.sum()), len(board))
    return pixels[inside], visible[inside]


# ============================================================================
# Optical <-> X-ray link
# ============================================================================

def dome_points(n_points: int, radius_mm: float = 80.0, rng: SeedLike = None) -> NDArray[np.float64]:
    """Random points on the upper half of a sphere (z >= 0)."""
    gen = _rng(rng)
    dirs = gen.normal(size=(n_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs[:, 2] = np.abs(dirs[:, 2])
    return radius_mm * dirs


def simulate_dome_link(
    n_points: int,
    true_link: RigidTransform,
    noise_mm: float = 0.0,
    seed: SeedLike = None,
    collinear: bool = False,
    radius_mm: float = 80.0,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Paired dome reconstructions: points in the optical frame and the same
    points in the X-ray frame (true_link applied, plus Gaussian noise in mm).

    `collinear` lays the points on one line, a configuration registration
    cannot resolve.
    """
    if n_points < 3:
        raise DegenerateConfigurationError(f"a dome link needs at least 3 points, got {n_points}")
    gen = _rng(seed)
    if collinear:
        t = np.linspace(-radius_mm, radius_mm, n_points)
        optical = np.column_stack((t, 0.5 * t, np.full(n_points, 10.0)))
    else:
        optical = dome_points(n_points, radius_mm, gen)
    xray = true_link.apply(optical)
    if noise_mm > 0:
        xray = xray + gen.normal(0.0, noise_mm, xray.shape)
    return optical, xray


def random_link(rng: SeedLike = None, max_translation_mm: float = 200.0) -> RigidTransform:
    """Uniformly random rotation with a bounded translation."""
    gen = _rng(rng)
    rotation = Rotation.random(random_state=gen).as_matrix()
    return RigidTransform(rotation, gen.uniform(-max_translation_mm, max_translation_mm, 3))
