"""
Pinhole X-ray acquisition model and rigid-transform algebra.

Features:
- Per-frame intrinsics (SID, pixel densities, principal point) with the
  detector's negative v-axis focal entry
- SE(3) transforms: compose, invert, Euler/rotation-vector conversion
- Projection to pixels and back-projection at known depth

Units: millimetres for lengths, pixels for image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from carmpose.errors import BehindSourceError, InvalidGeometryError, InvalidTransformError

ORTHONORMAL_TOL = 1e-9


def _frozen(values: ArrayLike, shape: tuple[int, ...]) -> NDArray[np.float64]:
    arr = np.array(values, dtype=np.float64).reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Intrinsic X-ray parameters of one frame."""
    focal_length_mm: float                    # SID
    pixel_density_u: float                    # px / mm, horizontal
    pixel_density_v: float                    # px / mm, vertical
    principal_offset_mm: tuple[float, float]  # (x_0, y_0)
    image_size_px: tuple[int, int]            # (W_img, H_img)

    def __post_init__(self) -> None:
        for name, value in (
            ("focal_length_mm", self.focal_length_mm),
            ("pixel_density_u", self.pixel_density_u),
            ("pixel_density_v", self.pixel_density_v),
        ):
            if not np.isfinite(value) or value <= 0:
                raise InvalidGeometryError(f"{name} must be positive, got {value}")
        width, height = self.image_size_px
        if width <= 0 or height <= 0:
            raise InvalidGeometryError(f"image size must be positive, got {self.image_size_px}")
        if not all(np.isfinite(self.principal_offset_mm)):
            raise InvalidGeometryError("principal offset must be finite")
        object.__setattr__(self, "principal_offset_mm",
                           (float(self.principal_offset_mm[0]), float(self.principal_offset_mm[1])))
        object.__setattr__(self, "image_size_px", (int(width), int(height)))

    @classmethod
    def from_fov(
        cls,
        sid_mm: float,
        fov_diagonal_mm: float,
        image_size_px: tuple[int, int] = (960, 742),
        principal_shift_mm: tuple[float, float] = (0.0, 0.0),
    ) -> "AcquisitionGeometry":
        """
        Geometry whose pixel grid spans the given detector FOV diagonal.
        The principal point sits at the detector center plus a signed shift
        (+u rightward, +v downward).
        """
        if fov_diagonal_mm <= 0:
            raise InvalidGeometryError(f"FOV diagonal must be positive, got {fov_diagonal_mm}")
        width, height = image_size_px
        density = float(np.hypot(width, height)) / fov_diagonal_mm
        x_0 = 0.5 * width / density + principal_shift_mm[0]
        y_0 = 0.5 * height / density + principal_shift_mm[1]
        return cls(
            focal_length_mm=sid_mm,
            pixel_density_u=density,
            pixel_density_v=density,
            principal_offset_mm=(x_0, y_0),
            image_size_px=(width, height),
        )

    @property
    def intrinsics(self) -> NDArray[np.float64]:
        return build_intrinsics(self)

    @property
    def fov_diagonal_mm(self) -> float:
        width, height = self.image_size_px
        return float(np.hypot(width / self.pixel_density_u, height / self.pixel_density_v))

    def contains(self, pixels: NDArray[np.float64]) -> NDArray[np.bool_]:
        """Mask of pixels inside the image."""
        width, height = self.image_size_px
        pixels = np.atleast_2d(pixels)
        return (
            (pixels[:, 0] >= 0.0) & (pixels[:, 0] <= width)
            & (pixels[:, 1] >= 0.0) & (pixels[:, 1] <= height)
        )

    def to_dict(self) -> dict:
        return {
            "f": self.focal_length_mm,
            "k_u": self.pixel_density_u,
            "k_v": self.pixel_density_v,
            "x_0": self.principal_offset_mm[0],
            "y_0": self.principal_offset_mm[1],
            "W_img": self.image_size_px[0],
            "H_img": self.image_size_px[1],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AcquisitionGeometry":
        return cls(
            focal_length_mm=float(data["f"]),
            pixel_density_u=float(data["k_u"]),
            pixel_density_v=float(data["k_v"]),
            principal_offset_mm=(float(data["x_0"]), float(data["y_0"])),
            image_size_px=(int(data["W_img"]), int(data["H_img"])),
        )


def build_intrinsics(geom: AcquisitionGeometry) -> NDArray[np.float64]:
    """
    Intrinsic matrix with the detector's flipped v-axis:
        [[k_u f, 0, k_u x_0], [0, -k_v f, k_v y_0], [0, 0, 1]]
    """
    f = geom.focal_length_mm
    k_u, k_v = geom.pixel_density_u, geom.pixel_density_v
    x_0, y_0 = geom.principal_offset_mm
    return np.array([
        [k_u * f, 0.0, k_u * x_0],
        [0.0, -k_v * f, k_v * y_0],
        [0.0, 0.0, 1.0],
    ], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation in SE(3): x -> R x + C."""
    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        rotation = _frozen(self.rotation, (3, 3))
        translation = _frozen(self.translation, (3,))
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidTransformError("transform contains non-finite values")
        deviation = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        if deviation > ORTHONORMAL_TOL:
            raise InvalidTransformError(f"rotation is not orthonormal (deviation {deviation:.3g})")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise InvalidTransformError(f"rotation determinant is {det:.12g}, expected +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_euler(
        cls,
        angles_deg: Sequence[float],
        translation: ArrayLike = (0.0, 0.0, 0.0),
        order: str = "xyz",
    ) -> "RigidTransform":
        """Extrinsic Euler angles (degrees) in the given axis order."""
        matrix = Rotation.from_euler(order, angles_deg, degrees=True).as_matrix()
        return cls(matrix, translation)

    @classmethod
    def from_rotvec(cls, rotvec: ArrayLike, translation: ArrayLike = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "RigidTransform":
        """From a 4x4 homogeneous matrix."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidTransformError(f"expected a 4x4 matrix, got shape {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_unchecked(cls, rotation: ArrayLike, translation: ArrayLike) -> "RigidTransform":
        """Project a near-rotation onto SO(3) before building the transform."""
        return cls(orthonormalize(np.asarray(rotation, dtype=np.float64)), translation)

    def as_matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_euler(self, order: str = "xyz") -> NDArray[np.float64]:
        return Rotation.from_matrix(self.rotation).as_euler(order, degrees=True)

    def as_rotvec(self) -> NDArray[np.float64]:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform (N, 3) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def is_close(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return bool(
            np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __repr__(self) -> str:
        angles = np.round(self.as_euler(), 4)
        return f"RigidTransform(euler_xyz_deg={angles.tolist()}, t={np.round(self.translation, 4).tolist()})"


def orthonormalize(matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    """Nearest rotation matrix (Frobenius norm), det forced to +1."""
    u, _, vt = np.linalg.svd(matrix)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a ∘ b: apply b first, then a."""
    return RigidTransform.from_unchecked(
        a.rotation @ b.rotation,
        a.rotation @ b.translation + a.translation,
    )


def invert(t: RigidTransform) -> RigidTransform:
    """Exact SE(3) inverse (R^T, -R^T C)."""
    rt = t.rotation.T
    return RigidTransform(rt.copy(), -rt @ t.translation)


# ============================================================================
# Projection
# ============================================================================

def _pixels_from_camera(camera_points: NDArray[np.float64], intrinsics: NDArray[np.float64]) -> NDArray[np.float64]:
    """Perspective division of K @ X for camera-frame points (N, 3)."""
    homog = camera_points @ intrinsics.T
    return homog[:, :2] / homog[:, 2:3]


def project_camera_points(
    camera_points: NDArray[np.float64],
    intrinsics: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Project points already expressed in the source frame; raises on Z <= 0."""
    depths = camera_points[:, 2]
    bad = np.flatnonzero(~(depths > 0.0))
    if bad.size:
        index = int(bad[0])
        raise BehindSourceError(index=index, depth=float(depths[index]))
    return _pixels_from_camera(camera_points, intrinsics)


def project_points(
    points: ArrayLike,
    pose: RigidTransform,
    geom: AcquisitionGeometry,
) -> NDArray[np.float64]:
    """
    Project object-frame points (N, 3) to pixels (N, 2).

    (u, v) is the perspective division of K [R | C] X; order is preserved.
    Raises BehindSourceError naming the first point with Z <= 0.
    """
    return project_camera_points(pose.apply(points), build_intrinsics(geom))


def back_project(
    pixels: ArrayLike,
    depths: ArrayLike,
    pose: RigidTransform,
    geom: AcquisitionGeometry,
) -> NDArray[np.float64]:
    """Object-frame points whose source-frame depth is known."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    rays = np.column_stack((px, np.ones(len(px)))) @ np.linalg.inv(build_intrinsics(geom)).T
    camera_points = rays * z[:, None]
    return invert(pose).apply(camera_points)
