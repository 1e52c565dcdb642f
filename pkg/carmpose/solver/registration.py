"""
Rigid point-set registration (least-squares rotation + translation).

Used to link the optical and X-ray coordinate systems from paired point
clouds, and as the absolute-orientation step inside EPnP.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from carmpose.core.geometry import RigidTransform
from carmpose.errors import DegenerateConfigurationError, ShapeMismatchError

LOGGER = logging.getLogger(__name__)

# Relative singular-value floor below which a centered point set counts as collinear
COLLINEAR_TOL = 1e-10


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    rms_residual_mm: float


def is_collinear(points: NDArray[np.float64], tol: float = COLLINEAR_TOL) -> bool:
    """True when the centered points span at most a line."""
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[0] == 0.0 or s[1] <= tol * s[0])


def kabsch_many(
    source: NDArray[np.float64],
    targets: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Stacked form of kabsch: one source (n, 3) against targets (s, n, 3).
    Returns rotations (s, 3, 3) and translations (s, 3).
    """
    centroid_s = source.mean(axis=0)
    centroid_t = targets.mean(axis=1)
    h = np.einsum("ni,snj->sij", source - centroid_s, targets - centroid_t[:, None])
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0.0] = 1.0
    v[:, :, 2] *= d[:, None]
    rotations = v @ ut
    translations = centroid_t - rotations @ centroid_s
    return rotations, translations


def kabsch(
    source: NDArray[np.float64],
    target: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    R, t minimizing sum |R source_i + t - target_i|^2 with det(R) = +1.
    A reflection solution is corrected by flipping the smallest singular
    direction.
    """
    rotations, translations = kabsch_many(source, target[None])
    return rotations[0], translations[0]


def register_point_sets(source: ArrayLike, target: ArrayLike) -> RegistrationResult:
    """
    Least-squares rigid transform taking `source` onto `target`.

    Raises DegenerateConfigurationError for fewer than 3 pairs or a
    collinear set.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ShapeMismatchError(f"point sets differ in size: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateConfigurationError(f"registration needs at least 3 point pairs, got {len(src)}")
    if is_collinear(src) or is_collinear(dst):
        raise DegenerateConfigurationError("registration point set is collinear")

    rotation, translation = kabsch(src, dst)
    transform = RigidTransform.from_unchecked(rotation, translation)
    residuals = transform.apply(src) - dst
    rms = float(np.sqrt(np.mean(np.sum(residuals ** 2, axis=1))))
    LOGGER.debug("Registered %d point pairs, rms %.3g mm", len(src), rms)
    return RegistrationResult(transform, rms)
