"""
Perspective-n-point pose recovery.

EPnP closed form (control points, barycentric coordinates, null space of the
projection constraints, beta cases N=1..4) followed by an optional
Gauss-Newton refinement on the reprojection error.

Intrinsics may carry the detector's negative v-axis focal entry. EPnP mirrors
v into a positive-focal frame internally; the pose is unaffected by the
mirror. Gauss-Newton works with the intrinsics as given.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from carmpose.core.geometry import (
    AcquisitionGeometry,
    RigidTransform,
    _pixels_from_camera,
    build_intrinsics,
    orthonormalize,
)
from carmpose.errors import (
    DegenerateConfigurationError,
    InsufficientCorrespondencesError,
    NoValidPoseError,
    NumericalFailureError,
    ShapeMismatchError,
)
from carmpose.solver.registration import COLLINEAR_TOL, kabsch_many

LOGGER = logging.getLogger(__name__)

PLANAR_TOL = 1e-8
BETA_GN_ITERS = 5
SCALED_ORTHO_ITERS = 12
SCALED_ORTHO_TOL = 1e-12

DEFAULT_MAX_ITERS = 50
DEFAULT_TOL = 1e-10
MAX_STEP_HALVINGS = 8

# Control-point pairs for planar (3) and general (4) frames, and the index
# layout of the ten linearized beta products.
_PAIRS = {nc: np.triu_indices(nc, 1) for nc in (3, 4)}
_PRODUCT_ROWS, _PRODUCT_COLS = np.triu_indices(4)
_PRODUCT_WEIGHTS = np.where(_PRODUCT_ROWS == _PRODUCT_COLS, 1.0, 2.0)
_ROLL_1 = np.array([1, 2, 0])
_ROLL_2 = np.array([2, 0, 1])


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Paired object-frame points (N, 3) and pixels (N, 2) with their intrinsics."""
    points_3d: NDArray[np.float64]
    points_2d: NDArray[np.float64]
    geometry: Optional[AcquisitionGeometry] = None
    intrinsics: Optional[NDArray[np.float64]] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        pts3 = np.array(self.points_3d, dtype=np.float64).reshape(-1, 3)
        pts2 = np.array(self.points_2d, dtype=np.float64).reshape(-1, 2)
        if len(pts3) != len(pts2):
            raise ShapeMismatchError(f"{len(pts3)} object points vs {len(pts2)} image points")
        if not (np.all(np.isfinite(pts3)) and np.all(np.isfinite(pts2))):
            raise ShapeMismatchError("correspondences contain non-finite values")
        if self.intrinsics is None:
            if self.geometry is None:
                raise ShapeMismatchError("correspondences need a geometry or an intrinsic matrix")
            k = build_intrinsics(self.geometry)
        else:
            k = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        for arr in (pts3, pts2, k):
            arr.flags.writeable = False
        object.__setattr__(self, "points_3d", pts3)
        object.__setattr__(self, "points_2d", pts2)
        object.__setattr__(self, "intrinsics", k)

    def __len__(self) -> int:
        return len(self.points_3d)

    def permuted(self, order: ArrayLike) -> "CorrespondenceSet":
        idx = np.asarray(order)
        return CorrespondenceSet(self.points_3d[idx], self.points_2d[idx], self.geometry, self.intrinsics)


@dataclass(frozen=True)
class PnPSolution:
    pose: RigidTransform
    mean_reprojection_error_px: float
    refinement_iterations: int = 0
    epnp_case: int = 0  # winning beta case; 0 for the scaled-orthographic candidate


def mean_reprojection_error(
    points_3d: NDArray[np.float64],
    points_2d: NDArray[np.float64],
    rotation: NDArray[np.float64],
    translation: NDArray[np.float64],
    intrinsics: NDArray[np.float64],
) -> float:
    """Mean pixel distance; inf when any point falls behind the source."""
    camera = points_3d @ rotation.T + translation
    if np.any(camera[:, 2] <= 0.0):
        return float("inf")
    pixels = _pixels_from_camera(camera, intrinsics)
    return float(np.mean(np.linalg.norm(pixels - points_2d, axis=1)))


# ============================================================================
# EPnP
# ============================================================================

def _control_frame(points: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Control points and barycentric weights (n, nc), rows summing to 1.

    General sets get the centroid plus the object axes scaled by the RMS
    spread along each axis (4 control points). Planar sets get the centroid
    plus two in-plane axes (3 control points): the normal's sign is fixed by
    its largest component and the first in-plane axis is the projection of
    the first object axis that is not close to the normal. Neither choice
    depends on the order of the points.
    """
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] == 0.0 or s[1] <= COLLINEAR_TOL * s[0]:
        raise DegenerateConfigurationError("3D points are collinear")

    if s[2] > PLANAR_TOL * s[0]:
        axes = np.eye(3)
    else:
        normal = vt[2] * np.sign(vt[2][np.argmax(np.abs(vt[2]))])
        first = int(np.flatnonzero(np.abs(normal) < 0.7)[0])
        u = np.eye(3)[first] - normal[first] * normal
        u /= np.linalg.norm(u)
        axes = np.vstack((u, np.cross(normal, u)))

    coords = centered @ axes.T
    spread = np.sqrt(np.mean(coords ** 2, axis=0))
    coords /= spread
    controls = np.vstack((centroid, centroid + spread[:, None] * axes))
    alphas = np.column_stack((1.0 - coords.sum(axis=1), coords))
    return controls, alphas


def _constraint_matrix(
    pixels: NDArray[np.float64],
    intrinsics: NDArray[np.float64],
    alphas: NDArray[np.float64],
) -> NDArray[np.float64]:
    """(2n, 3 nc) projection constraints on the camera-frame control points."""
    fu, fv = intrinsics[0, 0], intrinsics[1, 1]
    u0, v0 = intrinsics[0, 2], intrinsics[1, 2]
    n, nc = alphas.shape
    m = np.zeros((n, 2, nc, 3))
    m[:, 0, :, 0] = alphas * fu
    m[:, 0, :, 2] = alphas * (u0 - pixels[:, 0])[:, None]
    m[:, 1, :, 1] = alphas * fv
    m[:, 1, :, 2] = alphas * (v0 - pixels[:, 1])[:, None]
    return m.reshape(2 * n, 3 * nc)


def _pair_gram(kernel: NDArray[np.float64], nc: int) -> NDArray[np.float64]:
    """(pairs, 4, 4) inner products of the kernel vectors' control-point differences."""
    blocks = kernel.T.reshape(4, nc, 3)
    first, second = _PAIRS[nc]
    diffs = blocks[:, first] - blocks[:, second]
    return np.einsum("kpi,lpi->pkl", diffs, diffs)


def _linearized_system(gram: NDArray[np.float64]) -> NDArray[np.float64]:
    """
    (pairs, 10) matrix of squared-distance constraints in the products
    [b11, b12, b13, b14, b22, b23, b24, b33, b34, b44].
    """
    return gram[:, _PRODUCT_ROWS, _PRODUCT_COLS] * _PRODUCT_WEIGHTS


def _betas_from_products(
    b11: float,
    cross: NDArray[np.float64],
    squares: Optional[NDArray[np.float64]] = None,
) -> NDArray[np.float64]:
    """
    (b1..b4) from linearized products. b1 comes from b11; the others from
    their squares signed by b1k, or from b1k / b1 when no squares are given.
    A negative b11 means the whole product vector came out negated.
    """
    flip = -1.0 if b11 < 0.0 else 1.0
    betas = np.zeros(4)
    betas[0] = np.sqrt(abs(b11))
    rest = slice(1, 1 + len(cross))
    if squares is not None:
        betas[rest] = flip * np.sign(cross) * np.sqrt(np.abs(squares))
    elif betas[0] > 0.0:
        betas[rest] = flip * cross / betas[0]
    return betas


def _initial_betas(
    gram: NDArray[np.float64],
    rho: NDArray[np.float64],
    nc: int,
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """One closed-form beta vector per case: (cases, 4) and the case numbers."""
    lin = _linearized_system(gram)
    g11 = gram[:, 0, 0]
    starts = [np.array([np.sqrt(g11) @ np.sqrt(rho) / max(float(g11.sum()), np.finfo(float).tiny),
                        0.0, 0.0, 0.0])]
    p2, *_ = np.linalg.lstsq(lin[:, [0, 1, 4]], rho, rcond=None)
    starts.append(_betas_from_products(p2[0], p2[1:2], p2[2:3]))
    if nc == 4:
        p3, *_ = np.linalg.lstsq(lin[:, [0, 1, 2, 4, 5, 7]], rho, rcond=None)
        starts.append(_betas_from_products(p3[0], p3[1:3], p3[[3, 5]]))
        p4, *_ = np.linalg.lstsq(lin[:, :4], rho, rcond=None)
        starts.append(_betas_from_products(p4[0], p4[1:4]))
    return np.array(starts), np.arange(1, len(starts) + 1)


def _gauss_newton_betas(
    gram: NDArray[np.float64],
    rho: NDArray[np.float64],
    starts: NDArray[np.float64],
    iterations: int = BETA_GN_ITERS,
) -> NDArray[np.float64]:
    """Refine every row of `starts` against the squared control-point distances."""
    b = starts.copy()
    eye = np.eye(b.shape[1])
    for _ in range(iterations):
        jac_half = np.einsum("pkl,sl->spk", gram, b)
        residual = rho - np.einsum("spk,sk->sp", jac_half, b)
        normal = 4.0 * np.einsum("spk,spl->skl", jac_half, jac_half)
        damping = (1e-12 * np.trace(normal, axis1=1, axis2=2) + np.finfo(float).tiny)[:, None, None] * eye
        rhs = 2.0 * np.einsum("spk,sp->sk", jac_half, residual)
        b = b + np.linalg.solve(normal + damping, rhs[..., None])[..., 0]
    return b


def _cross(a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
    return a[_ROLL_1] * b[_ROLL_2] - a[_ROLL_2] * b[_ROLL_1]


def _scaled_orthographic(
    points_3d: NDArray[np.float64],
    normalized: NDArray[np.float64],
) -> Optional[tuple[NDArray[np.float64], NDArray[np.float64]]]:
    """
    Pose from repeated scaled-orthographic fits, each one correcting the
    image coordinates by the depth offsets of the previous pose. Exact on
    noiseless data once the corrections settle; needs a non-planar set.
    """
    centroid = points_3d.mean(axis=0)
    centered = points_3d - centroid
    fit = np.linalg.pinv(np.column_stack((centered, np.ones(len(points_3d)))))
    offsets = np.zeros(len(points_3d))
    for _ in range(SCALED_ORTHO_ITERS):
        coeffs = fit @ (normalized * (1.0 + offsets)[:, None])
        axes = coeffs[:3].T
        norms = np.sqrt(np.sum(axes * axes, axis=1))
        if not np.all(norms > 0.0):
            return None
        rows = axes / norms[:, None]
        row_z = _cross(rows[0], rows[1])
        row_z /= np.sqrt(row_z @ row_z)
        depth = 2.0 / (norms[0] + norms[1])
        updated = centered @ row_z / depth
        change = np.max(np.abs(updated - offsets))
        offsets = updated
        if change < SCALED_ORTHO_TOL:
            break
    if not np.all(np.isfinite(offsets)):
        return None
    rotation = orthonormalize(np.vstack((rows, row_z)))
    centre = depth * np.array([coeffs[3, 0], coeffs[3, 1], 1.0])
    return rotation, centre - rotation @ centroid


def _refit_translation(
    points_3d: NDArray[np.float64],
    normalized: NDArray[np.float64],
    rotations: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Per rotation (s, 3, 3), the translation solving the projection equations linearly."""
    n = len(points_3d)
    x, y = normalized[:, 0], normalized[:, 1]
    system = np.zeros((n, 2, 3))
    system[:, 0, 0] = 1.0
    system[:, 0, 2] = -x
    system[:, 1, 1] = 1.0
    system[:, 1, 2] = -y
    solve = np.linalg.pinv(system.reshape(2 * n, 3))
    rotated = points_3d @ np.swapaxes(rotations, 1, 2)
    rhs = np.stack((x * rotated[..., 2] - rotated[..., 0],
                    y * rotated[..., 2] - rotated[..., 1]), axis=2)
    return rhs.reshape(len(rotations), 2 * n) @ solve.T


def _reprojection_errors(
    points_3d: NDArray[np.float64],
    pixels: NDArray[np.float64],
    rotations: NDArray[np.float64],
    translations: NDArray[np.float64],
    intrinsics: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Mean pixel distance per candidate pose; inf when a point is at or behind the source."""
    camera = points_3d @ np.swapaxes(rotations, 1, 2) + translations[:, None]
    homog = camera @ intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        errors = np.linalg.norm(homog[..., :2] / homog[..., 2:] - pixels, axis=2).mean(axis=1)
    errors[~(np.all(camera[..., 2] > 0.0, axis=1) & np.isfinite(errors))] = np.inf
    return errors


def epnp(
    points_3d: NDArray[np.float64],
    pixels: NDArray[np.float64],
    intrinsics: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64], float, int]:
    """
    EPnP on raw arrays. Returns (R, t, mean reprojection error, beta case).

    Every beta case is kept twice, as solved and after Gauss-Newton on the
    control-point distances. Each gives a pose by absolute orientation,
    and each pose is scored with its own translation and with the
    translation refitted to the image. On non-planar sets a
    scaled-orthographic pose (case 0) competes too; it stays accurate when
    the object is small against its distance to the source. The candidate
    with the lowest reprojection error wins.
    """
    n = len(points_3d)
    if n < 4:
        raise InsufficientCorrespondencesError(f"EPnP needs at least 4 correspondences, got {n}")

    k = intrinsics
    px = pixels
    if k[1, 1] < 0.0:
        mirror = np.diag([1.0, -1.0, 1.0])
        k = mirror @ k
        px = pixels * np.array([1.0, -1.0])
    normalized = (px - k[:2, 2]) / np.diag(k)[:2]

    controls, alphas = _control_frame(points_3d)
    nc = len(controls)
    m = _constraint_matrix(px, k, alphas)

    # Smallest right-singular vectors first.
    _, _, vt = np.linalg.svd(m, full_matrices=len(m) < m.shape[1])
    kernel = vt[::-1][:4].T

    first, second = _PAIRS[nc]
    rho = np.sum((controls[first] - controls[second]) ** 2, axis=1)
    gram = _pair_gram(kernel, nc)
    starts, cases = _initial_betas(gram, rho, nc)
    n_free = 4 if nc == 4 else 2
    refined = np.zeros_like(starts)
    refined[:, :n_free] = _gauss_newton_betas(gram[:, :n_free, :n_free], rho, starts[:, :n_free])
    betas = np.vstack((starts, refined))
    cases = np.concatenate((cases, cases))

    camera = alphas @ (betas @ kernel.T).reshape(-1, nc, 3)
    camera *= np.where(camera[:, :, 2].sum(axis=1) < 0.0, -1.0, 1.0)[:, None, None]
    finite = np.all(np.isfinite(camera), axis=(1, 2))
    rotations, translations = np.zeros((0, 3, 3)), np.zeros((0, 3))
    if finite.any():
        rotations, translations = kabsch_many(points_3d, camera[finite])
    cases = cases[finite]

    seed = _scaled_orthographic(points_3d, normalized) if nc == 4 else None
    if seed is not None:
        rotations = np.concatenate((rotations, seed[0][None]))
        translations = np.concatenate((translations, seed[1][None]))
        cases = np.append(cases, 0)
    if len(rotations) == 0:
        raise NoValidPoseError("EPnP produced no finite candidate pose")

    translations = np.concatenate((translations, _refit_translation(points_3d, normalized, rotations)))
    rotations = np.concatenate((rotations, rotations))
    cases = np.concatenate((cases, cases))
    errors = _reprojection_errors(points_3d, px, rotations, translations, k)
    best = int(np.argmin(errors))
    if not np.isfinite(errors[best]):
        raise NoValidPoseError("every EPnP candidate places points behind the source")
    LOGGER.debug("EPnP: %d points, %d control points, case N=%d, error %.3g px",
                 n, nc, cases[best], errors[best])
    return rotations[best], translations[best], float(errors[best]), int(cases[best])


def solve_epnp(c: CorrespondenceSet) -> PnPSolution:
    """Closed-form EPnP pose (no iterative refinement)."""
    rotation, translation, error, case = epnp(c.points_3d, c.points_2d, c.intrinsics)
    return PnPSolution(RigidTransform(rotation, translation), error, 0, case)


# ============================================================================
# Gauss-Newton refinement
# ============================================================================

def _skew(v: NDArray[np.float64]) -> NDArray[np.float64]:
    """(n, 3) vectors to (n, 3, 3) cross-product matrices."""
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _residuals(
    c: CorrespondenceSet,
    rotation: NDArray[np.float64],
    translation: NDArray[np.float64],
) -> Optional[NDArray[np.float64]]:
    """Flattened pixel residuals; None when a point is at or behind the source."""
    camera = c.points_3d @ rotation.T + translation
    if np.any(camera[:, 2] <= 0.0):
        return None
    return (_pixels_from_camera(camera, c.intrinsics) - c.points_2d).reshape(-1)


def _jacobian(
    c: CorrespondenceSet,
    rotation: NDArray[np.float64],
    translation: NDArray[np.float64],
) -> NDArray[np.float64]:
    """(2n, 6) derivative w.r.t. a left rotation increment and a translation step."""
    k = c.intrinsics
    rotated = c.points_3d @ rotation.T
    camera = rotated + translation
    z = camera[:, 2]
    pixels = _pixels_from_camera(camera, k)
    d_proj = np.empty((len(camera), 2, 3))
    d_proj[:, 0] = (k[0][None, :] - pixels[:, 0:1] * np.array([0.0, 0.0, 1.0])) / z[:, None]
    d_proj[:, 1] = (k[1][None, :] - pixels[:, 1:2] * np.array([0.0, 0.0, 1.0])) / z[:, None]
    d_rot = -_skew(rotated)
    jac = np.concatenate((d_proj @ d_rot, d_proj), axis=2)
    return jac.reshape(-1, 6)


def refine_gauss_newton(
    c: CorrespondenceSet,
    init: RigidTransform,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> PnPSolution:
    """
    Minimize the squared reprojection error starting from `init`.

    Steps are accepted only when the cost decreases; a rejected step is
    halved up to 8 times before the iteration stops. Rotation is
    re-orthonormalized after every accepted step.
    """
    rotation = np.array(init.rotation)
    translation = np.array(init.translation)
    residual = _residuals(c, rotation, translation)
    if residual is None:
        raise NumericalFailureError("initial pose places points behind the source", last_pose=init)
    if not np.all(np.isfinite(residual)):
        raise NumericalFailureError("non-finite residuals at the initial pose", last_pose=init)
    cost = float(residual @ residual)
    last_pose = init
    accepted = 0

    while accepted < max_iters and cost > 0.0:
        jac = _jacobian(c, rotation, translation)
        step, *_ = np.linalg.lstsq(jac, -residual, rcond=None)
        if not np.all(np.isfinite(step)):
            raise NumericalFailureError("non-finite Gauss-Newton step", last_pose=last_pose)

        improved = False
        for _ in range(MAX_STEP_HALVINGS + 1):
            trial_rot = orthonormalize(Rotation.from_rotvec(step[:3]).as_matrix() @ rotation)
            trial_trans = translation + step[3:]
            trial_res = _residuals(c, trial_rot, trial_trans)
            if trial_res is not None:
                if not np.all(np.isfinite(trial_res)):
                    raise NumericalFailureError("non-finite residuals during refinement", last_pose=last_pose)
                trial_cost = float(trial_res @ trial_res)
                if trial_cost < cost:
                    improved = True
                    break
            step = step / 2.0
        if not improved:
            break

        relative_change = (cost - trial_cost) / cost
        rotation, translation, residual, cost = trial_rot, trial_trans, trial_res, trial_cost
        last_pose = RigidTransform(rotation, translation)
        accepted += 1
        if relative_change < tol:
            break

    error = mean_reprojection_error(c.points_3d, c.points_2d, last_pose.rotation,
                                    last_pose.translation, c.intrinsics)
    LOGGER.debug("Gauss-Newton: %d accepted steps, error %.3g px", accepted, error)
    return PnPSolution(last_pose, error, accepted)


def solve_pnp(
    c: CorrespondenceSet,
    refine: bool = True,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> PnPSolution:
    """EPnP followed by Gauss-Newton; the refined pose is kept only if it is not worse."""
    closed = solve_epnp(c)
    if not refine:
        return closed
    refined = refine_gauss_newton(c, closed.pose, max_iters, tol)
    if refined.mean_reprojection_error_px <= closed.mean_reprojection_error_px:
        return PnPSolution(refined.pose, refined.mean_reprojection_error_px,
                           refined.refinement_iterations, closed.epnp_case)
    return closed


def estimate_board_pose(
    fiducials_3d: ArrayLike,
    detections_2d: ArrayLike,
    geom: AcquisitionGeometry,
) -> PnPSolution:
    """Board pose in the camera frame from fiducial correspondences."""
    return solve_pnp(CorrespondenceSet(fiducials_3d, detections_2d, geom))
