"""EPnP and Gauss-Newton refinement."""

from __future__ import annotations

import numpy as np
import pytest

from carmpose.core.geometry import AcquisitionGeometry, RigidTransform, build_intrinsics, project_points
from carmpose.errors import (
    DegenerateConfigurationError,
    InsufficientCorrespondencesError,
    NumericalFailureError,
    ShapeMismatchError,
)
from carmpose.metrics.pose_metrics import angular_error, translation_error
from carmpose.simulation.fiducials import board_fiducials, default_optical_camera
from carmpose.solver.pnp import (
    CorrespondenceSet,
    estimate_board_pose,
    mean_reprojection_error,
    refine_gauss_newton,
    solve_epnp,
    solve_pnp,
)

from conftest import random_pose


def _correspondences(points, pose, geometry, noise_px=0.0, rng=None):
    pixels = project_points(points, pose, geometry)
    if noise_px:
        pixels = pixels + rng.normal(0.0, noise_px, pixels.shape)
    return CorrespondenceSet(points, pixels, geometry)


class TestCorrespondenceSet:
    def test_length_mismatch(self, geometry):
        with pytest.raises(ShapeMismatchError):
            CorrespondenceSet(np.zeros((5, 3)), np.zeros((4, 2)), geometry)

    def test_non_finite(self, geometry):
        pixels = np.zeros((4, 2))
        pixels[2, 1] = np.nan
        with pytest.raises(ShapeMismatchError):
            CorrespondenceSet(np.zeros((4, 3)), pixels, geometry)

    def test_needs_intrinsics(self):
        with pytest.raises(ShapeMismatchError):
            CorrespondenceSet(np.zeros((4, 3)), np.zeros((4, 2)))

    def test_explicit_intrinsics(self, geometry, pose, cube):
        c = CorrespondenceSet(cube.control_points, project_points(cube.control_points, pose, geometry),
                              intrinsics=build_intrinsics(geometry))
        assert solve_epnp(c).pose.is_close(pose, tol=1e-6)


class TestEPnP:
    def test_noiseless_recovery(self, cube, geometry, rng):
        for _ in range(50):
            pose = random_pose(rng)
            solution = solve_epnp(_correspondences(cube.control_points, pose, geometry))
            assert translation_error(pose, solution.pose) < 1e-6
            assert angular_error(pose, solution.pose) < 1e-6
            assert solution.mean_reprojection_error_px < 1e-6
            assert solution.refinement_iterations == 0

    def test_permutation_invariance(self, cube, geometry, rng):
        for _ in range(20):
            c = _correspondences(cube.control_points, random_pose(rng), geometry, 0.5, rng)
            reference = solve_epnp(c).pose
            for _ in range(5):
                permuted = solve_epnp(c.permuted(rng.permutation(len(c)))).pose
                assert angular_error(reference, permuted) < 1e-6
                assert translation_error(reference, permuted) < 1e-6

    def test_permutation_invariance_planar(self, geometry, pose, rng):
        c = _correspondences(board_fiducials(4, 3, 10.0), pose, geometry, 0.5, rng)
        reference = solve_epnp(c).pose
        for _ in range(5):
            assert solve_epnp(c.permuted(rng.permutation(len(c)))).pose.is_close(reference, tol=1e-6)

    @pytest.mark.parametrize("corners", [[1, 2, 4, 8], [1, 4, 6, 7], [2, 3, 5, 8]])
    def test_minimum_four_points(self, cube, geometry, rng, corners):
        points = cube.control_points[corners]
        for _ in range(100):
            pose = random_pose(rng)
            solution = solve_epnp(_correspondences(points, pose, geometry))
            assert translation_error(pose, solution.pose) < 1e-6
            assert angular_error(pose, solution.pose) < 1e-6

    def test_four_jittered_points(self, cube, geometry, rng):
        tetrahedron = cube.control_points[[1, 4, 6, 7]]
        for _ in range(100):
            points = tetrahedron + rng.uniform(-5.0, 5.0, (4, 3))
            pose = random_pose(rng)
            solution = solve_epnp(_correspondences(points, pose, geometry))
            assert solution.pose.is_close(pose, tol=1e-6)

    @pytest.mark.parametrize("sid", [1000.0, 1100.0])
    def test_noisy_reprojection_bracket(self, cube, sid):
        """Identity rotation 1000 mm from the source, 2 px pixel noise, 1000 seeded trials."""
        geometry = AcquisitionGeometry.from_fov(sid, 300.0, (960, 742))
        pose = RigidTransform.from_euler((0.0, 0.0, 0.0), (0.0, 0.0, 1000.0))
        exact = solve_epnp(_correspondences(cube.control_points, pose, geometry))
        assert exact.mean_reprojection_error_px < 1e-9
        errors, shifts = [], []
        for seed in range(1000):
            noisy = _correspondences(cube.control_points, pose, geometry, 2.0, np.random.default_rng(seed))
            solution = solve_epnp(noisy)
            errors.append(solution.mean_reprojection_error_px)
            shifts.append(translation_error(pose, solution.pose))
        errors = np.array(errors)
        assert 0.6 <= np.median(errors) <= 4.0
        assert np.mean((errors >= 0.6) & (errors <= 4.0)) >= 0.95
        assert np.min(shifts) > translation_error(pose, exact.pose)

    def test_three_points_rejected(self, cube, geometry, pose):
        with pytest.raises(InsufficientCorrespondencesError):
            solve_epnp(_correspondences(cube.control_points[:3], pose, geometry))

    def test_collinear_points_rejected(self, geometry, pose):
        points = np.outer(np.linspace(-10.0, 10.0, 6), [1.0, 0.5, 0.2])
        with pytest.raises(DegenerateConfigurationError):
            solve_epnp(_correspondences(points, pose, geometry))

    def test_planar_points(self, geometry, pose):
        points = board_fiducials(4, 3, 10.0)
        solution = solve_epnp(_correspondences(points, pose, geometry))
        assert solution.pose.is_close(pose, tol=1e-6)

    def test_upright_intrinsics(self, cube, pose):
        """A camera without the flipped v-axis goes through the same solver."""
        camera = AcquisitionGeometry(1100.0, 2.5, 2.5, (192.0, 148.0), (960, 742))
        k = build_intrinsics(camera)
        k[1, 1] = -k[1, 1]
        points = cube.control_points
        pixels = pose.apply(points) @ k.T
        pixels = pixels[:, :2] / pixels[:, 2:]
        solution = solve_epnp(CorrespondenceSet(points, pixels, intrinsics=k))
        assert solution.pose.is_close(pose, tol=1e-6)


class TestRefinement:
    def test_refinement_never_worse(self, cube, geometry, rng):
        for _ in range(30):
            c = _correspondences(cube.control_points, random_pose(rng), geometry, 1.0, rng)
            closed = solve_epnp(c)
            refined = solve_pnp(c)
            assert refined.mean_reprojection_error_px <= closed.mean_reprojection_error_px + 1e-12

    def test_exact_start_stays_put(self, cube, geometry, pose):
        c = _correspondences(cube.control_points, pose, geometry)
        start = RigidTransform(pose.rotation, pose.translation)
        solution = refine_gauss_newton(c, start)
        assert solution.pose.is_close(pose, tol=1e-9)

    def test_converges_from_perturbed_start(self, cube, geometry, pose):
        c = _correspondences(cube.control_points, pose, geometry)
        start = RigidTransform.from_rotvec(pose.as_rotvec() + 0.02, pose.translation + [2.0, -1.0, 15.0])
        solution = refine_gauss_newton(c, start)
        assert solution.refinement_iterations > 0
        assert translation_error(pose, solution.pose) < 1e-6
        assert angular_error(pose, solution.pose) < 1e-6

    def test_start_behind_source(self, cube, geometry, pose):
        c = _correspondences(cube.control_points, pose, geometry)
        start = RigidTransform.from_euler((0.0, 0.0, 0.0), (0.0, 0.0, -100.0))
        with pytest.raises(NumericalFailureError) as err:
            refine_gauss_newton(c, start)
        assert err.value.last_pose is start

    def test_refine_flag(self, cube, geometry, pose, rng):
        c = _correspondences(cube.control_points, pose, geometry, 1.0, rng)
        assert solve_pnp(c, refine=False).refinement_iterations == 0

    def test_mean_reprojection_error_behind_source(self, cube, geometry, pose):
        c = _correspondences(cube.control_points, pose, geometry)
        assert mean_reprojection_error(c.points_3d, c.points_2d, np.eye(3),
                                       np.array([0.0, 0.0, -50.0]), c.intrinsics) == float("inf")


class TestBoardPose:
    def test_exact_board_pose(self):
        camera = default_optical_camera()
        board = board_fiducials()
        pose = RigidTransform.from_euler((170.0, 10.0, -5.0), (5.0, -10.0, 600.0))
        solution = estimate_board_pose(board, project_points(board, pose, camera), camera)
        assert translation_error(pose, solution.pose) < 1e-6
        assert angular_error(pose, solution.pose) < 1e-6
