"""Projection, intrinsics and rigid-transform tests."""

from __future__ import annotations

import numpy as np
import pytest

from carmpose.core.geometry import (
    AcquisitionGeometry,
    RigidTransform,
    back_project,
    build_intrinsics,
    compose,
    invert,
    orthonormalize,
    project_points,
)
from carmpose.errors import BehindSourceError, InvalidGeometryError, InvalidTransformError

from conftest import random_pose


def _simple_geometry(f: float = 1000.0, k: float = 1.0) -> AcquisitionGeometry:
    return AcquisitionGeometry(f, k, k, (0.0, 0.0), (960, 742))


class TestIntrinsics:
    def test_matrix_layout(self):
        geom = AcquisitionGeometry(1000.0, 2.0, 3.0, (100.0, 50.0), (960, 742))
        expected = np.array([
            [2000.0, 0.0, 200.0],
            [0.0, -3000.0, 150.0],
            [0.0, 0.0, 1.0],
        ])
        np.testing.assert_allclose(build_intrinsics(geom), expected)

    def test_from_fov_density(self):
        geom = AcquisitionGeometry.from_fov(1100.0, 300.0, (960, 742))
        assert geom.pixel_density_u == pytest.approx(np.hypot(960, 742) / 300.0)
        assert geom.pixel_density_v == geom.pixel_density_u
        assert geom.fov_diagonal_mm == pytest.approx(300.0)

    def test_from_fov_axis_hits_image_center(self):
        geom = AcquisitionGeometry.from_fov(1100.0, 300.0, (960, 742))
        pixel = project_points([[0.0, 0.0, 0.0]], RigidTransform.from_euler((0, 0, 0), (0, 0, 500)), geom)
        np.testing.assert_allclose(pixel[0], [480.0, 371.0], atol=1e-9)

    def test_principal_shift_moves_center(self):
        geom = AcquisitionGeometry.from_fov(1100.0, 300.0, (960, 742), (2.0, -1.0))
        pixel = project_points([[0.0, 0.0, 0.0]], RigidTransform.from_euler((0, 0, 0), (0, 0, 500)), geom)
        k = geom.pixel_density_u
        np.testing.assert_allclose(pixel[0], [480.0 + 2.0 * k, 371.0 - 1.0 * k], atol=1e-9)

    @pytest.mark.parametrize("kwargs", [
        {"focal_length_mm": 0.0},
        {"focal_length_mm": -5.0},
        {"pixel_density_u": 0.0},
        {"pixel_density_v": float("nan")},
        {"image_size_px": (0, 742)},
    ])
    def test_invalid_geometry(self, kwargs):
        base = dict(focal_length_mm=1000.0, pixel_density_u=1.0, pixel_density_v=1.0,
                    principal_offset_mm=(0.0, 0.0), image_size_px=(960, 742))
        base.update(kwargs)
        with pytest.raises(InvalidGeometryError):
            AcquisitionGeometry(**base)

    def test_dict_round_trip(self, geometry):
        assert AcquisitionGeometry.from_dict(geometry.to_dict()) == geometry


class TestProjectPoints:
    def test_hand_computed_pixel(self):
        geom = _simple_geometry()
        pixel = project_points([[10.0, 20.0, 500.0]], RigidTransform.identity(), geom)
        np.testing.assert_allclose(pixel, [[20.0, -40.0]])

    def test_v_axis_points_down(self):
        geom = AcquisitionGeometry.from_fov(1000.0, 300.0)
        up = project_points([[0.0, 10.0, 500.0]], RigidTransform.identity(), geom)
        assert up[0, 1] < 371.0

    def test_order_is_preserved(self, geometry, pose, cube):
        points = cube.control_points
        full = project_points(points, pose, geometry)
        order = np.arange(len(points))[::-1]
        np.testing.assert_array_equal(project_points(points[order], pose, geometry), full[order])

    def test_behind_source_names_first_point(self):
        geom = _simple_geometry()
        points = [[0.0, 0.0, 100.0], [0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]
        with pytest.raises(BehindSourceError) as err:
            project_points(points, RigidTransform.identity(), geom)
        assert err.value.index == 1
        assert err.value.depth == -1.0

    def test_point_on_source_plane_rejected(self):
        with pytest.raises(BehindSourceError):
            project_points([[1.0, 1.0, 0.0]], RigidTransform.identity(), _simple_geometry())

    def test_back_project_round_trip(self, geometry, rng):
        for _ in range(20):
            pose = random_pose(rng)
            points = rng.uniform(-20.0, 20.0, (9, 3))
            pixels = project_points(points, pose, geometry)
            depths = pose.apply(points)[:, 2]
            np.testing.assert_allclose(back_project(pixels, depths, pose, geometry), points, atol=1e-9)


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(InvalidTransformError):
            RigidTransform(np.diag([1.0, 1.0, 1.01]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(InvalidTransformError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidTransformError):
            RigidTransform(np.eye(3), [0.0, np.inf, 0.0])

    def test_arrays_are_read_only(self, pose):
        with pytest.raises(ValueError):
            pose.rotation[0, 0] = 2.0
        with pytest.raises(ValueError):
            pose.translation[0] = 2.0

    def test_euler_round_trip(self):
        angles = (12.0, -33.0, 71.0)
        np.testing.assert_allclose(RigidTransform.from_euler(angles).as_euler(), angles, atol=1e-9)

    def test_matrix_round_trip(self, pose):
        assert RigidTransform.from_matrix(pose.as_matrix()).is_close(pose)

    def test_from_matrix_needs_4x4(self):
        with pytest.raises(InvalidTransformError):
            RigidTransform.from_matrix(np.eye(3))

    def test_compose_matches_matrix_product(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(compose(a, b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-9)
        assert (a @ b).is_close(compose(a, b))

    def test_compose_is_associative(self, rng):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        assert compose(compose(a, b), c).is_close(compose(a, compose(b, c)), tol=1e-8)

    def test_invert(self, rng):
        t = random_pose(rng)
        assert compose(t, invert(t)).is_close(RigidTransform.identity(), tol=1e-9)
        assert compose(invert(t), t).is_close(RigidTransform.identity(), tol=1e-9)

    def test_orthonormalize_projects_to_rotation(self, rng):
        noisy = RigidTransform.from_euler((10, 20, 30)).rotation + rng.normal(0.0, 1e-3, (3, 3))
        fixed = orthonormalize(noisy)
        np.testing.assert_allclose(fixed.T @ fixed, np.eye(3), atol=1e-12)
        assert np.linalg.det(fixed) == pytest.approx(1.0)
