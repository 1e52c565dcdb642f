"""Instrument models and their control points."""

from __future__ import annotations

import json

import numpy as np
import pytest

from carmpose.core.instruments import (
    BoundingBox,
    InstrumentModel,
    Symmetry,
    cube_vertices,
    instrument_from_dict,
    load_instrument,
    screw_vertices,
)
from carmpose.errors import ConfigError, DataError, EmptyInputError


class TestBuiltins:
    def test_cube_surface_lattice(self, cube):
        assert len(cube.vertices) == 98
        assert cube.diameter_mm == pytest.approx(30.0)
        assert cube.max_vertex_distance == pytest.approx(30.0 * np.sqrt(3.0))
        assert not cube.is_symmetric

    def test_cube_control_points(self, cube):
        control = cube.control_points
        assert control.shape == (9, 3)
        np.testing.assert_allclose(control[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(np.abs(control[1:]), 15.0)
        # x varies slowest, z fastest
        np.testing.assert_allclose(control[1], [-15.0, -15.0, -15.0])
        np.testing.assert_allclose(control[2], [-15.0, -15.0, 15.0])
        np.testing.assert_allclose(control[8], [15.0, 15.0, 15.0])

    def test_screw_dimensions(self, screw):
        assert screw.diameter_mm == pytest.approx(34.3)
        assert screw.max_vertex_distance == pytest.approx(34.3)
        assert screw.is_symmetric
        np.testing.assert_allclose(screw.symmetry.axis, (0.0, 0.0, 1.0))

    def test_screw_fits_head_width(self):
        verts = screw_vertices()
        radial = np.hypot(verts[:, 0], verts[:, 1])
        assert radial.max() <= 6.88 / 2 + 1e-9
        assert verts[:, 2].min() == 0.0
        assert verts[:, 2].max() == pytest.approx(34.3)

    def test_missing_builtin_file_uses_defaults(self, tmp_path, monkeypatch):
        monkeypatch.setattr("carmpose.core.instruments.INSTRUMENT_DIR", tmp_path)
        model = load_instrument("cube")
        assert len(model.vertices) == 98
        assert model.diameter_mm == pytest.approx(30.0)


class TestInstrumentFiles:
    def test_mesh_from_file(self, tmp_path):
        spec = {"kind": "mesh", "name": "tetra",
                "vertices": [[0, 0, 0], [10, 0, 0], [0, 10, 0], [0, 0, 10]]}
        path = tmp_path / "tetra.json"
        path.write_text(json.dumps(spec))
        model = load_instrument(path)
        assert model.name == "tetra"
        assert model.diameter_mm == pytest.approx(10.0 * np.sqrt(2.0))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_instrument(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_instrument(path)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            instrument_from_dict({"kind": "scalpel"})

    def test_mesh_needs_vertices(self):
        with pytest.raises(ConfigError):
            instrument_from_dict({"kind": "mesh"})


class TestValidation:
    def test_too_few_vertices(self):
        with pytest.raises(DataError):
            InstrumentModel("tiny", np.zeros((3, 3)) + np.arange(3)[:, None])

    def test_empty_vertices(self):
        with pytest.raises(EmptyInputError):
            InstrumentModel("empty", np.zeros((0, 3)))

    def test_coincident_vertices(self):
        with pytest.raises(DataError):
            InstrumentModel("point", np.ones((5, 3)))

    def test_bad_shape(self):
        with pytest.raises(DataError):
            InstrumentModel("flat", np.zeros((5, 2)))

    def test_vertices_read_only(self, cube):
        with pytest.raises(ValueError):
            cube.vertices[0, 0] = 1.0

    def test_bad_cube_size(self):
        with pytest.raises(ConfigError):
            cube_vertices(size_mm=0.0)

    def test_bad_screw_proportions(self):
        with pytest.raises(ConfigError):
            screw_vertices(length_mm=5.0, head_height_mm=3.0, tip_length_mm=3.0)
        with pytest.raises(ConfigError):
            screw_vertices(shaft_diameter_mm=8.0)

    def test_stated_diameter_must_cover_vertices(self):
        spec = {"kind": "mesh", "name": "tetra", "diameter_mm": 10.0,
                "vertices": [[0, 0, 0], [10, 0, 0], [0, 10, 0], [0, 0, 10]]}
        with pytest.raises(ConfigError, match="vertex span"):
            instrument_from_dict(spec)
        spec["diameter_mm"] = 20.0
        assert instrument_from_dict(spec).diameter_mm == 20.0

    def test_screw_stated_diameter_checked(self):
        with pytest.raises(ConfigError, match="vertex span"):
            instrument_from_dict({"kind": "screw", "diameter_mm": 20.0})

    def test_cube_edge_diameter_allowed(self, cube):
        assert cube.diameter_mm < cube.max_vertex_distance
        assert instrument_from_dict({"kind": "cube", "size_mm": 20.0}).diameter_mm == 20.0


class TestSupportTypes:
    def test_bounding_box_of_empty_set(self):
        with pytest.raises(EmptyInputError):
            BoundingBox.from_points(np.zeros((0, 3)))

    def test_bounding_box_contains(self, cube):
        box = cube.bounding_box
        assert box.contains(cube.vertices)
        assert not box.contains(np.array([[0.0, 0.0, 16.0]]))
        np.testing.assert_allclose(box.size, [30.0, 30.0, 30.0])

    def test_symmetry_axis_normalized(self):
        sym = Symmetry.continuous((0.0, 3.0, 4.0))
        np.testing.assert_allclose(sym.axis, (0.0, 0.6, 0.8))
        assert Symmetry.from_dict(sym.to_dict()) == sym

    def test_symmetry_rejects_unknown_kind(self):
        with pytest.raises(ConfigError):
            Symmetry("mirror")
