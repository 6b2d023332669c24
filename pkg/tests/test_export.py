import meshio
import numpy as np
import pytest

from conftest import random_field, rect_space
from ldgplate.dg_space import BoundaryData
from ldgplate.energy import MultiplierField
from ldgplate.output import StateFormatError, export_flat_mesh, export_surface, load_state, save_state
from ldgplate.output.vtk import surface_points
from ldgplate.scenarios import flat_plate


def test_flat_surface_points():
    space = rect_space()
    points = surface_points(space.interpolate(flat_plate))
    assert points.shape == (space.mesh.n_elements * 9, 3)
    assert not np.any(points[:, 2])


def test_surface_vtk_is_readable(tmp_path):
    space = rect_space()
    path = export_surface(space.interpolate(flat_plate), tmp_path / "surface.vtk")
    mesh = meshio.read(path)
    assert mesh.cells[0].type == "quad9"
    assert len(mesh.cells[0].data) == space.mesh.n_elements
    np.testing.assert_allclose(mesh.cell_data["defect"][0], 0.0, atol=1e-12)


def test_flat_mesh_export_matches_surface(tmp_path):
    space = rect_space()
    export_flat_mesh(space.mesh, tmp_path / "reference.vtk")
    reference = meshio.read(tmp_path / "reference.vtk")
    np.testing.assert_allclose(reference.points, surface_points(space.interpolate(flat_plate)), atol=1e-12)


def test_state_round_trip(tmp_path, rng):
    space = rect_space(sides=("left",))
    y = random_field(space, rng, boundary_data=BoundaryData.flat_plate())
    mu = MultiplierField(rng.standard_normal((space.mesh.n_elements, 3)))
    save_state(tmp_path / "final_state.bin", y, mu, {"scenario": "test", "aborted": True})
    saved = load_state(tmp_path / "final_state.bin")
    assert saved.aborted
    assert saved.metadata["scenario"] == "test"
    assert saved.y.boundary_data is not None
    np.testing.assert_array_equal(saved.y.coefficients, y.coefficients)
    np.testing.assert_array_equal(saved.multiplier.values, mu.values)
    np.testing.assert_array_equal(saved.mesh.geometry, space.mesh.geometry)
    np.testing.assert_array_equal(saved.mesh.region_id, space.mesh.region_id)

    export_surface(y, tmp_path / "before.vtk")
    export_surface(saved.y, tmp_path / "after.vtk")
    assert (tmp_path / "before.vtk").read_bytes() == (tmp_path / "after.vtk").read_bytes()


def test_bad_state_files(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTASTATEFILE")
    with pytest.raises(StateFormatError, match="not a final-state file"):
        load_state(bad)
    short = tmp_path / "short.bin"
    short.write_bytes(b"LDGPLATE\x01")
    with pytest.raises(StateFormatError, match="truncated"):
        load_state(short)
