import numpy as np
import pytest

from ldgplate.dg_space import BoundaryData, DGField, DGSpace
from ldgplate.energy import EnergyForms, SpontaneousCurvature
from ldgplate.mesh import build_rect_mesh, side_predicate
from ldgplate.scenarios import build_problem, flat_plate, preset_config

PLATE = (-5.0, 5.0, -2.0, 2.0)


def rect_space(nx=4, ny=2, box=(0.0, 2.0, 0.0, 1.0), sides=()):
    dirichlet = side_predicate(sides, *box) if sides else None
    return DGSpace(build_rect_mesh(*box, nx, ny, dirichlet))


def random_field(space, rng, scale=1.0, boundary_data=None):
    return DGField(space, scale * rng.standard_normal((space.n_scalar, 3)), boundary_data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def free_space():
    return rect_space()


@pytest.fixture
def clamped_space():
    return rect_space(sides=("left",))


@pytest.fixture
def cylinder_problem():
    """Cylinder preset on 8 x 4 elements."""
    return build_problem(preset_config("cylinder", ["mesh.nx=8", "mesh.ny=4"]))


@pytest.fixture
def flat_clamped(clamped_space):
    return clamped_space.interpolate(flat_plate, BoundaryData.flat_plate())


@pytest.fixture
def identity_curvature(clamped_space):
    return SpontaneousCurvature.constant(clamped_space.mesh, np.eye(2))


@pytest.fixture
def clamped_forms(clamped_space):
    return EnergyForms(clamped_space)


@pytest.fixture
def free_forms(free_space):
    return EnergyForms(free_space)
