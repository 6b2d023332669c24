import numpy as np
import pytest

from conftest import random_field, rect_space
from ldgplate.dg_space import (BoundaryData, DGField, DGSpace, SpaceError, TensorBasis, gauss_lobatto_nodes)
from ldgplate.mesh import REFERENCE_NODES, build_crease_mesh, build_rect_mesh

CREASE = ([-4.8, 6.0], [4.8, 6.0], [0.0, 8.0])


def quadratic(x):
    return np.stack([x[:, 0] ** 2, x[:, 0] * x[:, 1], x[:, 1] ** 2 + x[:, 0]], axis=-1)


def quadratic_gradient(x):
    g = np.zeros((len(x), 3, 2))
    g[:, 0, 0] = 2 * x[:, 0]
    g[:, 1, 0] = x[:, 1]
    g[:, 1, 1] = x[:, 0]
    g[:, 2, 0] = 1.0
    g[:, 2, 1] = 2 * x[:, 1]
    return g


def test_lobatto_nodes():
    np.testing.assert_allclose(gauss_lobatto_nodes(2), [0.0, 0.5, 1.0], atol=1e-15)
    np.testing.assert_allclose(gauss_lobatto_nodes(3), [0.0, 0.5 - 0.5 / np.sqrt(5), 0.5 + 0.5 / np.sqrt(5), 1.0])


def test_basis_is_nodal():
    basis = TensorBasis(2)
    values, grads, hessians = basis.evaluate(REFERENCE_NODES)
    np.testing.assert_allclose(values, np.eye(9), atol=1e-13)
    pts = np.random.default_rng(0).random((20, 2))
    values, grads, hessians = basis.evaluate(pts)
    np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(grads.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(hessians.sum(axis=1), 0.0, atol=1e-11)


def test_degree_below_two_rejected():
    with pytest.raises(SpaceError):
        DGSpace(build_rect_mesh(0, 1, 0, 1, 1, 1), degree=1)


def test_dimensions(free_space):
    assert free_space.dofs_per_element == 9
    assert free_space.n_scalar == 8 * 9
    assert free_space.n_dofs == 3 * 8 * 9
    assert free_space.quad_points.shape == (16, 2)
    assert len(free_space.edge_params) == 4


def test_interpolation_reproduces_quadratics(free_space):
    field = free_space.interpolate(quadratic)
    t = free_space.element_tables
    pts = t.points.reshape(-1, 2)
    np.testing.assert_allclose(field.values().reshape(-1, 3), quadratic(pts), atol=1e-12)
    np.testing.assert_allclose(field.gradients().reshape(-1, 3, 2), quadratic_gradient(pts), atol=1e-11)
    hess = field.hessians()
    np.testing.assert_allclose(hess[..., 0, 0, 0], 2.0, atol=1e-10)
    np.testing.assert_allclose(hess[..., 1, 0, 1], 1.0, atol=1e-10)
    np.testing.assert_allclose(hess[..., 2, 1, 1], 2.0, atol=1e-10)


def test_evaluate_matches_tables(free_space, rng):
    field = random_field(free_space, rng)
    value, grad, hess = field.evaluate(3, [0.5, 0.5])
    np.testing.assert_allclose(grad, field.barycenter_gradients()[3], atol=1e-12)
    with pytest.raises(SpaceError):
        field.evaluate(0, [1.5, 0.5])


def test_continuous_field_has_no_interior_jumps(free_space):
    field = free_space.interpolate(quadratic)
    for edge in free_space.mesh.interior_edges:
        value_jump, grad_jump = free_space.edge_jumps(field, edge.index)
        assert np.abs(value_jump).max() < 1e-12
        assert np.abs(grad_jump).max() < 1e-11


def test_free_edges_carry_no_jump(free_space):
    field = free_space.zero_field()
    with pytest.raises(SpaceError):
        free_space.edge_jumps(field, free_space.mesh.free_edges[0].index)


def test_jump_sign(free_space):
    E = free_space.mesh.n_elements
    coeffs = np.repeat(np.arange(E, dtype=float), free_space.dofs_per_element)
    field = DGField(free_space, np.stack([coeffs, np.zeros_like(coeffs), np.zeros_like(coeffs)], axis=-1))
    for edge in free_space.mesh.interior_edges:
        lo, hi = edge.elements
        jump = free_space.jump_and_average(field, edge.index, 0)
        np.testing.assert_allclose(jump.value_jump[0], lo - hi, atol=1e-12)
        np.testing.assert_allclose(jump.value_average[0], 0.5 * (lo + hi), atol=1e-12)


def test_dirichlet_jumps_of_flat_plate(flat_clamped):
    space = flat_clamped.space
    assert flat_clamped.compatible
    for edge in space.mesh.dirichlet_edges:
        value_jump, grad_jump = space.edge_jumps(flat_clamped, edge.index)
        assert np.abs(value_jump).max() < 1e-13
        assert np.abs(grad_jump).max() < 1e-12


def test_homogeneous_dirichlet_jump_is_trace(clamped_space, rng):
    field = random_field(clamped_space, rng)
    edge = clamped_space.mesh.dirichlet_edges[0]
    value_jump, grad_jump = clamped_space.edge_jumps(field, edge.index)
    value, grad = clamped_space.edge_traces(field, edge.index)[0]
    np.testing.assert_array_equal(value_jump, value)
    np.testing.assert_array_equal(grad_jump, grad)


def test_incompatible_data_detected():
    space = rect_space(sides=("left",))
    stretched = BoundaryData(lambda x: np.stack([2 * x[:, 0], x[:, 1], 0 * x[:, 0]], axis=-1),
                             lambda x: np.tile([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]], (len(x), 1, 1)))
    assert not space.zero_field(stretched).compatible
    assert space.zero_field(BoundaryData.flat_plate()).compatible


def test_vector_layout(free_space, rng):
    field = random_field(free_space, rng)
    vec = field.vector
    np.testing.assert_array_equal(vec[:free_space.n_scalar], field.coefficients[:, 0])
    np.testing.assert_array_equal(DGField.from_vector(free_space, vec).coefficients, field.coefficients)
    with pytest.raises(SpaceError):
        DGField.from_vector(free_space, vec[:-1])


def test_added_requires_same_space(free_space, rng):
    other = rect_space()
    with pytest.raises(SpaceError):
        free_space.zero_field().added(random_field(other, rng))
    data = BoundaryData.flat_plate()
    y = free_space.zero_field(data).added(random_field(free_space, rng), 0.5)
    assert y.boundary_data is data


def test_edge_averages(free_space, clamped_space):
    field = free_space.interpolate(quadratic)
    laplacian = [2.0, 0.0, 2.0]
    for edge in free_space.mesh.interior_edges:
        x = free_space.edge_tables[edge.index].points[1:2]
        jump = free_space.jump_and_average(field, edge.index, 1)
        np.testing.assert_allclose(jump.value_average, quadratic(x)[0], atol=1e-12)
        np.testing.assert_allclose(jump.gradient_average, quadratic_gradient(x)[0], atol=1e-11)
        np.testing.assert_allclose(jump.divergence_average, laplacian, atol=1e-9)
        np.testing.assert_allclose(jump.gradient_jump, 0.0, atol=1e-11)

    data = BoundaryData(quadratic, quadratic_gradient)
    clamped = clamped_space.interpolate(quadratic, data)
    edge = clamped_space.mesh.dirichlet_edges[0]
    jump = clamped_space.jump_and_average(clamped, edge.index, 0)
    np.testing.assert_allclose(jump.value_jump, 0.0, atol=1e-12)
    np.testing.assert_allclose(jump.divergence_average, laplacian, atol=1e-9)


def to_reference(gmap, x, iterations=20):
    """Invert a geometric map by Newton's method."""
    ref = np.array([0.5, 0.5])
    for _ in range(iterations):
        ref = ref - np.linalg.solve(gmap.jacobian(ref), gmap.point(ref) - x)
    return ref


def fd_hessian(field, element, x, step=1e-5):
    """Central differences of the evaluated gradient in physical coordinates, (3, 2, 2)."""
    gmap = field.space.mesh.geometric_map(element)
    out = np.empty((3, 2, 2))
    for b in range(2):
        shift = step * np.eye(2)[b]
        _, plus, _ = field.evaluate(element, to_reference(gmap, x + shift))
        _, minus, _ = field.evaluate(element, to_reference(gmap, x - shift))
        out[:, :, b] = (plus - minus) / (2 * step)
    return out


def test_curved_element_hessian_matches_finite_differences(rng):
    mesh = build_crease_mesh(-4.8, 4.8, 0.0, 15.0, CREASE, 4, 6)
    space = DGSpace(mesh)
    edge = mesh.crease_edges[1]
    element = min(edge.elements, key=lambda e: mesh.region_id[e])
    assert np.abs(mesh.geometric_map(element).second_derivatives([0.5, 0.5])).max() > 1e-3
    x = mesh.barycenters[element]

    square = space.interpolate(lambda p: np.stack([p[:, 0] ** 2, np.zeros(len(p)), np.zeros(len(p))], axis=-1))
    _, _, hessian = square.evaluate(element, [0.5, 0.5])
    np.testing.assert_allclose(hessian[0], [[2.0, 0.0], [0.0, 0.0]], atol=1e-10)
    np.testing.assert_allclose(fd_hessian(square, element, x), hessian, rtol=1e-6, atol=1e-6)

    field = random_field(space, rng)
    _, _, hessian = field.evaluate(element, [0.5, 0.5])
    np.testing.assert_allclose(fd_hessian(field, element, x), hessian, rtol=1e-6,
                               atol=1e-6 * np.abs(hessian).max())
