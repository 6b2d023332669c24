import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh

from conftest import PLATE, random_field, rect_space
from ldgplate.dg_space import BoundaryData, DGField, DGSpace
from ldgplate.energy import EnergyError, EnergyForms, MultiplierField, SpontaneousCurvature
from ldgplate.flow import GradientFlow
from ldgplate.mesh import build_rect_mesh, side_predicate
from ldgplate.oracle import fd_variation, midpoint_error
from ldgplate.scenarios import flat_plate


def perturbed(space, rng, data=None, scale=0.05):
    """Flat plate plus a small random broken perturbation."""
    y = space.interpolate(flat_plate, data)
    return y.added(random_field(space, rng), scale)


def test_flat_plate_energies(clamped_forms, flat_clamped, identity_curvature):
    report = clamped_forms.energy_report(flat_clamped, identity_curvature)
    assert abs(report.bending) < 1e-12
    assert abs(report.cubic) < 1e-12
    assert abs(report.total) < 1e-12
    assert report.max_defect < 1e-12
    assert report.as_dict()["E_h"] == report.total


def test_total_is_bending_minus_cubic(clamped_forms, clamped_space, identity_curvature, rng):
    y = perturbed(clamped_space, rng, BoundaryData.flat_plate())
    report = clamped_forms.energy_report(y, identity_curvature)
    assert report.total == report.bending - report.cubic
    np.testing.assert_allclose(report.bending, clamped_forms.bending_energy(y), rtol=1e-13)
    np.testing.assert_allclose(report.cubic, clamped_forms.cubic_energy(y, identity_curvature), rtol=1e-13)
    assert report.bending > report.stabilization > 0


def test_stretched_plate_defect(free_space, free_forms):
    y = free_space.interpolate(lambda x: np.stack([2 * x[:, 0], x[:, 1], np.zeros(len(x))], axis=-1))
    defect, worst = free_forms.isometry_defect(y)
    np.testing.assert_allclose(defect, 3.0, rtol=1e-12)
    assert worst == pytest.approx(3.0)


def test_h2_product_of_smooth_quadratic(free_space):
    forms = EnergyForms(free_space, l2_weight=0.0)
    u = free_space.interpolate(lambda x: np.stack([x[:, 0] ** 2, np.zeros(len(x)), np.zeros(len(x))], axis=-1))
    np.testing.assert_allclose(forms.h2_product(u, u), 4.0 * 2.0, rtol=1e-10)
    np.testing.assert_allclose(forms.h2_norm(u), np.sqrt(8.0), rtol=1e-10)
    np.testing.assert_allclose(forms.hessian_l2_norm(u), np.sqrt(8.0), rtol=1e-10)
    np.testing.assert_allclose(forms.hessian_l2_norm(u, reduced=True), np.sqrt(8.0), rtol=1e-10)


def test_l2_weight_default(free_forms, clamped_forms):
    assert free_forms.l2_weight == 1.0
    assert clamped_forms.l2_weight == 0.0


@pytest.mark.parametrize("sides", [(), ("left",)])
def test_a_form_is_symmetric_and_twice_bending(sides, rng):
    space = rect_space(sides=sides)
    forms = EnergyForms(space)
    u, v = random_field(space, rng), random_field(space, rng)
    np.testing.assert_allclose(forms.a_form(u, v), forms.a_form(v, u), rtol=1e-11)
    np.testing.assert_allclose(forms.a_form(u, u), 2.0 * forms.bending_energy(u), rtol=1e-12)
    assert forms.a_form(u, u) > 0


def test_matrices_match_forms(clamped_forms, clamped_space, rng):
    u, v = random_field(clamped_space, rng), random_field(clamped_space, rng)
    a = clamped_forms.a_matrix()
    m = clamped_forms.h2_matrix(l2_weight=0.5)
    expected_a = sum(u.coefficients[:, c] @ (a @ v.coefficients[:, c]) for c in range(3))
    expected_m = sum(u.coefficients[:, c] @ (m @ v.coefficients[:, c]) for c in range(3))
    np.testing.assert_allclose(clamped_forms.a_form(u, v), expected_a, rtol=1e-10)
    np.testing.assert_allclose(clamped_forms.h2_product(u, v, l2_weight=0.5), expected_m, rtol=1e-10)


def test_a_vector_matches_a_form(clamped_forms, clamped_space, rng):
    y = perturbed(clamped_space, rng, BoundaryData.flat_plate())
    v = random_field(clamped_space, rng)
    np.testing.assert_allclose(np.sum(clamped_forms.a_vector(y) * v.coefficients), clamped_forms.a_form(y, v),
                               rtol=1e-10)


def test_a_vector_is_bending_variation(clamped_forms, clamped_space, rng):
    data = BoundaryData.flat_plate()
    for _ in range(20):
        y = perturbed(clamped_space, rng, data)
        v = random_field(clamped_space, rng)
        fd = fd_variation(clamped_forms.bending_energy, y, v, eps=1e-5)
        exact = clamped_forms.a_form(y, v)
        assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


@pytest.mark.parametrize("matrix", [np.eye(2), [[0.3, -0.4], [-0.4, 1.2]]])
def test_ell_is_cubic_variation(clamped_forms, clamped_space, rng, matrix):
    curvature = SpontaneousCurvature.constant(clamped_space.mesh, matrix)
    data = BoundaryData.flat_plate()

    def cubic(field):
        return clamped_forms.cubic_energy(field, curvature)

    for _ in range(20):
        y = perturbed(clamped_space, rng, data, scale=0.2)
        v = random_field(clamped_space, rng)
        fd = fd_variation(cubic, y, v, eps=1e-5)
        exact = clamped_forms.ell_form(y, v, curvature)
        assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


def test_ell_at_flat_plate_is_hessian_term(clamped_forms, flat_clamped, clamped_space, identity_curvature, rng):
    v = random_field(clamped_space, rng)
    hv = clamped_forms.reduced_hessian(v)
    expected = np.einsum('e,eab,eab->', clamped_space.mesh.areas, hv[:, 2], identity_curvature.matrices)
    np.testing.assert_allclose(clamped_forms.ell_form(flat_clamped, v, identity_curvature), expected,
                               rtol=1e-8, atol=1e-10)


def test_zero_curvature(clamped_forms, clamped_space, rng):
    zero = SpontaneousCurvature.constant(clamped_space.mesh, np.zeros((2, 2)))
    y = perturbed(clamped_space, rng, BoundaryData.flat_plate())
    assert clamped_forms.cubic_energy(y, zero) == 0.0
    assert not np.any(clamped_forms.ell_vector(y, zero))


def test_constraint_matrix_matches_b_form(clamped_forms, clamped_space, rng):
    y = perturbed(clamped_space, rng, BoundaryData.flat_plate())
    v = random_field(clamped_space, rng)
    mu = MultiplierField(rng.standard_normal((clamped_space.mesh.n_elements, 3)))
    B = clamped_forms.constraint_matrix(y)
    E = clamped_space.mesh.n_elements
    assert B.shape == (3 * E, clamped_space.n_dofs)
    coeffs = mu.coefficients(clamped_space.mesh.areas)
    np.testing.assert_allclose(coeffs @ (B @ v.vector), clamped_forms.b_form(y, v, mu), rtol=1e-11)


def test_vertical_directions_are_unconstrained_at_flat_plate(clamped_forms, flat_clamped, clamped_space):
    B = clamped_forms.constraint_matrix(flat_clamped).toarray()
    n = clamped_space.n_scalar
    assert np.abs(B[:, 2 * n:]).max() < 1e-14
    assert np.linalg.matrix_rank(B) == B.shape[0]


def test_linearized_metric_of_rigid_rotation(free_space, free_forms):
    y = free_space.interpolate(flat_plate)
    rotation = free_space.interpolate(lambda x: np.stack([-x[:, 1], x[:, 0], np.zeros(len(x))], axis=-1))
    assert np.abs(free_forms.linearized_metric(rotation, y)).max() < 1e-12


def test_multiplier_coefficients(rng):
    areas = rng.random(5) + 0.5
    mu = MultiplierField(rng.standard_normal((5, 3)))
    back = MultiplierField.from_coefficients(mu.coefficients(areas), areas)
    np.testing.assert_allclose(back.values, mu.values, rtol=1e-14)
    np.testing.assert_allclose(mu.l2_norm(areas), np.linalg.norm(mu.coefficients(areas)), rtol=1e-13)


def test_midpoint_rule_exact_for_affine():
    mesh = build_rect_mesh(*PLATE, 8, 4)
    assert midpoint_error(mesh, [0.7, -1.3], 2.0) < 1e-13 * 40


def test_curvature_validation(free_space):
    mesh = free_space.mesh
    with pytest.raises(EnergyError):
        SpontaneousCurvature.constant(mesh, [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(EnergyError):
        SpontaneousCurvature.per_region(mesh, {1: np.eye(2)})
    rotated = SpontaneousCurvature.rotated(mesh, [[1.0, 0.0], [0.0, 0.0]], np.pi / 3)
    np.testing.assert_array_equal(rotated.matrices[:, 0, 1], rotated.matrices[:, 1, 0])
    np.testing.assert_allclose(rotated.sup_norm, 1.0)


def test_invalid_parameters(free_space):
    with pytest.raises(EnergyError):
        EnergyForms(free_space, gamma0=0.0)
    with pytest.raises(EnergyError):
        EnergyForms(free_space, l2_weight=-1.0)


def test_fields_from_other_spaces_rejected(free_forms, rng):
    other = rect_space()
    with pytest.raises(EnergyError):
        free_forms.bending_energy(random_field(other, rng))


@pytest.mark.parametrize("nx, ny, rtol", [(32, 8, 0.1), pytest.param(64, 16, 0.05, marks=pytest.mark.slow)])
def test_interpolated_cylinder_bending(nx, ny, rtol):
    """Bending energy of a unit-radius cylinder clamped on the left is |Omega| / 2."""
    space = DGSpace(build_rect_mesh(*PLATE, nx, ny, side_predicate(["left"], *PLATE)))
    forms = EnergyForms(space)

    def cylinder(x):
        s = x[:, 0] + 5.0
        return np.stack([-5.0 + np.sin(s), x[:, 1], 1.0 - np.cos(s)], axis=-1)

    y = space.interpolate(cylinder, BoundaryData.flat_plate())
    assert forms.isometry_defect(y)[1] < 0.05
    np.testing.assert_allclose(forms.bending_energy(y), 20.0, rtol=rtol)


def test_data_jumps_use_boundary_values(clamped_forms, flat_clamped):
    shifted = DGField(flat_clamped.space, flat_clamped.coefficients + [0.0, 0.0, 1.0], flat_clamped.boundary_data)
    value_jumps, _ = clamped_forms.field_jumps(shifted)
    rows = clamped_forms.jumps.dirichlet_rows
    np.testing.assert_allclose(value_jumps[rows, 2], 1.0, atol=1e-12)
    np.testing.assert_allclose(value_jumps[~rows, 2], 0.0, atol=1e-12)


def test_self_energy():
    mesh = build_rect_mesh(*PLATE, 4, 2)
    assert SpontaneousCurvature.constant(mesh, np.eye(2)).self_energy(mesh.areas) == pytest.approx(40.0)


def generalized_extremes(matrix, metric):
    values = eigh(matrix.toarray(), metric.toarray(), eigvals_only=True)
    return values[0], values[-1]


def sweep_constants(levels):
    """Coercivity of a_h and the bound of ||H_h v|| / ||v||_H2 on left-clamped refinements."""
    coercivity, bound = [], []
    for nx, ny in levels:
        space = rect_space(nx, ny, sides=("left",))
        forms = EnergyForms(space)
        hessian_only = EnergyForms(space, gamma0=1e-12, gamma1=1e-12, table=forms.table)
        metric = forms.h2_matrix()
        coercivity.append(generalized_extremes(forms.a_matrix(), metric)[0])
        bound.append(np.sqrt(generalized_extremes(hessian_only.a_matrix(), metric)[1]))
    return np.array(coercivity), np.array(bound)


def test_stability_constants_are_mesh_independent():
    coercivity, bound = sweep_constants([(4, 2), (8, 4), (16, 8)])
    assert np.all(coercivity > 0)
    assert coercivity.max() / coercivity.min() < 1.5
    assert bound.max() / bound.min() < 1.5


@pytest.mark.slow
def test_hessian_bound_grows_slowly():
    _, bound = sweep_constants([(6, 3), (12, 6), (24, 12)])
    assert bound[-1] <= 1.1 * bound[0]


def test_b_form_continuity(rng):
    constants = []
    for nx, ny in [(4, 2), (8, 4), (16, 8)]:
        space = rect_space(nx, ny)
        forms = EnergyForms(space)
        y = space.interpolate(flat_plate)
        B = forms.constraint_matrix(y)
        metric = sp.kron(sp.identity(3), forms.h2_matrix(), format='csc')
        top = eigsh((B.T @ B).tocsc(), k=1, M=metric, which='LA', return_eigenvectors=False)[0]
        sup = np.sqrt(top)
        constants.append(sup / forms.h2_norm(y))
        for _ in range(5):
            v = random_field(space, rng)
            mu = MultiplierField(rng.standard_normal((space.mesh.n_elements, 3)))
            bound = sup * forms.h2_norm(v) * mu.l2_norm(space.mesh.areas)
            assert abs(forms.b_form(y, v, mu)) <= bound * (1 + 1e-6)
    assert max(constants) / min(constants) < 1.5


def test_cubic_energy_bound_on_flow_iterates(cylinder_problem):
    problem = cylinder_problem
    flow = GradientFlow(problem.forms, problem.curvature, problem.config.flow)
    state = flow.initial_state(problem.initial())
    domain = np.sqrt(problem.mesh.areas.sum())
    for _ in range(5):
        flow.step(state)
        y = state.y
        delta = problem.forms.isometry_defect(y)[1]
        bound = (2.0 * (1.0 + delta) * problem.curvature.sup_norm * domain
                 * problem.forms.hessian_l2_norm(y, reduced=True))
        assert abs(problem.forms.cubic_energy(y, problem.curvature)) <= bound
    assert abs(state.energy.cubic) > 0
