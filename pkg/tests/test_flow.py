import dataclasses

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from ldgplate.config import FlowConfig
from ldgplate.flow import (CGConvergenceError, ConjugateGradient, EnergyIncreaseError, FlowCallback, GradientFlow,
                           IndefiniteSchurError, run_flow)
from ldgplate.scenarios import build_problem, preset_config


class Recorder(FlowCallback):
    def __init__(self, stop_after=None):
        self.records = []
        self.finished = None
        self.aborted = None
        self.stop_after = stop_after

    def on_step(self, state, record):
        self.records.append(record)

    def on_finish(self, state, report):
        self.finished = report

    def on_abort(self, state, error):
        self.aborted = error

    def should_stop(self):
        return self.stop_after is not None and len(self.records) >= self.stop_after


def make_flow(problem, **changes):
    config = problem.config.flow.model_copy(update=changes)
    return GradientFlow(problem.forms, problem.curvature, config)


def flow_matrix_apply(flow, vector, n):
    blocks = vector.reshape(3, n).T
    return (flow.inner.matrix @ blocks).T.ravel()


def test_flat_plate_is_stationary():
    problem = build_problem(preset_config("flat"))
    recorder = Recorder()
    state = run_flow(problem.initial(), problem.curvature, problem.config.flow, [recorder], forms=problem.forms)
    assert state.step == 1
    assert state.stop_reason == "converged"
    assert abs(state.energies[0]) < 1e-12
    assert abs(state.energies[-1]) < 1e-12
    assert state.increment_norm[0] < 1e-10
    assert len(recorder.records) == 1
    assert recorder.finished.steps == 1


def test_first_step_solves_the_saddle_system(cylinder_problem):
    flow = make_flow(cylinder_problem)
    state = flow.initial_state(cylinder_problem.initial())
    system = flow.assemble_step(state)
    E = cylinder_problem.mesh.n_elements
    n = cylinder_problem.space.n_scalar
    assert system.constraint.shape == (3 * E, 3 * n)
    assert np.abs(system.constraint.toarray()[:, 2 * n:]).max() < 1e-14

    solution = flow.solve_step(system)
    delta = solution.increment.vector
    residual = flow_matrix_apply(flow, delta, n) + system.constraint.T @ solution.multiplier - system.rhs
    scale = np.linalg.norm(system.rhs) + np.linalg.norm(system.constraint.T @ solution.multiplier)
    assert np.linalg.norm(residual) <= 1e-8 * scale
    assert solution.tangency <= 10 * flow.config.cg_rel_tol
    assert 0 < solution.cg_iters < flow.config.cg_max_iters


def test_iterative_inner_solver_agrees(cylinder_problem):
    direct = make_flow(cylinder_problem)
    iterative = make_flow(cylinder_problem, inner_solver="iterative")
    assert iterative.inner.method == "iterative"
    state = direct.initial_state(cylinder_problem.initial())
    a = direct.solve_step(direct.assemble_step(state)).increment.vector
    b = iterative.solve_step(iterative.assemble_step(state)).increment.vector
    np.testing.assert_allclose(b, a, atol=1e-6 * np.abs(a).max())


def test_cg_iteration_cap(cylinder_problem):
    flow = make_flow(cylinder_problem, cg_max_iters=1)
    state = flow.initial_state(cylinder_problem.initial())
    with pytest.raises(CGConvergenceError):
        flow.solve_step(flow.assemble_step(state))


def test_conjugate_gradient(rng):
    m = rng.standard_normal((12, 12))
    spd = m @ m.T + 12 * np.eye(12)
    rhs = rng.standard_normal(12)
    cg = ConjugateGradient(lambda x: spd @ x, rhs, 1e-12, 100)
    np.testing.assert_allclose(cg.solve(), np.linalg.solve(spd, rhs), rtol=1e-9)
    assert 0 < cg.num_iter <= 30
    warm = ConjugateGradient(lambda x: spd @ x, rhs, 1e-12, 100)
    warm.solve(np.linalg.solve(spd, rhs))
    assert warm.num_iter <= 1

    zero = ConjugateGradient(lambda x: spd @ x, np.zeros(12), 1e-12, 100)
    assert not np.any(zero.solve())
    with pytest.raises(IndefiniteSchurError):
        ConjugateGradient(lambda x: -x, rhs, 1e-12, 100).solve()


@pytest.mark.parametrize("steps", [100, pytest.param(500, marks=pytest.mark.slow)])
def test_cylinder_flow_decreases_energy(cylinder_problem, steps):
    flow = make_flow(cylinder_problem, max_steps=steps, tol=1e-12)
    recorder = Recorder()
    state = flow.run(cylinder_problem.initial(), [recorder])
    assert state.stop_reason == "max_steps"
    assert state.step == steps == len(recorder.records)
    energies = np.array(state.energies)
    slack = flow.config.energy_slack * (1 + np.abs(energies[:-1]))
    assert np.all(np.diff(energies) <= slack)
    assert energies[-1] < energies[0]
    assert max(state.tangency) <= 10 * flow.config.cg_rel_tol
    report = recorder.finished
    assert report.ledger_ok
    assert report.bounds_ok and report.defect_growth_ok
    assert report.dissipation > 0
    assert report.max_defect == state.max_defect[-1]
    assert [r["step"] for r in recorder.records] == list(range(1, steps + 1))
    np.testing.assert_allclose(recorder.records[-1]["time"], steps * flow.config.tau)


def test_runs_are_deterministic(cylinder_problem):
    first = make_flow(cylinder_problem, max_steps=5).run(cylinder_problem.initial())
    second = make_flow(cylinder_problem, max_steps=5).run(cylinder_problem.initial())
    assert first.energies == second.energies
    np.testing.assert_array_equal(first.y.coefficients, second.y.coefficients)


def test_defect_scales_with_tau(cylinder_problem):
    defects = []
    for tau in (1e-2, 5e-3, 2.5e-3):
        steps = round(1.0 / tau)
        flow = make_flow(cylinder_problem, tau=tau, tol=1e-14, max_steps=steps)
        state = flow.run(cylinder_problem.initial())
        assert state.step == steps
        defects.append(state.max_defect[-1])
    ratios = [defects[0] / defects[1], defects[1] / defects[2]]
    assert all(1.5 <= r <= 2.7 for r in ratios), ratios


def test_callback_can_stop_the_flow(cylinder_problem):
    recorder = Recorder(stop_after=2)
    state = make_flow(cylinder_problem).run(cylinder_problem.initial(), [recorder])
    assert state.step == 2
    assert state.stop_reason == "interrupted"
    assert recorder.finished.stop_reason == "interrupted"


def test_energy_increase_aborts(cylinder_problem, monkeypatch):
    flow = make_flow(cylinder_problem, max_steps=10)
    original = flow.forms.energy_report
    calls = {"n": 0}

    def growing(y, curvature):
        calls["n"] += 1
        report = original(y, curvature)
        return dataclasses.replace(report, total=report.total + 10.0 * calls["n"])

    monkeypatch.setattr(flow.forms, "energy_report", growing)
    recorder = Recorder()
    with pytest.raises(EnergyIncreaseError):
        flow.run(cylinder_problem.initial(), [recorder])
    assert isinstance(recorder.aborted, EnergyIncreaseError)
    assert recorder.records == []


def test_energy_increase_can_warn(cylinder_problem, monkeypatch):
    flow = make_flow(cylinder_problem, max_steps=2, abort_on_energy_increase=False, tol=1e-14)
    original = flow.forms.energy_report
    calls = {"n": 0}

    def growing(y, curvature):
        calls["n"] += 1
        report = original(y, curvature)
        return dataclasses.replace(report, total=report.total + 10.0 * calls["n"])

    monkeypatch.setattr(flow.forms, "energy_report", growing)
    state = flow.run(cylinder_problem.initial())
    assert state.step == 2
    assert state.warnings["energy_increase"] == 2


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(tau=0.0)


def test_tangency_is_relative_constraint_residual(cylinder_problem):
    flow = make_flow(cylinder_problem)
    state = flow.initial_state(cylinder_problem.initial())
    system = flow.assemble_step(state)
    solution = flow.solve_step(system)
    B = system.constraint
    scale = spla.norm(B) * np.linalg.norm(system.apply_inverse(system.rhs))
    expected = np.linalg.norm(B @ solution.increment.vector) / scale
    np.testing.assert_allclose(solution.tangency, expected, rtol=1e-10)


def test_run_flow_uses_the_given_lifting():
    problem = build_problem(preset_config("origami", ["mesh.nx=4", "mesh.ny=6", "flow.max_steps=1"]))
    assert problem.config.lifting.mode == "crease"
    reference = run_flow(problem.initial(), problem.curvature, problem.config.flow, forms=problem.forms)
    lifted = run_flow(problem.initial(), problem.curvature, problem.config.flow, lifting=problem.config.lifting)
    np.testing.assert_allclose(lifted.energies, reference.energies, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(lifted.y.coefficients, reference.y.coefficients, atol=1e-10)
    standard = run_flow(problem.initial(), problem.curvature, problem.config.flow)
    assert np.abs(standard.y.coefficients - lifted.y.coefficients).max() > 1e-8
