"""Semi-implicit discrete H2 gradient flow with linearized isometry constraints.

Each step solves the saddle-point system

    [ A   B_n^T ] [dy]   [f_n]
    [ B_n   0   ] [l ] = [ 0 ]

with A = M_H2 / tau + A_a fixed for the whole run, by conjugate gradients on
the Schur complement S_n = B_n A^-1 B_n^T.
"""
from __future__ import annotations

import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray
from typing_extensions import TypedDict

from .config import FlowConfig, LiftingConfig
from .dg_space import DGField
from .energy import EnergyForms, EnergyReport, MultiplierField, SpontaneousCurvature

log = logging.getLogger(__name__)


class FlowError(RuntimeError):
    """Raised when a flow step cannot be completed."""


class CGConvergenceError(FlowError):
    pass


class IndefiniteSchurError(FlowError):
    pass


class EnergyIncreaseError(FlowError):
    pass


class NonFiniteError(FlowError):
    pass


class StepRecord(TypedDict):
    step: int
    time: float
    E_h: float
    B_h: float
    C_h: float
    max_defect: float
    increment_norm: float
    cg_iters: int
    wall_ms: float
    tangency: float


class FlowCallback(ABC):
    """Receives flow progress; the runner writes files from here."""

    @abstractmethod
    def on_step(self, state: "FlowState", record: StepRecord) -> None:
        """Called after every accepted step."""

    def on_finish(self, state: "FlowState", report: "FlowReport") -> None:
        pass

    def on_abort(self, state: "FlowState", error: FlowError) -> None:
        pass

    def should_stop(self) -> bool:
        return False


@dataclass
class FlowState:
    step: int
    y: DGField
    multiplier: MultiplierField
    tau: float
    energies: List[float] = field(default_factory=list)
    bending: List[float] = field(default_factory=list)
    cubic: List[float] = field(default_factory=list)
    max_defect: List[float] = field(default_factory=list)
    increment_norm: List[float] = field(default_factory=list)
    cg_iters: List[int] = field(default_factory=list)
    tangency: List[float] = field(default_factory=list)
    dissipation: float = 0.0
    defect: Optional[NDArray] = None
    energy: Optional[EnergyReport] = None
    stop_reason: str = ""
    aborted: bool = False
    warnings: Dict[str, int] = field(default_factory=dict)
    report: Optional["FlowReport"] = None

    @property
    def time(self) -> float:
        return self.step * self.tau

    def record_energy(self, energy: EnergyReport) -> None:
        self.energies.append(energy.total)
        self.bending.append(energy.bending)
        self.cubic.append(energy.cubic)
        self.max_defect.append(energy.max_defect)
        self.defect = energy.defect
        self.energy = energy

    def warn(self, key: str) -> None:
        self.warnings[key] = self.warnings.get(key, 0) + 1


@dataclass
class FlowReport:
    steps: int
    stop_reason: str
    initial_energy: float
    final_energy: float
    final_bending: float
    final_cubic: float
    max_defect: float
    dissipation: float
    ledger_ok: bool
    ledger_gap: float
    defect_growth_ok: bool
    bounds_ok: bool
    max_tangency: float
    defect_constant: float
    aborted: bool = False
    warnings: Dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


class InnerSolver:
    """Applies the scalar block of A^-1 to all three components at once.

    The direct path factorizes once with SuperLU in symmetric mode (diagonal
    pivots only); the iterative path runs Jacobi-preconditioned CG per
    right-hand side.
    """

    def __init__(self, matrix: sp.spmatrix, method: str = "direct", rel_tol: float = 1e-13):
        self.matrix = sp.csc_matrix(matrix)
        self.rel_tol = rel_tol
        self.method = method
        self._lu = None
        if method == "direct":
            try:
                self._lu = spla.splu(self.matrix, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                     options=dict(SymmetricMode=True))
            except MemoryError:
                log.warning(f"factorization of the {self.matrix.shape[0]}x{self.matrix.shape[0]} flow matrix "
                            f"ran out of memory; falling back to CG on A")
                self.method = "iterative"
            except RuntimeError as e:
                raise FlowError(f"flow matrix is singular: {e}") from e
            if self._lu is not None:
                pivots = self._lu.U.diagonal()
                if np.any(pivots <= 0.0) or not np.all(np.isfinite(pivots)):
                    raise FlowError("flow matrix is not positive definite (nonpositive pivot)")
        if self.method == "iterative":
            diag = self.matrix.diagonal()
            if np.any(diag <= 0.0):
                raise FlowError("flow matrix is not positive definite (nonpositive diagonal)")
            self._jacobi = spla.LinearOperator(self.matrix.shape, matvec=lambda x: x / diag)
        log.debug(f"inner solver: {self.method}, n={self.matrix.shape[0]}, nnz={self.matrix.nnz}")

    def solve(self, rhs: NDArray) -> NDArray:
        """Solve A_s X = rhs for rhs of shape (n,) or (n, m)."""
        if self._lu is not None:
            return self._lu.solve(np.asarray(rhs, dtype=float))
        rhs = np.asarray(rhs, dtype=float)
        cols = rhs.reshape(rhs.shape[0], -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            x, info = spla.cg(self.matrix, cols[:, j], rtol=self.rel_tol, atol=0.0,
                              maxiter=10 * self.matrix.shape[0], M=self._jacobi)
            if info != 0:
                raise CGConvergenceError(f"inner CG on A did not converge (info={info})")
            out[:, j] = x
        return out.reshape(rhs.shape)


@dataclass
class SaddleSystem:
    inner: InnerSolver
    constraint: sp.csr_matrix   # B_n, (3E, 3 n_scalar)
    rhs: NDArray                # f_n, component-major (3 n_scalar,)
    n_scalar: int

    def apply_inverse(self, vector: NDArray) -> NDArray:
        """A^-1 on a component-major vector; A is block diagonal over components."""
        blocks = vector.reshape(3, self.n_scalar).T
        return self.inner.solve(blocks).T.ravel()

    def schur_matvec(self, m: NDArray) -> NDArray:
        return self.constraint @ self.apply_inverse(self.constraint.T @ m)

    @property
    def n_multipliers(self) -> int:
        return self.constraint.shape[0]


class ConjugateGradient:
    """Plain CG on an SPD operator given as a matvec."""

    def __init__(self, matvec: Callable[[NDArray], NDArray], rhs: NDArray, rel_tol: float, max_iter: int):
        self.matvec = matvec
        self.b = rhs
        self.rel_tol = rel_tol
        self.max_iter = max_iter
        self.num_iter = 0
        self.residual_norm = 0.0

    def solve(self, x0: Optional[NDArray] = None) -> NDArray:
        """Iterate to ||r|| <= rel_tol ||b||.

        Raises:
            IndefiniteSchurError: On nonpositive curvature d^T S d.
            CGConvergenceError: If max_iter is reached.
        """
        b_norm = np.linalg.norm(self.b)
        xk = np.zeros_like(self.b) if x0 is None else np.array(x0, dtype=float)
        if b_norm == 0.0:
            self.num_iter, self.residual_norm = 0, 0.0
            return np.zeros_like(self.b)
        tol = self.rel_tol * b_norm
        rk = self.b - self.matvec(xk) if x0 is not None else self.b.copy()
        rr = rk @ rk
        dk = rk.copy()
        k = 0
        while math.sqrt(rr) > tol:
            if k >= self.max_iter:
                self.num_iter, self.residual_norm = k, math.sqrt(rr)
                raise CGConvergenceError(
                    f"Schur CG did not reach relative residual {self.rel_tol:g} in {self.max_iter} iterations "
                    f"(residual {math.sqrt(rr) / b_norm:.3e}); try a smaller tau or a looser cg_rel_tol")
            sdk = self.matvec(dk)
            curvature = dk @ sdk
            if curvature <= 0.0:
                raise IndefiniteSchurError(f"nonpositive curvature {curvature:.3e} in Schur CG at iteration {k}")
            alpha = rr / curvature
            xk = xk + alpha * dk
            rk = rk - alpha * sdk
            rr_next = rk @ rk
            dk = rk + (rr_next / rr) * dk
            rr = rr_next
            k += 1
        self.num_iter, self.residual_norm = k, math.sqrt(rr)
        return xk


@dataclass(frozen=True)
class StepSolution:
    increment: DGField
    multiplier: NDArray         # orthonormal-basis coefficients, (3E,)
    cg_iters: int
    tangency: float             # ||B dy|| / (||B||_F ||A^-1 f||)


class GradientFlow:
    """Owns the constant flow matrix and advances FlowStates.

    Args:
        forms: Energy forms of the problem's space.
        curvature: Spontaneous curvature.
        config: Step size, stopping rule and solver settings.
    """

    # f below this norm is treated as zero: the state is stationary
    ZERO_LOAD = 1e-12

    def __init__(self, forms: EnergyForms, curvature: SpontaneousCurvature, config: FlowConfig):
        self.forms = forms
        self.space = forms.space
        self.curvature = curvature
        self.config = config
        self.metric = forms.h2_matrix(config.l2_weight)
        matrix = (self.metric / config.tau + forms.a_matrix()).tocsr()
        asym = abs(matrix - matrix.T).max() if matrix.nnz else 0.0
        scale = abs(matrix).max() if matrix.nnz else 1.0
        if asym > 1e-12 * max(scale, 1.0):
            raise FlowError(f"flow matrix is not symmetric (max asymmetry {asym:.3e})")
        started = time.perf_counter()
        self.inner = InnerSolver(matrix, config.inner_solver)
        log.info(f"flow matrix: n={matrix.shape[0]} per component, nnz={matrix.nnz}, "
                 f"prepared in {1e3 * (time.perf_counter() - started):.1f} ms")

    def initial_state(self, y0: DGField) -> FlowState:
        report = self.forms.energy_report(y0, self.curvature)
        if not math.isfinite(report.total):
            raise NonFiniteError("initial energy is not finite")
        if report.max_defect > 1e-10:
            log.warning(f"initial state has isometry defect {report.max_defect:.3e}")
        state = FlowState(0, y0, MultiplierField.zeros(self.space.mesh.n_elements), self.config.tau)
        state.record_energy(report)
        return state

    def increment_norm(self, increment: DGField) -> float:
        c = increment.coefficients
        return math.sqrt(max(float(np.sum(c * (self.metric @ c))), 0.0))

    def assemble_step(self, state: FlowState) -> SaddleSystem:
        y = state.y
        load = self.forms.ell_vector(y, self.curvature) - self.forms.a_vector(y)
        return SaddleSystem(self.inner, self.forms.constraint_matrix(y), load.T.ravel(), self.space.n_scalar)

    def solve_step(self, system: SaddleSystem, warm_start: Optional[NDArray] = None) -> StepSolution:
        """Schur CG for the multipliers, then one inner solve for the increment.

        The reported tangency is ||B dy|| / (||B||_F ||A^-1 f||). The Schur CG
        residual equals B dy, so this is bounded by cg_rel_tol whatever the
        size of dy; normalizing by ||dy|| instead would blow up near a
        stationary state where dy -> 0 faster than A^-1 f.
        """
        f = system.rhs
        zeros = DGField(self.space)
        if np.linalg.norm(f) <= self.ZERO_LOAD:
            return StepSolution(zeros, np.zeros(system.n_multipliers), 0, 0.0)
        a_inv_f = system.apply_inverse(f)
        cg = ConjugateGradient(system.schur_matvec, system.constraint @ a_inv_f,
                               self.config.cg_rel_tol, self.config.cg_max_iters)
        lam = cg.solve(warm_start)
        delta = system.apply_inverse(f - system.constraint.T @ lam)
        if not np.all(np.isfinite(delta)):
            raise NonFiniteError("increment has non-finite entries")
        scale = spla.norm(system.constraint) * np.linalg.norm(a_inv_f)
        tangency = float(np.linalg.norm(system.constraint @ delta) / scale) if scale > 0 else 0.0
        return StepSolution(DGField.from_vector(self.space, delta), lam, cg.num_iter, tangency)

    def _check_step(self, state: FlowState, previous: EnergyReport, current: EnergyReport,
                    increment: DGField) -> None:
        # D[y + dy] <= D[y] + |L[dy; y]| + |grad dy^T grad dy| holds pointwise
        g = increment.barycenter_gradients()
        quadratic = np.linalg.norm(np.einsum('eca,ecb->eab', g, g), axis=(1, 2))
        linear = np.linalg.norm(self.forms.linearized_metric(increment, state.y), axis=(1, 2))
        if np.any(current.defect > previous.defect + linear + quadratic + 1e-12):
            state.warn("defect_growth")
            log.warning(f"step {state.step + 1}: defect grew beyond its pointwise bound")
        grads = state.y.added(increment).barycenter_gradients()
        delta = current.max_defect + 1e-12
        sq = np.einsum('eca,eca->ea', grads, grads)
        cross = np.abs(np.einsum('ec,ec->e', grads[:, :, 0], grads[:, :, 1]))
        if np.any(np.abs(sq - 1.0) > delta) or np.any(cross > delta):
            state.warn("pointwise_bounds")
            log.warning(f"step {state.step + 1}: pointwise isometry bounds violated")
        budget = self.config.defect_budget
        if budget is not None and current.max_defect > budget:
            state.warn("defect_budget")
            log.warning(f"step {state.step + 1}: max defect {current.max_defect:.3e} exceeds budget {budget:.3e}")

    def step(self, state: FlowState) -> StepRecord:
        """Advance `state` by one step in place and return the step record.

        Raises:
            EnergyIncreaseError: If the energy grows beyond the slack and the
                config asks to abort.
            NonFiniteError: On NaN or infinite values.
        """
        started = time.perf_counter()
        previous = state.energy or self.forms.energy_report(state.y, self.curvature)
        system = self.assemble_step(state)
        warm = state.multiplier.coefficients(self.space.mesh.areas)
        solution = self.solve_step(system, warm if np.any(warm) else None)
        y_next = state.y.added(solution.increment)
        current = self.forms.energy_report(y_next, self.curvature)
        if not math.isfinite(current.total):
            raise NonFiniteError(f"energy became non-finite at step {state.step + 1}")

        slack = self.config.energy_slack * (1.0 + abs(previous.total))
        if current.total > previous.total + slack:
            msg = (f"energy increased at step {state.step + 1}: {previous.total:.10g} -> {current.total:.10g}; "
                   f"try a smaller tau")
            if self.config.abort_on_energy_increase:
                raise EnergyIncreaseError(msg)
            state.warn("energy_increase")
            log.warning(msg)
        self._check_step(state, previous, current, solution.increment)

        norm = self.increment_norm(solution.increment)
        state.step += 1
        state.y = y_next
        state.multiplier = MultiplierField.from_coefficients(solution.multiplier, self.space.mesh.areas)
        state.dissipation += norm ** 2 / (2.0 * state.tau)
        state.record_energy(current)
        state.increment_norm.append(norm)
        state.cg_iters.append(solution.cg_iters)
        state.tangency.append(solution.tangency)

        ledger = state.energies[0] + 1e-6 * abs(state.energies[0]) + 1e-10
        if current.total + state.dissipation > ledger:
            state.warn("energy_ledger")
            log.warning(f"step {state.step}: E + dissipation = {current.total + state.dissipation:.10g} "
                        f"exceeds E_0 = {state.energies[0]:.10g}")
        return StepRecord(step=state.step, time=state.time, E_h=current.total, B_h=current.bending,
                          C_h=current.cubic, max_defect=current.max_defect, increment_norm=norm,
                          cg_iters=solution.cg_iters, wall_ms=1e3 * (time.perf_counter() - started),
                          tangency=solution.tangency)

    def converged(self, state: FlowState) -> bool:
        if len(state.energies) < 2:
            return False
        return abs(state.energies[-1] - state.energies[-2]) / state.tau <= self.config.tol

    def run(self, y0: DGField, callbacks: Sequence[FlowCallback] = ()) -> FlowState:
        """Run until the stopping rule fires, max_steps is reached or a callback asks to stop.

        Raises:
            FlowError: After the callbacks have seen the aborted state.
        """
        state = self.initial_state(y0)
        log.info(f"flow start: E_h={state.energies[0]:.10g}, tau={state.tau:g}, tol={self.config.tol:g}")
        try:
            while state.step < self.config.max_steps:
                record = self.step(state)
                log.debug(f"step {record['step']} (t={record['time']:g}): E_h={record['E_h']:.10g} "
                          f"defect={record['max_defect']:.3e} cg={record['cg_iters']}")
                for cb in callbacks:
                    cb.on_step(state, record)
                if self.converged(state):
                    state.stop_reason = "converged"
                    break
                if any(cb.should_stop() for cb in callbacks):
                    state.stop_reason = "interrupted"
                    break
            else:
                state.stop_reason = "max_steps"
        except FlowError as e:
            state.aborted = True
            state.stop_reason = type(e).__name__
            state.report = self.report(state)
            log.error(f"flow aborted at step {state.step}: {e}")
            for cb in callbacks:
                cb.on_abort(state, e)
            raise
        state.report = self.report(state)
        log.info(f"flow finished ({state.stop_reason}) after {state.step} steps: E_h={state.energies[-1]:.10g}, "
                 f"max defect {state.max_defect[-1]:.3e}")
        for cb in callbacks:
            cb.on_finish(state, state.report)
        return state

    def report(self, state: FlowState) -> FlowReport:
        e0 = state.energies[0]
        gap = state.energies[-1] + state.dissipation - e0
        h_min = self.space.mesh.h_min
        log_h = max(abs(math.log(h_min)), 1.0)
        return FlowReport(
            steps=state.step,
            stop_reason=state.stop_reason,
            initial_energy=e0,
            final_energy=state.energies[-1],
            final_bending=state.bending[-1],
            final_cubic=state.cubic[-1],
            max_defect=state.max_defect[-1],
            dissipation=state.dissipation,
            ledger_ok=gap <= 1e-6 * abs(e0) + 1e-10,
            ledger_gap=gap,
            defect_growth_ok="defect_growth" not in state.warnings,
            bounds_ok="pointwise_bounds" not in state.warnings,
            max_tangency=max(state.tangency, default=0.0),
            defect_constant=state.max_defect[-1] / (state.tau * log_h),
            aborted=state.aborted,
            warnings=dict(state.warnings),
        )


def assemble_step(flow: GradientFlow, state: FlowState) -> SaddleSystem:
    return flow.assemble_step(state)


def solve_step(flow: GradientFlow, system: SaddleSystem, warm_start: Optional[NDArray] = None) -> StepSolution:
    return flow.solve_step(system, warm_start)


def run_flow(initial: DGField, curvature: SpontaneousCurvature, config: FlowConfig,
             callbacks: Sequence[FlowCallback] = (), forms: Optional[EnergyForms] = None,
             lifting: Optional[LiftingConfig] = None) -> FlowState:
    """Run a flow from `initial`; forms are built from `lifting` and the config when not given."""
    forms = forms or EnergyForms(initial.space, lifting, gamma0=config.gamma0, gamma1=config.gamma1,
                                 l2_weight=config.l2_weight)
    return GradientFlow(forms, curvature, config).run(initial, callbacks)
