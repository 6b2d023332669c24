"""Broken polynomial spaces V_h^k with three components.

Scalar degrees of freedom are numbered element by element,
``j = element * dofs_per_element + i``; a vector field stores its
coefficients as an array of shape ``(n_scalar, 3)``. The flat global vector
used by the solvers is component-major (``coefficients.T.ravel()``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .mesh import Edge, EdgeTag, Mesh, evaluate_maps, gauss_rule, tensor_gauss_rule

log = logging.getLogger(__name__)


class SpaceError(ValueError):
    """Raised on invalid use of a discrete space or field."""


def gauss_lobatto_nodes(degree: int) -> NDArray:
    """Gauss-Lobatto nodes of a degree on [0, 1] (the midpoint for degree 0)."""
    if degree == 0:
        return np.array([0.5])
    if degree == 1:
        return np.array([0.0, 1.0])
    interior = np.polynomial.legendre.Legendre.basis(degree).deriv().roots()
    return np.concatenate([[0.0], np.sort(0.5 * (interior.real + 1.0)), [1.0]])


class LagrangeBasis1D:
    def __init__(self, nodes: ArrayLike):
        self.nodes = np.asarray(nodes, dtype=float)
        n = len(self.nodes)
        coeffs = np.linalg.solve(np.vander(self.nodes, n, increasing=True), np.eye(n))
        self.polys = [np.polynomial.Polynomial(coeffs[:, j]) for j in range(n)]

    def __len__(self) -> int:
        return len(self.polys)

    def evaluate(self, t: ArrayLike, derivative: int = 0) -> NDArray:
        t = np.asarray(t, dtype=float)
        return np.stack([p.deriv(derivative)(t) if derivative else p(t) for p in self.polys])


class TensorBasis:
    """Tensor Lagrange basis of Q_k on the unit square, first index fastest."""

    def __init__(self, degree: int):
        if degree < 0:
            raise SpaceError(f"degree must be >= 0, got {degree}")
        self.degree = degree
        self.line = LagrangeBasis1D(gauss_lobatto_nodes(degree))
        self.size = len(self.line) ** 2

    def evaluate(self, ref_points: ArrayLike) -> Tuple[NDArray, NDArray, NDArray]:
        """Values (m, n), gradients (m, n, 2) and Hessians (m, n, 2, 2) on the reference square."""
        ref = np.atleast_2d(np.asarray(ref_points, dtype=float))
        lx = [self.line.evaluate(ref[:, 0], d) for d in range(3)]
        ly = [self.line.evaluate(ref[:, 1], d) for d in range(3)]
        # [m, b, a] -> index a + (k+1) b
        def outer(px, py):
            return np.einsum('am,bm->mba', px, py).reshape(len(ref), -1)
        values = outer(lx[0], ly[0])
        grads = np.stack([outer(lx[1], ly[0]), outer(lx[0], ly[1])], axis=-1)
        mixed = outer(lx[1], ly[1])
        hessians = np.stack([np.stack([outer(lx[2], ly[0]), mixed], axis=-1),
                             np.stack([mixed, outer(lx[0], ly[2])], axis=-1)], axis=-2)
        return values, grads, hessians


def pushforward(ref_grads: NDArray, ref_hessians: NDArray, jac: NDArray, second: NDArray) -> Tuple[NDArray, NDArray]:
    """Physical gradients and Hessians of mapped shape functions.

    Args:
        ref_grads: (m, n, 2) reference gradients.
        ref_hessians: (m, n, 2, 2) reference Hessians.
        jac: (E, m, 2, 2) map Jacobians.
        second: (E, m, 2, 2, 2) map second derivatives [d, a, b].

    Returns:
        Gradients (E, m, n, 2) and Hessians (E, m, n, 2, 2); the Hessian
        includes the curvature term of non-affine maps.

    Raises:
        SpaceError: If a Jacobian is singular.
    """
    det = np.linalg.det(jac)
    if np.any(np.abs(det) < 1e-14):
        raise SpaceError("singular Jacobian")
    jinv = np.linalg.inv(jac)
    grads = np.einsum('eqai,qba->eqbi', jinv, ref_grads)
    corrected = ref_hessians[None] - np.einsum('eqdac,eqbd->eqbac', second, grads)
    hessians = np.einsum('eqai,eqbac,eqcj->eqbij', jinv, corrected, jinv)
    return grads, hessians


@dataclass(frozen=True)
class ShapeValues:
    values: NDArray
    gradients: NDArray
    hessians: NDArray


@dataclass(frozen=True)
class ElementTables:
    points: NDArray      # (E, Q, 2)
    jxw: NDArray         # (E, Q) quadrature weight times |det J|
    values: NDArray      # (Q, B)
    gradients: NDArray   # (E, Q, B, 2)
    hessians: NDArray    # (E, Q, B, 2, 2)


@dataclass(frozen=True)
class EdgeSide:
    element: int
    sign: float          # +1 on the "-" side, -1 on the "+" side
    weight: float        # 1/2 on interior edges, 1 on boundary edges
    ref_points: NDArray  # (Q, 2)
    values: NDArray      # (Q, B)
    gradients: NDArray   # (Q, B, 2)


@dataclass(frozen=True)
class EdgeTables:
    edge: Edge
    points: NDArray      # (Q, 2)
    ds: NDArray          # (Q,) quadrature weight times line element
    normals: NDArray     # (Q, 2) fixed unit normal n_e
    h: float
    sides: Tuple[EdgeSide, ...]


@dataclass(frozen=True)
class EdgeJump:
    """Jumps and averages at one edge point; the tensor is tau = grad v, so div tau = Laplacian v."""
    value_jump: NDArray         # [v], (3,)
    gradient_jump: NDArray      # [grad v], (3, 2)
    value_average: NDArray      # <v>, (3,)
    gradient_average: NDArray   # <tau>, (3, 2)
    divergence_average: NDArray  # <div tau>, row-wise, (3,)


class LocalMassSolver:
    """Cholesky factors of element mass matrices, one per geometry class."""

    def __init__(self, mass: NDArray, classes: NDArray):
        self.size = mass.shape[1]
        self.groups: List[Tuple[NDArray, tuple]] = []
        self.factor_of = np.empty(len(mass), dtype=np.int64)
        for c in np.unique(classes):
            members = np.nonzero(classes == c)[0]
            try:
                factor = cho_factor(mass[members[0]])
            except LinAlgError as e:
                raise SpaceError(f"singular local mass matrix on element {members[0]}") from e
            self.factor_of[members] = len(self.groups)
            self.groups.append((members, factor))
        log.debug(f"local mass solver: {len(self.groups)} factorizations for {len(mass)} elements")

    def solve(self, rhs: NDArray) -> NDArray:
        """Solve M_T x_T = rhs_T for every element; rhs has shape (E, n, ...)."""
        out = np.empty_like(rhs, dtype=float)
        tail = rhs.shape[2:]
        for members, factor in self.groups:
            block = np.moveaxis(rhs[members], 1, 0).reshape(self.size, -1)
            sol = cho_solve(factor, block).reshape((self.size, len(members)) + tail)
            out[members] = np.moveaxis(sol, 0, 1)
        return out

    def solve_element(self, element: int, rhs: NDArray) -> NDArray:
        _, factor = self.groups[self.factor_of[element]]
        shape = rhs.shape
        return cho_solve(factor, rhs.reshape(self.size, -1)).reshape(shape)


class DGSpace:
    """Fully discontinuous [Q_k]^3 on a quadrilateral mesh."""

    components = 3

    def __init__(self, mesh: Mesh, degree: int = 2):
        if degree < 2:
            raise SpaceError(f"polynomial degree must be >= 2, got {degree}")
        self.mesh = mesh
        self.degree = degree
        self.basis = TensorBasis(degree)
        self.quad_points, self.quad_weights = tensor_gauss_rule(degree + 2)
        self.edge_params, self.edge_weights = gauss_rule(degree + 2)

    @property
    def dofs_per_element(self) -> int:
        return self.basis.size

    @property
    def n_scalar(self) -> int:
        return self.dofs_per_element * self.mesh.n_elements

    @property
    def n_dofs(self) -> int:
        return self.components * self.n_scalar

    def shape_functions(self, element: int, ref_points: ArrayLike, basis: Optional[TensorBasis] = None):
        """Values, physical gradients and Hessians of a basis on one element."""
        basis = basis or self.basis
        ref = np.atleast_2d(np.asarray(ref_points, dtype=float))
        values, ref_grads, ref_hess = basis.evaluate(ref)
        _, jac, second = evaluate_maps(self.mesh.geometry[element][None], ref)
        grads, hessians = pushforward(ref_grads, ref_hess, jac, second)
        return values, grads[0], hessians[0]

    def eval_shape(self, element: int, ref_point: ArrayLike) -> ShapeValues:
        ref = np.asarray(ref_point, dtype=float)
        if np.any(ref < -1e-14) or np.any(ref > 1 + 1e-14):
            raise SpaceError(f"reference point {ref} outside the unit square")
        values, grads, hessians = self.shape_functions(element, ref)
        return ShapeValues(values[0], grads[0], hessians[0])

    @cached_property
    def element_tables(self) -> ElementTables:
        values, ref_grads, ref_hess = self.basis.evaluate(self.quad_points)
        x, jac, second = evaluate_maps(self.mesh.geometry, self.quad_points)
        det = np.linalg.det(jac)
        if np.any(det <= 0.0):
            raise SpaceError("nonpositive Jacobian at a quadrature point")
        grads, hessians = pushforward(ref_grads, ref_hess, jac, second)
        return ElementTables(x, det * self.quad_weights, values, grads, hessians)

    @cached_property
    def barycenter_gradients(self) -> NDArray:
        """(E, B, 2) physical basis gradients at x_T."""
        bary = np.array([[0.5, 0.5]])
        _, ref_grads, ref_hess = self.basis.evaluate(bary)
        _, jac, second = evaluate_maps(self.mesh.geometry, bary)
        grads, _ = pushforward(ref_grads, ref_hess, jac, second)
        return grads[:, 0]

    @cached_property
    def mass_solver(self) -> LocalMassSolver:
        t = self.element_tables
        mass = np.einsum('eq,qa,qb->eab', t.jxw, t.values, t.values)
        return LocalMassSolver(mass, self.mesh.geometry_classes)

    def edge_side_tables(self, edge: Edge, side: int, basis: Optional[TensorBasis] = None) -> Tuple[NDArray, NDArray, NDArray]:
        """Reference points, values and physical gradients of a basis on one side of an edge."""
        ref = self.mesh.edge_reference_points(edge, self.edge_params, side)
        values, grads, _ = self.shape_functions(edge.elements[side], ref, basis)
        return ref, values, grads

    @cached_property
    def edge_tables(self) -> Tuple[EdgeTables, ...]:
        tables = []
        for edge in self.mesh.edges:
            x, length, normals = self.mesh.edge_frame(edge, self.edge_params)
            weight = 0.5 if len(edge.elements) == 2 else 1.0
            sides = []
            for s, element in enumerate(edge.elements):
                ref, values, grads = self.edge_side_tables(edge, s)
                sides.append(EdgeSide(element, 1.0 if s == 0 else -1.0, weight, ref, values, grads))
            tables.append(EdgeTables(edge, x, length * self.edge_weights, normals,
                                     float(self.mesh.edge_diameters[edge.index]), tuple(sides)))
        return tuple(tables)

    # fields

    def zero_field(self, boundary_data: Optional["BoundaryData"] = None) -> "DGField":
        return DGField(self, None, boundary_data)

    def interpolate(self, function: Callable[[NDArray], NDArray],
                    boundary_data: Optional["BoundaryData"] = None) -> "DGField":
        """Elementwise L2 projection of a vectorized function (n, 2) -> (n, 3)."""
        t = self.element_tables
        E, Q = t.jxw.shape
        f = np.asarray(function(t.points.reshape(-1, 2)), dtype=float).reshape(E, Q, 3)
        rhs = np.einsum('eq,qb,eqc->ebc', t.jxw, t.values, f)
        coeffs = self.mass_solver.solve(rhs)
        return DGField(self, coeffs.reshape(-1, 3), boundary_data)

    def edge_traces(self, field: "DGField", edge_index: int) -> List[Tuple[NDArray, NDArray]]:
        """(value (Q, 3), gradient (Q, 3, 2)) of the field traced from each side."""
        table = self.edge_tables[edge_index]
        coeffs = field.element_coefficients
        out = []
        for side in table.sides:
            c = coeffs[side.element]
            out.append((side.values @ c, np.einsum('qbd,bc->qcd', side.gradients, c)))
        return out

    def edge_jumps(self, field: "DGField", edge_index: int) -> Tuple[NDArray, NDArray]:
        """[v] and [grad v] at the edge quadrature points.

        Raises:
            SpaceError: On free boundary edges, which carry no jumps.
        """
        table = self.edge_tables[edge_index]
        tag = table.edge.tag
        if tag is EdgeTag.FREE:
            raise SpaceError(f"edge {edge_index} is a free boundary edge; it carries no jump")
        traces = self.edge_traces(field, edge_index)
        if tag is EdgeTag.INTERIOR:
            return traces[0][0] - traces[1][0], traces[0][1] - traces[1][1]
        value, grad = traces[0]
        if field.boundary_data is None:
            return value, grad
        data = field.boundary_data
        return value - data.value(table.points), grad - data.gradient(table.points)

    def jump_and_average(self, field: "DGField", edge_index: int, point: int) -> EdgeJump:
        """Jumps of v and averages of v, tau = grad v and div tau at one edge quadrature point.

        Averages are the mean of both traces on interior edges and the single
        trace on boundary edges.
        """
        value_jump, grad_jump = self.edge_jumps(field, edge_index)
        traces = self.edge_traces(field, edge_index)
        value_avg = np.mean([v[point] for v, _ in traces], axis=0)
        grad_avg = np.mean([g[point] for _, g in traces], axis=0)
        laplacians = []
        for side in self.edge_tables[edge_index].sides:
            _, _, hessians = self.shape_functions(side.element, side.ref_points[point])
            laplacians.append(np.einsum('bii,bc->c', hessians[0], field.element_coefficients[side.element]))
        return EdgeJump(value_jump[point], grad_jump[point], value_avg, grad_avg, np.mean(laplacians, axis=0))

    @cached_property
    def dirichlet_points(self) -> NDArray:
        pts = [self.edge_tables[e.index].points for e in self.mesh.dirichlet_edges]
        return np.concatenate(pts) if pts else np.empty((0, 2))


def _flat_value(x: NDArray) -> NDArray:
    x = np.atleast_2d(x)
    return np.stack([x[:, 0], x[:, 1], np.zeros(len(x))], axis=-1)


def _flat_gradient(x: NDArray) -> NDArray:
    x = np.atleast_2d(x)
    grad = np.zeros((len(x), 3, 2))
    grad[:, 0, 0] = 1.0
    grad[:, 1, 1] = 1.0
    return grad


@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet data (phi, Phi); both callables map (n, 2) points to (n, 3) and (n, 3, 2)."""
    value: Callable[[NDArray], NDArray]
    gradient: Callable[[NDArray], NDArray]

    @classmethod
    def flat_plate(cls) -> "BoundaryData":
        return cls(_flat_value, _flat_gradient)

    def is_compatible(self, points: NDArray, tol: float = 1e-10, step: float = 1e-6) -> bool:
        """Phi^T Phi = I and Phi = grad phi at the sample points."""
        if len(points) == 0:
            return True
        grad = self.gradient(points)
        metric = np.einsum('nci,ncj->nij', grad, grad)
        if np.abs(metric - np.eye(2)).max() > tol:
            return False
        fd = np.stack([(self.value(points + step * e) - self.value(points - step * e)) / (2 * step)
                       for e in np.eye(2)], axis=-1)
        return bool(np.abs(fd - grad).max() <= 1e-6 * max(1.0, np.abs(grad).max()))


class DGField:
    """Coefficients of a broken [Q_k]^3 field plus optional Dirichlet data.

    Fields without boundary data are homogeneous: their boundary jumps are
    taken against (0, 0).
    """

    def __init__(self, space: DGSpace, coefficients: Optional[ArrayLike] = None,
                 boundary_data: Optional[BoundaryData] = None):
        self.space = space
        if coefficients is None:
            coefficients = np.zeros((space.n_scalar, 3))
        self.coefficients = np.array(coefficients, dtype=float).reshape(space.n_scalar, 3)
        self.boundary_data = boundary_data

    @property
    def homogeneous(self) -> bool:
        return self.boundary_data is None

    @property
    def vector(self) -> NDArray:
        """Component-major flat coefficient vector."""
        return self.coefficients.T.ravel()

    @classmethod
    def from_vector(cls, space: DGSpace, vector: ArrayLike,
                    boundary_data: Optional[BoundaryData] = None) -> "DGField":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (space.n_dofs,):
            raise SpaceError(f"vector length {vector.shape} does not match {space.n_dofs} dofs")
        return cls(space, vector.reshape(3, space.n_scalar).T, boundary_data)

    def copy(self) -> "DGField":
        return DGField(self.space, self.coefficients, self.boundary_data)

    def with_coefficients(self, coefficients: ArrayLike) -> "DGField":
        return DGField(self.space, coefficients, self.boundary_data)

    def added(self, increment: "DGField", scale: float = 1.0) -> "DGField":
        """self + scale * increment, keeping this field's boundary data."""
        if increment.space is not self.space:
            raise SpaceError("fields live on different spaces")
        return self.with_coefficients(self.coefficients + scale * increment.coefficients)

    @property
    def element_coefficients(self) -> NDArray:
        return self.coefficients.reshape(self.space.mesh.n_elements, self.space.dofs_per_element, 3)

    def values(self) -> NDArray:
        """(E, Q, 3) values at element quadrature points."""
        return np.einsum('qb,ebc->eqc', self.space.element_tables.values, self.element_coefficients)

    def gradients(self) -> NDArray:
        """(E, Q, 3, 2) broken gradients at element quadrature points."""
        return np.einsum('eqbd,ebc->eqcd', self.space.element_tables.gradients, self.element_coefficients)

    def hessians(self) -> NDArray:
        """(E, Q, 3, 2, 2) broken Hessians at element quadrature points."""
        return np.einsum('eqbij,ebc->eqcij', self.space.element_tables.hessians, self.element_coefficients)

    def barycenter_gradients(self) -> NDArray:
        """(E, 3, 2) gradients at the barycenters x_T."""
        return np.einsum('ebd,ebc->ecd', self.space.barycenter_gradients, self.element_coefficients)

    def evaluate(self, element: int, ref_point: ArrayLike) -> Tuple[NDArray, NDArray, NDArray]:
        """Value (3,), gradient (3, 2) and Hessian (3, 2, 2) at one reference point."""
        shape = self.space.eval_shape(element, ref_point)
        c = self.element_coefficients[element]
        return (shape.values @ c,
                np.einsum('bd,bc->cd', shape.gradients, c),
                np.einsum('bij,bc->cij', shape.hessians, c))

    @property
    def compatible(self) -> bool:
        """Boundary data is isometric and consistent on the clamped edges."""
        if self.boundary_data is None:
            return False
        return self.boundary_data.is_compatible(self.space.dirichlet_points)
