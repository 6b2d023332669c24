"""Liftings of edge jumps and the reconstructed discrete Hessian.

H_h[v] = D_h^2 v - sum_e r_e([grad v]) + sum_e b_e([v]); in crease mode the
gradient-jump lifting r_e is skipped on crease edges. Values are kept at
element quadrature points, shape (E, Q, 3, 2, 2).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .config import LiftingConfig
from .dg_space import BoundaryData, DGField, DGSpace, LocalMassSolver, TensorBasis
from .mesh import Edge, EdgeTag

log = logging.getLogger(__name__)


class HessianError(ValueError):
    """Raised on invalid lifting configurations or requests."""


@dataclass(frozen=True)
class DiscreteHessian:
    values: NDArray    # (E, Q, 3, 2, 2), offset included
    reduced: NDArray   # (E, 3, 2, 2) element averages
    offset: NDArray    # (E, Q, 3, 2, 2) contribution of the Dirichlet data


class LiftingSpace:
    """Degree-l lifting basis: element values, mass solves and edge traces."""

    def __init__(self, space: DGSpace, degree: int):
        self.space = space
        self.degree = degree
        self.basis = TensorBasis(degree)
        t = space.element_tables
        self.values, _, _ = self.basis.evaluate(space.quad_points)
        mass = np.einsum('eq,qa,qb->eab', t.jxw, self.values, self.values)
        self.solver = LocalMassSolver(mass, space.mesh.geometry_classes)
        self._traces: Dict[Tuple[int, int], Tuple[NDArray, NDArray]] = {}

    @cached_property
    def lift_map(self) -> NDArray:
        """(E, Q, L): maps a right-hand side to values, Theta M_T^{-1}."""
        E = self.space.mesh.n_elements
        rhs = np.broadcast_to(self.values.T, (E,) + self.values.T.shape).copy()
        return np.transpose(self.solver.solve(rhs), (0, 2, 1))

    def edge_traces(self, edge: Edge, side: int) -> Tuple[NDArray, NDArray]:
        """Values (Qe, L) and physical gradients (Qe, L, 2) on one side of an edge."""
        key = (edge.index, side)
        if key not in self._traces:
            _, values, grads = self.space.edge_side_tables(edge, side, self.basis)
            self._traces[key] = (values, grads)
        return self._traces[key]


class HessianAssembler:
    """Computes liftings and discrete Hessians of individual fields."""

    def __init__(self, space: DGSpace, config: Optional[LiftingConfig] = None):
        config = config or LiftingConfig(k=space.degree)
        if config.k != space.degree:
            raise HessianError(f"lifting config k={config.k} does not match space degree {space.degree}")
        if config.mode == "crease" and not space.mesh.has_crease:
            raise HessianError("crease mode requires a mesh with crease edges")
        self.space = space
        self.config = config
        self.r_space = LiftingSpace(space, config.l1)
        self.b_space = self.r_space if config.l2 == config.l1 else LiftingSpace(space, config.l2)

    def lifts_gradient_jump(self, edge: Edge) -> bool:
        return edge.active and not (self.config.mode == "crease" and edge.crease)

    def _check_active(self, edge_index: int) -> Edge:
        edge = self.space.mesh.edges[edge_index]
        if not edge.active:
            raise HessianError(f"edge {edge_index} is a free boundary edge; it has no lifting")
        return edge

    def lift_gradient_jump(self, edge_index: int, field: DGField) -> Dict[int, NDArray]:
        """Per-element values (Q, 3, 2, 2) of r_e([grad v]) on the edge patch."""
        edge = self._check_active(edge_index)
        if not self.lifts_gradient_jump(edge):
            return {}
        table = self.space.edge_tables[edge_index]
        _, grad_jump = self.space.edge_jumps(field, edge_index)
        out = {}
        for s, side in enumerate(table.sides):
            theta, _ = self.r_space.edge_traces(edge, s)
            rhs = side.weight * np.einsum('q,qm,qb,qca->mcab', table.ds, theta, table.normals, grad_jump)
            coeff = self.r_space.solver.solve_element(side.element, rhs)
            out[side.element] = np.einsum('Qm,mcab->Qcab', self.r_space.values, coeff)
        return out

    def lift_value_jump(self, edge_index: int, field: DGField) -> Dict[int, NDArray]:
        """Per-element values (Q, 3, 2, 2) of b_e([v]) on the edge patch."""
        edge = self._check_active(edge_index)
        table = self.space.edge_tables[edge_index]
        value_jump, _ = self.space.edge_jumps(field, edge_index)
        out = {}
        for s, side in enumerate(table.sides):
            _, dtheta = self.b_space.edge_traces(edge, s)
            # (div tau) . n for tau = theta_m E_ab is n_a d_b theta_m
            rhs = side.weight * np.einsum('q,qmb,qa,qc->mcab', table.ds, dtheta, table.normals, value_jump)
            coeff = self.b_space.solver.solve_element(side.element, rhs)
            out[side.element] = np.einsum('Qm,mcab->Qcab', self.b_space.values, coeff)
        return out

    def discrete_hessian(self, field: DGField) -> DiscreteHessian:
        """H_h of one field, lifting every active edge directly."""
        if self.space.mesh.has_dirichlet and field.boundary_data is None:
            log.debug("discrete_hessian: field without boundary data on a clamped mesh, using (0, 0)")
        values = field.hessians()
        for edge in self.space.mesh.active_edges:
            for element, lifted in self.lift_gradient_jump(edge.index, field).items():
                values[element] -= lifted
            for element, lifted in self.lift_value_jump(edge.index, field).items():
                values[element] += lifted
        offset = self.offset(field.boundary_data)
        return DiscreteHessian(values, reduce_to_constants(self.space, values), offset)

    def offset(self, boundary_data: Optional[BoundaryData]) -> NDArray:
        """Affine part of H_h contributed by the Dirichlet data: R(Phi) - B(phi)."""
        E = self.space.mesh.n_elements
        Q = len(self.space.quad_weights)
        out = np.zeros((E, Q, 3, 2, 2))
        if boundary_data is None:
            return out
        for edge in self.space.mesh.dirichlet_edges:
            table = self.space.edge_tables[edge.index]
            element = edge.elements[0]
            phi = boundary_data.value(table.points)
            grad_phi = boundary_data.gradient(table.points)
            theta, _ = self.r_space.edge_traces(edge, 0)
            _, dtheta = self.b_space.edge_traces(edge, 0)
            out[element] += np.einsum('Qm,q,qm,qb,qca->Qcab', self.r_space.lift_map[element],
                                      table.ds, theta, table.normals, grad_phi)
            out[element] -= np.einsum('Qm,q,qmb,qa,qc->Qcab', self.b_space.lift_map[element],
                                      table.ds, dtheta, table.normals, phi)
        return out


def reduce_to_constants(space: DGSpace, values: NDArray) -> NDArray:
    """Element averages (1/|T|) int_T of values at quadrature points."""
    jxw = space.element_tables.jxw
    return np.einsum('eq,eq...->e...', jxw, values) / jxw.sum(axis=1).reshape((-1,) + (1,) * (values.ndim - 2))


class BasisHessianTable:
    """Discrete Hessians of all scalar basis functions, stored as sparse operators.

    `matrix` maps scalar coefficients to H_h values at rows
    ((element * Q + q) * 2 + a) * 2 + b; the three components share it.
    `broken` is the same layout for the broken Hessian D_h^2 alone.
    """

    def __init__(self, assembler: HessianAssembler):
        self.assembler = assembler
        self.space = assembler.space
        self.config = assembler.config
        self._offsets: Dict[int, Tuple[BoundaryData, NDArray]] = {}
        try:
            self.broken, self.matrix = self._assemble()
            self.reduced_matrix = (self._averaging() @ self.matrix).tocsr()
        except MemoryError as e:
            raise HessianError(f"not enough memory to store basis Hessians for "
                               f"{self.space.n_scalar} scalar basis functions") from e
        log.debug(f"basis hessian table: {self.matrix.nnz} nonzeros")

    def _assemble(self):
        space = self.space
        t = space.element_tables
        E, Q, B = t.gradients.shape[:3]
        rows_of = np.arange(E * Q * 4).reshape(E, Q, 2, 2)
        cols_of = np.arange(E * B).reshape(E, B)

        # broken Hessian: rows (e, q, a, b), cols (e, i)
        r = np.broadcast_to(rows_of[:, :, :, :, None], (E, Q, 2, 2, B))
        c = np.broadcast_to(cols_of[:, None, None, None, :], (E, Q, 2, 2, B))
        v = np.transpose(t.hessians, (0, 1, 3, 4, 2))
        broken = sp.coo_matrix((v.ravel(), (r.ravel(), c.ravel())), shape=(E * Q * 4, E * B)).tocsr()

        rows, cols, vals = [r.ravel()], [c.ravel()], [v.ravel()]
        r_lift = self.assembler.r_space
        b_lift = self.assembler.b_space
        for edge in space.mesh.active_edges:
            table = space.edge_tables[edge.index]
            lift_r = self.assembler.lifts_gradient_jump(edge)
            for s_t, target in enumerate(table.sides):
                theta, _ = r_lift.edge_traces(edge, s_t)
                _, dtheta = b_lift.edge_traces(edge, s_t)
                for source in table.sides:
                    scale = target.weight * source.sign
                    block = np.zeros((Q, 2, 2, B))
                    if lift_r:
                        g = np.einsum('q,qm,qb,qia->mabi', table.ds, theta, table.normals, source.gradients)
                        block -= scale * np.einsum('Qm,mabi->Qabi', r_lift.lift_map[target.element], g)
                    g = np.einsum('q,qmb,qa,qi->mabi', table.ds, dtheta, table.normals, source.values)
                    block += scale * np.einsum('Qm,mabi->Qabi', b_lift.lift_map[target.element], g)
                    rr = np.broadcast_to(rows_of[target.element][..., None], block.shape)
                    cc = np.broadcast_to(cols_of[source.element], block.shape)
                    rows.append(rr.ravel())
                    cols.append(cc.ravel())
                    vals.append(block.ravel())
        matrix = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(E * Q * 4, E * B)).tocsr()
        return broken, matrix

    def _averaging(self) -> sp.csr_matrix:
        jxw = self.space.element_tables.jxw
        E, Q = jxw.shape
        weights = jxw / jxw.sum(axis=1, keepdims=True)
        rows = np.broadcast_to((np.arange(E)[:, None, None] * 4 + np.arange(4)[None, None, :]), (E, Q, 4))
        cols = np.broadcast_to((np.arange(E * Q).reshape(E, Q)[:, :, None] * 4 + np.arange(4)), (E, Q, 4))
        vals = np.broadcast_to(weights[:, :, None], (E, Q, 4))
        return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(E * 4, E * Q * 4)).tocsr()

    def offset(self, boundary_data: Optional[BoundaryData]) -> NDArray:
        """Dirichlet offset of H_h, assembled once per boundary data object."""
        if boundary_data is None:
            E, Q = self.space.element_tables.jxw.shape
            return np.zeros((E, Q, 3, 2, 2))
        key = id(boundary_data)
        if key not in self._offsets:
            self._offsets[key] = (boundary_data, self.assembler.offset(boundary_data))
        return self._offsets[key][1]

    def values(self, field: DGField) -> NDArray:
        """H_h values (E, Q, 3, 2, 2) including the data offset."""
        E, Q = self.space.element_tables.jxw.shape
        linear = (self.matrix @ field.coefficients).reshape(E, Q, 2, 2, 3)
        return np.moveaxis(linear, -1, 2) + self.offset(field.boundary_data)

    def reduced(self, field: DGField) -> NDArray:
        """Element averages (E, 3, 2, 2) including the data offset."""
        E = self.space.mesh.n_elements
        linear = np.moveaxis((self.reduced_matrix @ field.coefficients).reshape(E, 2, 2, 3), -1, 1)
        if field.boundary_data is None:
            return linear
        return linear + reduce_to_constants(self.space, self.offset(field.boundary_data))

    def apply(self, field: DGField) -> DiscreteHessian:
        values = self.values(field)
        return DiscreteHessian(values, reduce_to_constants(self.space, values), self.offset(field.boundary_data))

    def support(self, scalar_index: int) -> np.ndarray:
        """Elements on which the discrete Hessian of a scalar basis function is nonzero."""
        column = self.matrix.getcol(scalar_index)
        Q = len(self.space.quad_weights)
        return np.unique(column.nonzero()[0] // (Q * 4))


def precompute_basis_hessians(space: DGSpace, config: Optional[LiftingConfig] = None) -> BasisHessianTable:
    return BasisHessianTable(HessianAssembler(space, config))


def discrete_hessian(field: DGField, config: Optional[LiftingConfig] = None,
                     table: Optional[BasisHessianTable] = None) -> DiscreteHessian:
    """H_h[field]; uses the cached table when given, else lifts edge by edge."""
    if table is not None:
        return table.apply(field)
    return HessianAssembler(field.space, config).discrete_hessian(field)


def reduced_hessian(dh: DiscreteHessian) -> NDArray:
    return dh.reduced
