"""Energies and the bilinear/linear forms of the discrete flow.

Jump penalties live on the active edges (interior and clamped); free edges
carry none. The multiplier space is spanned per element by the L2-orthonormal
symmetric basis |T|^{-1/2} {E11, E22, (E12 + E21)/sqrt(2)}.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from numpy.typing import ArrayLike, NDArray

from .config import LiftingConfig
from .dg_space import BoundaryData, DGField, DGSpace
from .hessian import BasisHessianTable, precompute_basis_hessians
from .mesh import EdgeTag, Mesh

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class EnergyError(ValueError):
    """Raised on invalid energy parameters or mismatched fields."""


@dataclass(frozen=True)
class SpontaneousCurvature:
    matrices: NDArray   # (E, 2, 2), symmetric

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[1:] != (2, 2):
            raise EnergyError(f"curvature must have shape (E, 2, 2), got {m.shape}")
        if np.any(m[:, 0, 1] != m[:, 1, 0]):
            raise EnergyError("spontaneous curvature must be symmetric on every element")
        object.__setattr__(self, "matrices", m)

    @classmethod
    def constant(cls, mesh: Mesh, matrix: ArrayLike) -> "SpontaneousCurvature":
        return cls(np.broadcast_to(np.asarray(matrix, dtype=float), (mesh.n_elements, 2, 2)).copy())

    @classmethod
    def per_region(cls, mesh: Mesh, matrices: Mapping[int, ArrayLike]) -> "SpontaneousCurvature":
        missing = set(np.unique(mesh.region_id).tolist()) - set(matrices)
        if missing:
            raise EnergyError(f"no curvature given for regions {sorted(missing)}")
        table = {r: np.asarray(m, dtype=float) for r, m in matrices.items()}
        return cls(np.stack([table[int(r)] for r in mesh.region_id]))

    @classmethod
    def rotated(cls, mesh: Mesh, matrix: ArrayLike, angle: float) -> "SpontaneousCurvature":
        """R Z R^T, symmetrized exactly."""
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        z = rot @ np.asarray(matrix, dtype=float) @ rot.T
        return cls.constant(mesh, 0.5 * (z + z.T))

    @property
    def sup_norm(self) -> float:
        return float(np.linalg.norm(self.matrices, axis=(1, 2)).max())

    def self_energy(self, areas: NDArray) -> float:
        """1/2 int |Z|^2; E_h plus this is the energy 1/2 int |II - Z|^2 of an exact isometry."""
        return 0.5 * float(np.sum(areas * np.sum(self.matrices ** 2, axis=(1, 2))))


@dataclass
class MultiplierField:
    values: NDArray   # (E, 3): mu11, mu22, mu12

    @classmethod
    def zeros(cls, n_elements: int) -> "MultiplierField":
        return cls(np.zeros((n_elements, 3)))

    @classmethod
    def from_coefficients(cls, coefficients: ArrayLike, areas: NDArray) -> "MultiplierField":
        """Convert coefficients in the orthonormal basis (element-major, 3 per element)."""
        m = np.asarray(coefficients, dtype=float).reshape(-1, 3)
        root = np.sqrt(areas)
        return cls(np.stack([m[:, 0] / root, m[:, 1] / root, m[:, 2] / (SQRT2 * root)], axis=1))

    def coefficients(self, areas: NDArray) -> NDArray:
        root = np.sqrt(areas)
        v = self.values
        return np.stack([v[:, 0] * root, v[:, 1] * root, v[:, 2] * SQRT2 * root], axis=1).ravel()

    @property
    def matrices(self) -> NDArray:
        v = self.values
        return np.stack([np.stack([v[:, 0], v[:, 2]], -1), np.stack([v[:, 2], v[:, 1]], -1)], axis=1)

    def l2_norm(self, areas: NDArray) -> float:
        return float(math.sqrt(np.sum(areas * np.sum(self.matrices ** 2, axis=(1, 2)))))


@dataclass(frozen=True)
class EnergyReport:
    bending: float          # B_h, stabilization included
    stabilization: float
    cubic: float            # C_h
    total: float            # E_h = B_h - C_h
    max_defect: float
    defect: NDArray         # (E,)

    def as_dict(self) -> Dict[str, float]:
        return {"E_h": self.total, "B_h": self.bending, "S_h": self.stabilization,
                "C_h": self.cubic, "max_defect": self.max_defect}


@dataclass(frozen=True)
class JumpOperators:
    """Jump rows at the quadrature points of all active edges.

    `values` maps scalar coefficients to [v] at rows k; `gradients` to
    [grad v] at rows 2k + a. Offsets hold the Dirichlet data part.
    """
    values: sp.csr_matrix
    gradients: sp.csr_matrix
    value_weights: NDArray      # ds h_e^-3
    gradient_weights: NDArray   # ds h_e^-1, zero on skipped crease edges
    points: NDArray             # (K, 2)
    dirichlet_rows: NDArray     # (K,) bool


def build_jump_operators(space: DGSpace, skip_crease_gradients: bool = False) -> JumpOperators:
    B = space.dofs_per_element
    r0, c0, v0, r1, c1, v1 = [], [], [], [], [], []
    w0, w1, pts, dirichlet = [], [], [], []
    k = 0
    for edge in space.mesh.active_edges:
        table = space.edge_tables[edge.index]
        nq = len(table.ds)
        rows = k + np.arange(nq)
        for side in table.sides:
            cols = side.element * B + np.arange(B)
            r0.append(np.repeat(rows, B))
            c0.append(np.tile(cols, nq))
            v0.append((side.sign * side.values).ravel())
            # gradient rows (q, a), columns i
            r1.append(np.repeat((2 * rows[:, None] + np.arange(2)).ravel(), B))
            c1.append(np.tile(cols, 2 * nq))
            v1.append((side.sign * np.transpose(side.gradients, (0, 2, 1))).ravel())
        gradient_scale = 0.0 if (skip_crease_gradients and edge.crease) else 1.0
        w0.append(table.ds / table.h ** 3)
        w1.append(np.repeat(gradient_scale * table.ds / table.h, 2))
        pts.append(table.points)
        dirichlet.append(np.full(nq, edge.tag is EdgeTag.DIRICHLET))
        k += nq
    n = space.n_scalar
    if k == 0:
        empty = sp.csr_matrix((0, n))
        return JumpOperators(empty, sp.csr_matrix((0, n)), np.zeros(0), np.zeros(0),
                             np.zeros((0, 2)), np.zeros(0, dtype=bool))
    values = sp.coo_matrix((np.concatenate(v0), (np.concatenate(r0), np.concatenate(c0))), shape=(k, n)).tocsr()
    grads = sp.coo_matrix((np.concatenate(v1), (np.concatenate(r1), np.concatenate(c1))), shape=(2 * k, n)).tocsr()
    return JumpOperators(values, grads, np.concatenate(w0), np.concatenate(w1),
                         np.concatenate(pts), np.concatenate(dirichlet))


class EnergyForms:
    """Discrete energies and flow forms on one space.

    Args:
        space: The DG space.
        lifting: Lifting degrees and mode; defaults to l1 = l2 = k, standard.
        gamma0: Penalty on value jumps, > 0.
        gamma1: Penalty on gradient jumps, > 0.
        l2_weight: L2 term of the H2_h metric; None picks 1.0 for free
            plates and 0.0 when some edge is clamped.
        table: Precomputed basis Hessians, built when omitted.
    """

    def __init__(self, space: DGSpace, lifting: Optional[LiftingConfig] = None,
                 gamma0: float = 1.0, gamma1: float = 1.0, l2_weight: Optional[float] = None,
                 table: Optional[BasisHessianTable] = None):
        if not (gamma0 > 0 and gamma1 > 0):
            raise EnergyError(f"stabilization parameters must be positive, got gamma0={gamma0}, gamma1={gamma1}")
        if l2_weight is not None and l2_weight < 0:
            raise EnergyError(f"l2_weight must be nonnegative, got {l2_weight}")
        self.space = space
        self.mesh = space.mesh
        self.lifting = lifting or LiftingConfig(k=space.degree)
        self.gamma0 = float(gamma0)
        self.gamma1 = float(gamma1)
        self.l2_weight = float(l2_weight) if l2_weight is not None else (0.0 if self.mesh.has_dirichlet else 1.0)
        self.table = table or precompute_basis_hessians(space, self.lifting)
        self.jumps = build_jump_operators(space, self.lifting.mode == "crease")
        self._offsets: Dict[int, Tuple[BoundaryData, NDArray, NDArray]] = {}
        log.debug(f"energy forms: {space.n_scalar} scalar dofs, {len(self.jumps.value_weights)} jump points, "
                  f"l2_weight={self.l2_weight}")

    # field-level helpers

    def _check(self, *fields: DGField) -> None:
        for f in fields:
            if f.space is not self.space:
                raise EnergyError("field lives on a different space than these forms")

    @cached_property
    def _row_weights(self) -> NDArray:
        return np.repeat(self.space.element_tables.jxw.ravel(), 4)

    def _data_offsets(self, data: Optional[BoundaryData]) -> Tuple[NDArray, NDArray]:
        K = len(self.jumps.value_weights)
        if data is None or not self.jumps.dirichlet_rows.any():
            return np.zeros((K, 3)), np.zeros((2 * K, 3))
        key = id(data)
        if key not in self._offsets:
            rows = self.jumps.dirichlet_rows
            off0 = np.zeros((K, 3))
            off1 = np.zeros((K, 2, 3))
            pts = self.jumps.points[rows]
            off0[rows] = -data.value(pts)
            off1[rows] = -np.transpose(data.gradient(pts), (0, 2, 1))
            self._offsets[key] = (data, off0, off1.reshape(2 * K, 3))
        _, off0, off1 = self._offsets[key]
        return off0, off1

    def field_jumps(self, field: DGField) -> Tuple[NDArray, NDArray]:
        """[v] (K, 3) and [grad v] (2K, 3) at all active-edge quadrature points."""
        off0, off1 = self._data_offsets(field.boundary_data)
        return self.jumps.values @ field.coefficients + off0, self.jumps.gradients @ field.coefficients + off1

    def hessian_values(self, field: DGField) -> NDArray:
        """H_h[field] at element quadrature points, (E, Q, 3, 2, 2)."""
        return self.table.values(field)

    def reduced_hessian(self, field: DGField) -> NDArray:
        return self.table.reduced(field)

    def _hessian_rows(self, field: DGField) -> NDArray:
        return np.moveaxis(self.hessian_values(field), 2, -1).reshape(-1, 3)

    def _jump_products(self, u: DGField, v: DGField) -> Tuple[float, float]:
        u0, u1 = self.field_jumps(u)
        if v is u:
            v0, v1 = u0, u1
        else:
            v0, v1 = self.field_jumps(v)
        return (float(np.sum(self.jumps.value_weights[:, None] * u0 * v0)),
                float(np.sum(self.jumps.gradient_weights[:, None] * u1 * v1)))

    # metric

    def h2_product(self, u: DGField, v: DGField, l2_weight: Optional[float] = None) -> float:
        """(D2 u, D2 v) + (h^-1 [grad u], [grad v]) + (h^-3 [u], [v]) + l2_weight (u, v)."""
        self._check(u, v)
        l2 = self.l2_weight if l2_weight is None else l2_weight
        jxw = self.space.element_tables.jxw
        broken = float(np.einsum('eq,eqcab,eqcab->', jxw, u.hessians(), v.hessians()))
        j0, j1 = self._jump_products(u, v)
        mass = float(np.einsum('eq,eqc,eqc->', jxw, u.values(), v.values())) if l2 else 0.0
        return broken + j1 + j0 + l2 * mass

    def h2_norm(self, v: DGField, l2_weight: Optional[float] = None) -> float:
        return math.sqrt(max(self.h2_product(v, v, l2_weight), 0.0))

    def hessian_l2_norm(self, v: DGField, reduced: bool = False) -> float:
        """||H_h[v]||_L2, or ||reduced H_h[v]||_L2 when `reduced`."""
        self._check(v)
        if reduced:
            hbar = self.reduced_hessian(v)
            return math.sqrt(float(np.einsum('e,ecab,ecab->', self.mesh.areas, hbar, hbar)))
        h = self.hessian_values(v)
        return math.sqrt(float(np.einsum('eq,eqcab,eqcab->', self.space.element_tables.jxw, h, h)))

    # bending

    def a_form(self, u: DGField, v: DGField) -> float:
        self._check(u, v)
        hu = self.hessian_values(u)
        hv = hu if v is u else self.hessian_values(v)
        j0, j1 = self._jump_products(u, v)
        return float(np.einsum('eq,eqcab,eqcab->', self.space.element_tables.jxw, hu, hv)) \
            + self.gamma1 * j1 + self.gamma0 * j0

    def stabilization(self, y: DGField) -> float:
        self._check(y)
        j0, j1 = self._jump_products(y, y)
        return 0.5 * (self.gamma1 * j1 + self.gamma0 * j0)

    def bending_energy(self, y: DGField) -> float:
        """B_h[y] = a_h(y, y) / 2."""
        return 0.5 * self.a_form(y, y)

    # cubic term and constraint

    def cubic_energy(self, y: DGField, curvature: SpontaneousCurvature) -> float:
        """Midpoint rule: sum_T |T| sum_ab reduced H_ab . (d1 y x d2 y) Z_ab at x_T."""
        self._check(y)
        grads = y.barycenter_gradients()
        normal = np.cross(grads[:, :, 0], grads[:, :, 1])
        hbar = self.reduced_hessian(y)
        return float(np.einsum('e,ecab,ec,eab->', self.mesh.areas, hbar, normal, curvature.matrices))

    def isometry_defect(self, y: DGField) -> Tuple[NDArray, float]:
        """|grad y^T grad y - I|_F at every barycenter, and its maximum."""
        self._check(y)
        g = y.barycenter_gradients()
        metric = np.einsum('eca,ecb->eab', g, g) - np.eye(2)
        defect = np.linalg.norm(metric, axis=(1, 2))
        return defect, float(defect.max())

    def energy_report(self, y: DGField, curvature: SpontaneousCurvature) -> EnergyReport:
        bending = self.bending_energy(y)
        cubic = self.cubic_energy(y, curvature)
        defect, max_defect = self.isometry_defect(y)
        return EnergyReport(bending, self.stabilization(y), cubic, bending - cubic, max_defect, defect)

    def ell_vector(self, y: DGField, curvature: SpontaneousCurvature) -> NDArray:
        """Coefficients (n_scalar, 3) of v -> d/de C_h[y + e v] at e = 0."""
        self._check(y)
        E = self.mesh.n_elements
        areas = self.mesh.areas
        z = curvature.matrices
        grads = y.barycenter_gradients()
        d1, d2 = grads[:, :, 0], grads[:, :, 1]
        normal = np.cross(d1, d2)
        kernel = np.einsum('e,ec,eab->eabc', areas, normal, z).reshape(E * 4, 3)
        out = self.table.reduced_matrix.T @ kernel
        h = np.einsum('ecab,eab->ec', self.reduced_hessian(y), z)
        g = self.space.barycenter_gradients
        second = np.einsum('e,ei,ec->eic', areas, g[:, :, 0], np.cross(d2, h))
        third = np.einsum('e,ei,ec->eic', areas, g[:, :, 1], np.cross(h, d1))
        return out + (second + third).reshape(-1, 3)

    def ell_form(self, y: DGField, v: DGField, curvature: SpontaneousCurvature) -> float:
        self._check(v)
        return float(np.sum(self.ell_vector(y, curvature) * v.coefficients))

    def linearized_metric(self, v: DGField, y: DGField) -> NDArray:
        """L[v; y] = grad v^T grad y + grad y^T grad v at barycenters, (E, 2, 2)."""
        self._check(v, y)
        m = np.einsum('eca,ecb->eab', v.barycenter_gradients(), y.barycenter_gradients())
        return m + np.transpose(m, (0, 2, 1))

    def b_form(self, y: DGField, v: DGField, mu: MultiplierField) -> float:
        return float(np.einsum('e,eab,eab->', self.mesh.areas, self.linearized_metric(v, y), mu.matrices))

    def constraint_matrix(self, y: DGField) -> sp.csr_matrix:
        """B (3E x 3 n_scalar): row 3T + r pairs L[.; y](x_T) with the r-th multiplier basis tensor.

        Columns are component-major, c * n_scalar + T * B + i.
        """
        self._check(y)
        E, B = self.mesh.n_elements, self.space.dofs_per_element
        n = self.space.n_scalar
        g = self.space.barycenter_gradients          # (E, B, 2)
        yg = y.barycenter_gradients()                # (E, 3, 2)
        root = np.sqrt(self.mesh.areas)[:, None, None]
        l11 = 2.0 * g[:, :, None, 0] * yg[:, None, :, 0]
        l22 = 2.0 * g[:, :, None, 1] * yg[:, None, :, 1]
        l12 = g[:, :, None, 0] * yg[:, None, :, 1] + g[:, :, None, 1] * yg[:, None, :, 0]
        vals = np.stack([root * l11, root * l22, root * SQRT2 * l12], axis=1)   # (E, 3, B, 3)
        rows = np.broadcast_to((3 * np.arange(E))[:, None, None, None] + np.arange(3)[None, :, None, None], vals.shape)
        cols = np.broadcast_to(np.arange(3)[None, None, None, :] * n
                               + (np.arange(E)[:, None, None, None] * B + np.arange(B)[None, None, :, None]),
                               vals.shape)
        return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * E, 3 * n)).tocsr()

    # matrices of the flow

    @cached_property
    def mass_matrix(self) -> sp.csr_matrix:
        t = self.space.element_tables
        mass = np.einsum('eq,qa,qb->eab', t.jxw, t.values, t.values)
        return sp.block_diag(list(mass), format='csr')

    def _jump_matrix(self, gamma0: float, gamma1: float) -> sp.csr_matrix:
        j = self.jumps
        return (gamma1 * (j.gradients.T @ sp.diags(j.gradient_weights) @ j.gradients)
                + gamma0 * (j.values.T @ sp.diags(j.value_weights) @ j.values)).tocsr()

    def h2_matrix(self, l2_weight: Optional[float] = None) -> sp.csr_matrix:
        """Scalar block of the H2_h metric; the three components share it."""
        l2 = self.l2_weight if l2_weight is None else l2_weight
        d2 = self.table.broken
        m = d2.T @ sp.diags(self._row_weights) @ d2 + self._jump_matrix(1.0, 1.0)
        if l2:
            m = m + l2 * self.mass_matrix
        return m.tocsr()

    def a_matrix(self) -> sp.csr_matrix:
        hs = self.table.matrix
        return (hs.T @ sp.diags(self._row_weights) @ hs + self._jump_matrix(self.gamma0, self.gamma1)).tocsr()

    def a_vector(self, y: DGField) -> NDArray:
        """Coefficients (n_scalar, 3) of v -> a_h(y, v) for homogeneous v."""
        self._check(y)
        j = self.jumps
        h = self._hessian_rows(y) * self._row_weights[:, None]
        j0, j1 = self.field_jumps(y)
        return (self.table.matrix.T @ h
                + self.gamma1 * (j.gradients.T @ (j.gradient_weights[:, None] * j1))
                + self.gamma0 * (j.values.T @ (j.value_weights[:, None] * j0)))
