"""Independent checks used by the test suite and the study harness.

Nothing here reuses the assembled forms. The matrix lemma is closed form and
finite differences only call the functional. The spectrum probe applies the
Schur operator; the dense Schur reference solves with A itself.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import eigh_tridiagonal, solve

from .dg_space import DGField, TensorBasis
from .flow import SaddleSystem
from .mesh import Mesh, evaluate_maps, tensor_gauss_rule

log = logging.getLogger(__name__)


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class MatrixLemmaResult:
    A: NDArray
    residual: float
    bound: float          # |C| / (2 sigma_2(B))
    bound_holds: bool
    sigma2: float


def smallest_singular_value(B: ArrayLike) -> float:
    """sigma_2 of a 3x2 matrix from the closed-form eigenvalues of B^T B."""
    g = np.asarray(B, dtype=float).T @ np.asarray(B, dtype=float)
    half_trace = 0.5 * (g[0, 0] + g[1, 1])
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    disc = math.sqrt(max(half_trace * half_trace - det, 0.0))
    return math.sqrt(max(half_trace - disc, 0.0))


def solve_matrix_equation(B: ArrayLike, C: ArrayLike) -> MatrixLemmaResult:
    """Closed-form A with (A^T B + B^T A) : C = |C|^2 and |A| <= |C| / (2 sigma_2(B)).

    Raises:
        OracleError: If B is not a full-rank 3x2 matrix or C is not symmetric 2x2.
    """
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    if B.shape != (3, 2) or C.shape != (2, 2):
        raise OracleError(f"expected B 3x2 and C 2x2, got {B.shape} and {C.shape}")
    if C[0, 1] != C[1, 0]:
        raise OracleError("C must be symmetric")
    sigma2 = smallest_singular_value(B)
    if sigma2 <= 1e-14 * max(np.linalg.norm(B), 1.0):
        raise OracleError("B is rank deficient")
    c2 = float(np.sum(C * C))
    if c2 == 0.0:
        return MatrixLemmaResult(np.zeros((3, 2)), 0.0, 0.0, True, sigma2)
    bc = B @ C
    A = bc * c2 / (2.0 * float(np.sum(bc * bc)))
    residual = abs(float(np.sum((A.T @ B + B.T @ A) * C)) - c2)
    bound = math.sqrt(c2) / (2.0 * sigma2)
    return MatrixLemmaResult(A, residual, bound, bool(np.linalg.norm(A) <= bound * (1 + 1e-12)), sigma2)


def fd_variation(functional: Callable[[DGField], float], point: DGField, direction: DGField,
                 eps: float = 1e-5) -> float:
    """Central difference (F(y + eps v) - F(y - eps v)) / (2 eps)."""
    if not 1e-7 <= eps <= 1e-3:
        raise OracleError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    return (functional(point.added(direction, eps)) - functional(point.added(direction, -eps))) / (2.0 * eps)


def midpoint_error(mesh: Mesh, gradient: ArrayLike, value: float = 0.0) -> float:
    """|sum_T |T| f(x_T) - int f| for the affine f(x) = value + g . x.

    The exact integral uses a Gauss rule independent of the barycenters.
    """
    g = np.asarray(gradient, dtype=float)
    midpoint = float(np.sum(mesh.areas * (value + mesh.barycenters @ g)))
    pts, wts = tensor_gauss_rule(4)
    x, jac, _ = evaluate_maps(mesh.geometry, pts)
    exact = float(np.einsum('eq,q,eq->', np.abs(np.linalg.det(jac)), wts, value + x @ g))
    return abs(midpoint - exact)


def quadrature_exactness(degree: int) -> float:
    """Max error of the element rule on monomials xi^a eta^b, a, b <= 2 degree + 3."""
    pts, wts = tensor_gauss_rule(degree + 2)
    worst = 0.0
    top = 2 * degree + 3
    for a in range(top + 1):
        for b in range(top + 1):
            exact = 1.0 / ((a + 1) * (b + 1))
            worst = max(worst, abs(float(wts @ (pts[:, 0] ** a * pts[:, 1] ** b)) - exact))
    return worst


def basis_partition_error(degree: int, samples: int = 7) -> float:
    """Deviation of sum_i phi_i from 1 on a sample grid of the reference square."""
    t = np.linspace(0.0, 1.0, samples)
    ref = np.stack(np.meshgrid(t, t, indexing='xy'), -1).reshape(-1, 2)
    values, _, _ = TensorBasis(degree).evaluate(ref)
    return float(np.abs(values.sum(axis=1) - 1.0).max())


@dataclass(frozen=True)
class SpectrumProbe:
    lambda_max: float
    lambda_min: float
    kappa: float
    iterations: int


def lanczos(matvec: Callable[[NDArray], NDArray], n: int, steps: int, seed: int = 0,
            tol: float = 1e-12):
    """Lanczos with full reorthogonalization; returns the tridiagonal (alpha, beta)."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    basis = [q]
    alpha, beta = [], []
    for j in range(min(steps, n)):
        w = matvec(basis[j])
        a = float(basis[j] @ w)
        alpha.append(a)
        w = w - a * basis[j] - (beta[-1] * basis[j - 1] if j > 0 else 0.0)
        Q = np.array(basis)
        w = w - Q.T @ (Q @ w)
        b = float(np.linalg.norm(w))
        if b < tol * max(abs(a), 1.0) or j == min(steps, n) - 1:
            break
        beta.append(b)
        basis.append(w / b)
    return np.array(alpha), np.array(beta)


def schur_spectrum_probe(system: SaddleSystem, steps: int = 200, seed: int = 0) -> SpectrumProbe:
    """Extremal Ritz values of S_n = B_n A^-1 B_n^T."""
    alpha, beta = lanczos(system.schur_matvec, system.n_multipliers, steps, seed)
    ritz = eigh_tridiagonal(alpha, beta[:len(alpha) - 1], eigvals_only=True)
    lam_min, lam_max = float(ritz[0]), float(ritz[-1])
    kappa = lam_max / lam_min if lam_min > 0 else math.inf
    log.debug(f"schur probe: {len(alpha)} Lanczos steps, lambda in [{lam_min:.3e}, {lam_max:.3e}], kappa {kappa:.3e}")
    return SpectrumProbe(lam_max, lam_min, kappa, len(alpha))


def dense_schur(system: SaddleSystem) -> NDArray:
    """Explicit S_n = B A^-1 B^T from dense B and a dense SPD solve; only for small systems."""
    constraint = system.constraint.toarray()
    flow_matrix = np.kron(np.eye(3), system.inner.matrix.toarray())
    return constraint @ solve(flow_matrix, constraint.T, assume_a="pos")


def dense_kappa(system: SaddleSystem, matrix: Optional[NDArray] = None) -> float:
    eig = np.linalg.eigvalsh(dense_schur(system) if matrix is None else matrix)
    return float(eig[-1] / eig[0])
