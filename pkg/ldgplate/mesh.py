"""Conforming quadrilateral meshes with biquadratic element maps.

Every element carries the nine nodes of a biquadratic map from the unit
square. Straight meshes place the nodes by bilinear interpolation of the
corners, so the map reduces to the bilinear one; crease meshes bend the
edges lying on the crease onto the quadratic curve.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

log = logging.getLogger(__name__)

EdgePredicate = Callable[[NDArray, NDArray], bool]
"""Called with an edge midpoint and its outward unit normal."""

Q2_NODES_1D = np.array([0.0, 0.5, 1.0])
# lexicographic, first coordinate fastest
REFERENCE_NODES = np.array([[a, b] for b in Q2_NODES_1D for a in Q2_NODES_1D])
CORNER_NODES = (0, 2, 8, 6)
# local edge -> (first, second) local vertex along the edge parameter
LOCAL_EDGE_VERTICES = ((0, 1), (1, 2), (3, 2), (0, 3))
# +1 when the edge parameter runs counterclockwise around the element
LOCAL_EDGE_ORIENTATION = (1.0, 1.0, -1.0, -1.0)
LOCAL_EDGE_DIRECTION = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])


class MeshError(ValueError):
    """Raised when a mesh cannot be built or violates its invariants."""


class EdgeTag(str, Enum):
    INTERIOR = "interior"
    DIRICHLET = "dirichlet"
    FREE = "free"


def local_edge_points(local: int, t: ArrayLike) -> NDArray:
    """Reference coordinates of local edge `local` at parameters `t`."""
    t = np.asarray(t, dtype=float)
    zero, one = np.zeros_like(t), np.ones_like(t)
    if local == 0:
        return np.stack([t, zero], axis=-1)
    if local == 1:
        return np.stack([one, t], axis=-1)
    if local == 2:
        return np.stack([t, one], axis=-1)
    if local == 3:
        return np.stack([zero, t], axis=-1)
    raise MeshError(f"local edge index out of range: {local}")


def _lagrange_q2(t: NDArray) -> Tuple[NDArray, NDArray, NDArray]:
    t = np.asarray(t, dtype=float)
    values = np.stack([2 * t * t - 3 * t + 1, 4 * t - 4 * t * t, 2 * t * t - t])
    first = np.stack([4 * t - 3, 4 - 8 * t, 4 * t - 1])
    second = np.stack([np.full_like(t, 4.0), np.full_like(t, -8.0), np.full_like(t, 4.0)])
    return values, first, second


def q2_shape(ref_points: ArrayLike) -> Tuple[NDArray, NDArray, NDArray]:
    """Biquadratic map shape functions with first and second derivatives.

    Returns arrays of shape (n, 9), (n, 9, 2) and (n, 9, 2, 2).
    """
    ref = np.atleast_2d(np.asarray(ref_points, dtype=float))
    lx, dlx, d2lx = _lagrange_q2(ref[:, 0])
    ly, dly, d2ly = _lagrange_q2(ref[:, 1])
    n = ref.shape[0]
    values = np.empty((n, 9))
    grads = np.empty((n, 9, 2))
    hessians = np.empty((n, 9, 2, 2))
    for b in range(3):
        for a in range(3):
            k = a + 3 * b
            values[:, k] = lx[a] * ly[b]
            grads[:, k, 0] = dlx[a] * ly[b]
            grads[:, k, 1] = lx[a] * dly[b]
            hessians[:, k, 0, 0] = d2lx[a] * ly[b]
            hessians[:, k, 0, 1] = dlx[a] * dly[b]
            hessians[:, k, 1, 0] = dlx[a] * dly[b]
            hessians[:, k, 1, 1] = lx[a] * d2ly[b]
    return values, grads, hessians


def evaluate_maps(geometry: NDArray, ref_points: ArrayLike) -> Tuple[NDArray, NDArray, NDArray]:
    """Points, Jacobians and second derivatives of element maps.

    Args:
        geometry: (n_elements, 9, 2) map nodes.
        ref_points: (n, 2) reference points.

    Returns:
        x of shape (n_elements, n, 2); J of shape (n_elements, n, 2, 2) with
        J[..., d, a] = dx_d/dxi_a; second derivatives (n_elements, n, 2, 2, 2)
        indexed [..., d, a, b].
    """
    values, grads, hessians = q2_shape(ref_points)
    x = np.einsum('nk,ekd->end', values, geometry)
    jac = np.einsum('nka,ekd->enda', grads, geometry)
    second = np.einsum('nkab,ekd->endab', hessians, geometry)
    return x, jac, second


def gauss_rule(n: int) -> Tuple[NDArray, NDArray]:
    """Gauss-Legendre rule with n points on [0, 1]."""
    pts, wts = np.polynomial.legendre.leggauss(n)
    return 0.5 * (pts + 1.0), 0.5 * wts


def tensor_gauss_rule(n: int) -> Tuple[NDArray, NDArray]:
    """Tensor Gauss rule with n*n points on the unit square (first coordinate fastest)."""
    pts, wts = gauss_rule(n)
    xx, yy = np.meshgrid(pts, pts)
    wx, wy = np.meshgrid(wts, wts)
    return np.stack([xx.ravel(), yy.ravel()], axis=-1), (wx * wy).ravel()


class GeometricMap:
    """Biquadratic map F_T from the unit square onto one element."""

    def __init__(self, nodes: ArrayLike):
        self.nodes = np.asarray(nodes, dtype=float).reshape(9, 2)

    def _eval(self, ref_point: ArrayLike):
        ref = np.asarray(ref_point, dtype=float)
        single = ref.ndim == 1
        x, jac, second = evaluate_maps(self.nodes[None], np.atleast_2d(ref))
        if single:
            return x[0, 0], jac[0, 0], second[0, 0]
        return x[0], jac[0], second[0]

    def point(self, ref_point: ArrayLike) -> NDArray:
        return self._eval(ref_point)[0]

    def jacobian(self, ref_point: ArrayLike) -> NDArray:
        return self._eval(ref_point)[1]

    def inverse_jacobian(self, ref_point: ArrayLike) -> NDArray:
        jac = self.jacobian(ref_point)
        det = np.linalg.det(jac)
        if np.any(np.abs(det) < 1e-14):
            raise MeshError("singular Jacobian")
        return np.linalg.inv(jac)

    def second_derivatives(self, ref_point: ArrayLike) -> NDArray:
        return self._eval(ref_point)[2]


@dataclass(frozen=True)
class Edge:
    index: int
    # endpoints in the direction of the edge parameter of the first element
    vertices: Tuple[int, int]
    # (minus, plus) for interior edges, (owner,) for boundary edges
    elements: Tuple[int, ...]
    local_edges: Tuple[int, ...]
    flipped: Tuple[bool, ...]
    tag: EdgeTag
    crease: bool = False

    @property
    def is_boundary(self) -> bool:
        return len(self.elements) == 1

    @property
    def active(self) -> bool:
        return self.tag is not EdgeTag.FREE


def straight_geometry(corners: NDArray) -> NDArray:
    """Biquadratic nodes reproducing the bilinear map through four corners."""
    corners = np.asarray(corners, dtype=float)
    xi, eta = REFERENCE_NODES[:, 0], REFERENCE_NODES[:, 1]
    weights = np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=-1)
    return np.einsum('nc,ecd->end', weights, corners)


class Mesh:
    """Immutable conforming quadrilateral mesh.

    Elements list their vertices counterclockwise. Interior edge normals
    point from the lower to the higher element index; boundary normals point
    outward.
    """

    def __init__(self,
                 vertices: ArrayLike,
                 elements: ArrayLike,
                 geometry: Optional[ArrayLike] = None,
                 region_id: Optional[ArrayLike] = None,
                 dirichlet: Optional[EdgePredicate] = None,
                 crease_edges: Iterable[Tuple[int, int]] = (),
                 dirichlet_edges: Optional[Iterable[Tuple[int, int]]] = None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.elements = np.asarray(elements, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError(f"vertices must be (n, 2), got {self.vertices.shape}")
        if self.elements.ndim != 2 or self.elements.shape[1] != 4:
            raise MeshError(f"only quadrilateral elements are supported, got {self.elements.shape}")
        if len(self.elements) == 0:
            raise MeshError("mesh has no elements")
        if geometry is None:
            geometry = straight_geometry(self.vertices[self.elements])
        self.geometry = np.asarray(geometry, dtype=float)
        if self.geometry.shape != (len(self.elements), 9, 2):
            raise MeshError(f"geometry must be (n_elements, 9, 2), got {self.geometry.shape}")
        if region_id is None:
            region_id = np.zeros(len(self.elements), dtype=np.int64)
        self.region_id = np.asarray(region_id, dtype=np.int64)
        for arr in (self.vertices, self.elements, self.geometry, self.region_id):
            arr.setflags(write=False)
        self._build_edges(dirichlet, {tuple(sorted(e)) for e in crease_edges},
                          None if dirichlet_edges is None else {tuple(sorted(e)) for e in dirichlet_edges})
        log.debug(f"mesh: {self.n_elements} elements, {len(self.interior_edges)} interior, "
                  f"{len(self.dirichlet_edges)} dirichlet, {len(self.free_edges)} free, "
                  f"{len(self.crease_edges)} crease edges")

    # construction

    def _build_edges(self, dirichlet, crease_keys, dirichlet_keys):
        owners: Dict[Tuple[int, int], List[Tuple[int, int]]] = defaultdict(list)
        order: List[Tuple[int, int]] = []
        for e, quad in enumerate(self.elements):
            for local, (a, b) in enumerate(LOCAL_EDGE_VERTICES):
                key = tuple(sorted((int(quad[a]), int(quad[b]))))
                if key not in owners:
                    order.append(key)
                owners[key].append((e, local))

        edges: List[Edge] = []
        element_edges = np.empty((self.n_elements, 4), dtype=np.int64)
        for index, key in enumerate(order):
            adjacent = owners[key]
            if len(adjacent) > 2:
                raise MeshError(f"edge {key} is shared by {len(adjacent)} elements")
            e0, l0 = adjacent[0]
            a, b = LOCAL_EDGE_VERTICES[l0]
            vertices = (int(self.elements[e0][a]), int(self.elements[e0][b]))
            flipped = [False]
            for e, local in adjacent[1:]:
                a, b = LOCAL_EDGE_VERTICES[local]
                flipped.append((int(self.elements[e][a]), int(self.elements[e][b])) != vertices)
            for e, local in adjacent:
                element_edges[e, local] = index
            crease = key in crease_keys
            if len(adjacent) == 2:
                tag = EdgeTag.INTERIOR
            else:
                if crease:
                    raise MeshError(f"crease edge {key} lies on the boundary")
                if dirichlet_keys is not None:
                    clamped = key in dirichlet_keys
                elif dirichlet is not None:
                    mid, normal = self._frame(e0, l0, np.array([0.5]))[0::2]
                    clamped = bool(dirichlet(mid[0], normal[0]))
                else:
                    clamped = False
                tag = EdgeTag.DIRICHLET if clamped else EdgeTag.FREE
            edges.append(Edge(index=index,
                              vertices=vertices,
                              elements=tuple(e for e, _ in adjacent),
                              local_edges=tuple(l for _, l in adjacent),
                              flipped=tuple(flipped),
                              tag=tag,
                              crease=crease))
        missing = crease_keys - set(order)
        if missing:
            raise MeshError(f"crease edges not in mesh: {sorted(missing)}")
        self.edges: Tuple[Edge, ...] = tuple(edges)
        self.element_edges = element_edges
        self.element_edges.setflags(write=False)

    def _frame(self, element: int, local: int, t: NDArray) -> Tuple[NDArray, NDArray, NDArray]:
        """Points, parameter tangents and outward unit normals along a local edge."""
        ref = local_edge_points(local, t)
        x, jac, _ = evaluate_maps(self.geometry[element][None], ref)
        tangent = jac[0] @ LOCAL_EDGE_DIRECTION[local]
        length = np.linalg.norm(tangent, axis=-1, keepdims=True)
        s = LOCAL_EDGE_ORIENTATION[local]
        normal = s * np.stack([tangent[:, 1], -tangent[:, 0]], axis=-1) / length
        return x[0], tangent, normal

    # queries

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def interior_edges(self) -> Tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.tag is EdgeTag.INTERIOR)

    @cached_property
    def dirichlet_edges(self) -> Tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.tag is EdgeTag.DIRICHLET)

    @cached_property
    def free_edges(self) -> Tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.tag is EdgeTag.FREE)

    @cached_property
    def active_edges(self) -> Tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.active)

    @cached_property
    def crease_edges(self) -> Tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.crease)

    @property
    def has_crease(self) -> bool:
        return len(self.crease_edges) > 0

    @property
    def has_dirichlet(self) -> bool:
        return len(self.dirichlet_edges) > 0

    def geometric_map(self, element: int) -> GeometricMap:
        return GeometricMap(self.geometry[element])

    def edge_points(self, edge: Union[Edge, int], t: ArrayLike, side: int = 0) -> NDArray:
        """Physical points of `edge` at edge parameters `t`, traced from one side."""
        edge = self.edges[edge] if isinstance(edge, (int, np.integer)) else edge
        t = np.asarray(t, dtype=float)
        ref = self.edge_reference_points(edge, t, side)
        x, _, _ = evaluate_maps(self.geometry[edge.elements[side]][None], ref)
        return x[0]

    def edge_reference_points(self, edge: Edge, t: ArrayLike, side: int = 0) -> NDArray:
        t = np.asarray(t, dtype=float)
        if edge.flipped[side]:
            t = 1.0 - t
        return local_edge_points(edge.local_edges[side], t)

    def edge_frame(self, edge: Union[Edge, int], t: ArrayLike) -> Tuple[NDArray, NDArray, NDArray]:
        """Points, line-element lengths |dx/dt| and the fixed unit normal n_e along an edge."""
        edge = self.edges[edge] if isinstance(edge, (int, np.integer)) else edge
        x, tangent, normal = self._frame(edge.elements[0], edge.local_edges[0], np.asarray(t, dtype=float))
        return x, np.linalg.norm(tangent, axis=-1), normal

    def edge_normal(self, edge: Union[Edge, int]) -> NDArray:
        """Unit normal at the edge midpoint."""
        return self.edge_frame(edge, np.array([0.5]))[2][0]

    @cached_property
    def barycenters(self) -> NDArray:
        """Images x_T of the reference barycenter."""
        x, _, _ = evaluate_maps(self.geometry, np.array([[0.5, 0.5]]))
        return x[:, 0]

    @cached_property
    def areas(self) -> NDArray:
        pts, wts = tensor_gauss_rule(6)
        _, jac, _ = evaluate_maps(self.geometry, pts)
        return np.abs(np.linalg.det(jac)) @ wts

    def _boundary_samples(self, n: int = 5) -> NDArray:
        t = np.linspace(0.0, 1.0, n)
        ref = np.concatenate([local_edge_points(local, t) for local in range(4)])
        x, _, _ = evaluate_maps(self.geometry, ref)
        return x

    @cached_property
    def diameters(self) -> NDArray:
        """h_T, the largest distance between boundary samples of each element."""
        x = self._boundary_samples()
        diff = x[:, :, None, :] - x[:, None, :, :]
        return np.sqrt((diff ** 2).sum(-1)).max(axis=(1, 2))

    @cached_property
    def edge_diameters(self) -> NDArray:
        t = np.linspace(0.0, 1.0, 9)
        out = np.empty(self.n_edges)
        for edge in self.edges:
            x = self.edge_points(edge, t)
            diff = x[:, None, :] - x[None, :, :]
            out[edge.index] = np.sqrt((diff ** 2).sum(-1)).max()
        return out

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @property
    def h_min(self) -> float:
        return float(self.diameters.min())

    @cached_property
    def geometry_classes(self) -> NDArray:
        """Class label per element; elements with congruent-by-translation maps share a label."""
        local = self.geometry - self.geometry[:, :1, :]
        key = np.round(local.reshape(self.n_elements, -1) / self.h, 10)
        _, inverse = np.unique(key, axis=0, return_inverse=True)
        return inverse.reshape(-1)

    @cached_property
    def max_aspect_ratio(self) -> float:
        """Largest ratio of longest to shortest edge over all elements."""
        lengths = self.edge_diameters[self.element_edges]
        return float((lengths.max(axis=1) / lengths.min(axis=1)).max())

    def geometry_queries(self) -> Dict[str, Union[NDArray, float]]:
        return {
            "barycenters": self.barycenters,
            "diameters": self.diameters,
            "edge_diameters": self.edge_diameters,
            "h_min": self.h_min,
            "areas": self.areas,
        }

    # checks

    def validate(self, samples: int = 5) -> None:
        """Check the mesh invariants.

        Raises:
            MeshError: Listing every violated invariant.
        """
        problems: List[str] = []
        pts, _ = tensor_gauss_rule(6)
        _, jac, _ = evaluate_maps(self.geometry, pts)
        det = np.linalg.det(jac)
        if np.any(det <= 0.0):
            bad = np.unique(np.nonzero(det <= 0.0)[0])
            problems.append(f"nonpositive Jacobian on elements {bad[:10].tolist()}")

        t = np.linspace(0.0, 1.0, max(samples, 5))
        h = self.h
        for edge in self.edges:
            if len(edge.elements) == 2 and edge.tag is not EdgeTag.INTERIOR:
                problems.append(f"edge {edge.index} has two elements but tag {edge.tag.value}")
            if len(edge.elements) == 1 and edge.tag is EdgeTag.INTERIOR:
                problems.append(f"boundary edge {edge.index} tagged interior")
            _, _, normal = self.edge_frame(edge, t)
            if np.any(np.abs(np.linalg.norm(normal, axis=-1) - 1.0) > 1e-14):
                problems.append(f"edge {edge.index} normal is not unit length")
            if self.edge_diameters[edge.index] > h * (1 + 1e-12):
                problems.append(f"edge {edge.index} longer than h")
            if len(edge.elements) == 2:
                mismatch = np.abs(self.edge_points(edge, t, 0) - self.edge_points(edge, t, 1)).max()
                if mismatch >= 1e-12:
                    problems.append(f"edge {edge.index} traces differ by {mismatch:.3e}")

        if self.has_crease:
            problems.extend(self._check_crease_chain())
        if problems:
            raise MeshError("invalid mesh:\n  " + "\n  ".join(problems))

    def _check_crease_chain(self) -> List[str]:
        degree: Dict[int, int] = defaultdict(int)
        neighbours: Dict[int, List[int]] = defaultdict(list)
        for edge in self.crease_edges:
            a, b = edge.vertices
            degree[a] += 1
            degree[b] += 1
            neighbours[a].append(b)
            neighbours[b].append(a)
        problems = []
        if any(d > 2 for d in degree.values()):
            problems.append("crease branches")
        ends = [v for v, d in degree.items() if d == 1]
        if len(ends) != 2:
            problems.append(f"crease must be an open chain, found {len(ends)} ends")
        seen = {next(iter(degree))}
        stack = list(seen)
        while stack:
            v = stack.pop()
            for w in neighbours[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        if len(seen) != len(degree):
            problems.append("crease is not connected")
        boundary_vertices = {v for e in self.edges if e.is_boundary for v in e.vertices}
        if any(v not in boundary_vertices for v in ends):
            problems.append("crease does not end on the boundary")
        return problems

    # persistence

    def to_arrays(self) -> Dict[str, NDArray]:
        return {
            "vertices": np.asarray(self.vertices),
            "elements": np.asarray(self.elements),
            "geometry": np.asarray(self.geometry),
            "region_id": np.asarray(self.region_id),
            "dirichlet_edges": np.array([e.vertices for e in self.dirichlet_edges], dtype=np.int64).reshape(-1, 2),
            "crease_edges": np.array([e.vertices for e in self.crease_edges], dtype=np.int64).reshape(-1, 2),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, NDArray]) -> "Mesh":
        return cls(arrays["vertices"], arrays["elements"], arrays["geometry"], arrays["region_id"],
                   crease_edges=[tuple(p) for p in arrays["crease_edges"]],
                   dirichlet_edges=[tuple(p) for p in arrays["dirichlet_edges"]])


# predicates

def side_predicate(sides: Sequence[str], xmin: float, xmax: float, ymin: float, ymax: float,
                   tol: float = 1e-10) -> EdgePredicate:
    """Edge predicate selecting boundary edges on the named sides of a box."""
    unknown = set(sides) - {"left", "right", "bottom", "top"}
    if unknown:
        raise MeshError(f"unknown sides: {sorted(unknown)}")
    scale = tol * max(1.0, xmax - xmin, ymax - ymin)

    def predicate(midpoint: NDArray, normal: NDArray) -> bool:
        x, y = midpoint
        checks = {
            "left": abs(x - xmin) < scale and normal[0] < -0.5,
            "right": abs(x - xmax) < scale and normal[0] > 0.5,
            "bottom": abs(y - ymin) < scale and normal[1] < -0.5,
            "top": abs(y - ymax) < scale and normal[1] > 0.5,
        }
        return any(checks[s] for s in sides)

    return predicate


# builders

def build_rect_mesh(xmin: float, xmax: float, ymin: float, ymax: float, nx: int, ny: int,
                    dirichlet: Optional[EdgePredicate] = None) -> Mesh:
    """Uniform axis-aligned nx-by-ny quadrilateral mesh of a box."""
    if nx < 1 or ny < 1:
        raise MeshError(f"nx and ny must be >= 1, got nx={nx}, ny={ny}")
    if not (xmin < xmax and ymin < ymax):
        raise MeshError(f"degenerate domain ({xmin}, {xmax}) x ({ymin}, {ymax})")
    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.stack([xx.ravel(), yy.ravel()], axis=-1)
    elements = _structured_quads(nx, ny)
    return Mesh(vertices, elements, dirichlet=dirichlet)


def _structured_quads(nx: int, ny: int) -> NDArray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v0 = (i + (nx + 1) * j).ravel()
    return np.stack([v0, v0 + 1, v0 + nx + 2, v0 + nx + 1], axis=-1)


def crease_curve(p0: ArrayLike, p1: ArrayLike, apex: ArrayLike) -> np.polynomial.Polynomial:
    """The quadratic x2 = c(x1) through three points."""
    pts = np.array([p0, apex, p1], dtype=float)
    if len(np.unique(pts[:, 0])) != 3:
        raise MeshError("crease points need distinct first coordinates")
    coef = np.linalg.solve(np.vander(pts[:, 0], 3, increasing=True), pts[:, 1])
    return np.polynomial.Polynomial(coef)


def build_crease_mesh(xmin: float, xmax: float, ymin: float, ymax: float,
                      crease: Sequence[ArrayLike], nx: int, ny: int,
                      dirichlet: Optional[EdgePredicate] = None) -> Mesh:
    """Mesh of a box whose row of horizontal edges follows a quadratic crease.

    Vertical mesh lines stay straight; each column is sheared vertically so
    that one horizontal mesh line lies on the parabola through
    (p0, apex, p1). Edges on that line get exact quadratic mid-nodes and are
    flagged as crease; elements below carry region 0, above region 1.
    """
    if nx < 1 or ny < 2:
        raise MeshError(f"crease mesh needs nx >= 1 and ny >= 2, got nx={nx}, ny={ny}")
    if not (xmin < xmax and ymin < ymax):
        raise MeshError(f"degenerate domain ({xmin}, {xmax}) x ({ymin}, {ymax})")
    p0, p1, apex = (np.asarray(p, dtype=float) for p in crease)
    width = xmax - xmin
    if abs(p0[0] - xmin) > 1e-12 * width or abs(p1[0] - xmax) > 1e-12 * width:
        raise MeshError("crease end points must lie on the left and right sides")
    curve = crease_curve((xmin, p0[1]), (xmax, p1[1]), apex)
    samples = curve(np.linspace(xmin, xmax, 1001))
    if samples.min() <= ymin or samples.max() >= ymax:
        raise MeshError("crease leaves the domain")

    mean_height = curve.integ()(xmax) - curve.integ()(xmin)
    mean_height /= width
    jc = int(round(ny * (mean_height - ymin) / (ymax - ymin)))
    jc = min(max(jc, 1), ny - 1)

    xs = np.linspace(xmin, xmax, nx + 1)
    cx = curve(xs)
    vertices = np.empty(((nx + 1) * (ny + 1), 2))
    for j in range(ny + 1):
        if j <= jc:
            y = ymin + (cx - ymin) * j / jc
        else:
            y = cx + (ymax - cx) * (j - jc) / (ny - jc)
        vertices[j * (nx + 1):(j + 1) * (nx + 1)] = np.stack([xs, y], axis=-1)

    elements = _structured_quads(nx, ny)
    corners = vertices[elements]
    geometry = straight_geometry(corners)
    rows = np.repeat(np.arange(ny), nx)
    xmid = 0.5 * (corners[:, 0, 0] + corners[:, 1, 0])
    below = rows == jc - 1
    above = rows == jc
    geometry[below, 7] = np.stack([xmid[below], curve(xmid[below])], axis=-1)
    geometry[above, 1] = np.stack([xmid[above], curve(xmid[above])], axis=-1)
    geometry[:, 4] = 0.5 * (geometry[:, 1] + geometry[:, 7])
    region_id = (rows >= jc).astype(np.int64)

    base = jc * (nx + 1)
    crease_edges = [(base + i, base + i + 1) for i in range(nx)]
    log.debug(f"crease mesh: crease on mesh line {jc} of {ny}")
    return Mesh(vertices, elements, geometry, region_id, dirichlet=dirichlet, crease_edges=crease_edges)


def _triangle_quads(v0: NDArray, v1: NDArray, apex: NDArray, layers: int) -> List[NDArray]:
    quads = []
    for j in range(layers - 1):
        s0, s1 = j / layers, (j + 1) / layers
        l0, r0 = v0 + s0 * (apex - v0), v1 + s0 * (apex - v1)
        l1, r1 = v0 + s1 * (apex - v0), v1 + s1 * (apex - v1)
        m0, m1 = 0.5 * (l0 + r0), 0.5 * (l1 + r1)
        quads.append(np.array([l0, m0, m1, l1]))
        quads.append(np.array([m0, r0, r1, m1]))
    s = (layers - 1) / layers
    a, b = v0 + s * (apex - v0), v1 + s * (apex - v1)
    g = (a + b + apex) / 3.0
    m_ab, m_bc, m_ca = 0.5 * (a + b), 0.5 * (b + apex), 0.5 * (apex + a)
    quads.append(np.array([a, m_ab, g, m_ca]))
    quads.append(np.array([m_ab, b, m_bc, g]))
    quads.append(np.array([g, m_bc, apex, m_ca]))
    return quads


def _refine(quads: List[NDArray], levels: int) -> List[NDArray]:
    n = 2 ** levels
    if n == 1:
        return quads
    s = np.linspace(0.0, 1.0, n + 1)
    out = []
    for q in quads:
        def at(u, v):
            return (1 - u) * (1 - v) * q[0] + u * (1 - v) * q[1] + u * v * q[2] + (1 - u) * v * q[3]
        for j in range(n):
            for i in range(n):
                out.append(np.array([at(s[i], s[j]), at(s[i + 1], s[j]),
                                     at(s[i + 1], s[j + 1]), at(s[i], s[j + 1])]))
    return out


def mesh_from_quads(quads: Sequence[NDArray], dirichlet: Optional[EdgePredicate] = None,
                    decimals: int = 12) -> Mesh:
    """Straight mesh from counterclockwise corner quadruples, merging shared vertices."""
    index: Dict[Tuple[float, float], int] = {}
    vertices: List[NDArray] = []
    elements = []
    for q in quads:
        ids = []
        for p in q:
            key = (round(float(p[0]), decimals), round(float(p[1]), decimals))
            if key not in index:
                index[key] = len(vertices)
                vertices.append(np.asarray(p, dtype=float))
            ids.append(index[key])
        elements.append(ids)
    return Mesh(np.array(vertices), np.array(elements), dirichlet=dirichlet)


def build_triangle_mesh(vertices: Sequence[ArrayLike], layers: int = 2, subdivision: int = 0,
                        dirichlet: Optional[EdgePredicate] = None) -> Mesh:
    """Quadrilateral mesh of a triangle (base v0-v1, apex v2).

    The triangle is cut into `layers` strips parallel to the base; each
    strip below the top is split into two trapezoids and the top triangle
    into three kites through its centroid. Every quad is then refined
    uniformly `subdivision` times.
    """
    if layers < 1 or subdivision < 0:
        raise MeshError(f"invalid triangle decomposition: layers={layers}, subdivision={subdivision}")
    v0, v1, apex = (np.asarray(v, dtype=float) for v in vertices)
    cross = (v1 - v0)[0] * (apex - v0)[1] - (v1 - v0)[1] * (apex - v0)[0]
    if cross <= 0:
        raise MeshError("triangle vertices must be counterclockwise and non-degenerate")
    return mesh_from_quads(_refine(_triangle_quads(v0, v1, apex, layers), subdivision), dirichlet)


def dump_mesh(mesh: Mesh, path: Union[str, Path]) -> Path:
    """Write a plain-text listing of vertices, elements and edges."""
    path = Path(path)
    lines = [f"# vertices {len(mesh.vertices)}"]
    lines += [f"{i} {x:.16g} {y:.16g}" for i, (x, y) in enumerate(mesh.vertices)]
    lines.append(f"# elements {mesh.n_elements}")
    lines += [f"{e} {' '.join(map(str, quad))} region={mesh.region_id[e]}" for e, quad in enumerate(mesh.elements)]
    lines.append(f"# edges {mesh.n_edges}")
    for edge in mesh.edges:
        n = mesh.edge_normal(edge)
        lines.append(f"{edge.index} {edge.vertices[0]} {edge.vertices[1]} "
                     f"elements={','.join(map(str, edge.elements))} tag={edge.tag.value} "
                     f"crease={int(edge.crease)} normal={n[0]:.16g},{n[1]:.16g}")
    path.write_text("\n".join(lines) + "\n", encoding='utf-8')
    return path
