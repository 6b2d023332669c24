"""Legacy ASCII VTK export of deformed surfaces and reference meshes.

Each element is written as its own biquadratic cell (meshio "quad9"); DG
fields are discontinuous, so points are never merged.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Union

import meshio
import numpy as np
from numpy.typing import NDArray

from ..dg_space import DGField
from ..mesh import Mesh, REFERENCE_NODES

log = logging.getLogger(__name__)

# lexicographic Q2 node index -> VTK biquadratic quad order
VTK_ORDER = np.array([0, 2, 8, 6, 1, 5, 7, 3, 4])
NODES_PER_CELL = len(VTK_ORDER)


def _write(path: Union[str, Path], points: NDArray, n_cells: int, cell_data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cells = [("quad9", np.arange(n_cells * NODES_PER_CELL, dtype=np.int64).reshape(n_cells, NODES_PER_CELL))]
    mesh = meshio.Mesh(points=points, cells=cells, cell_data={k: [v] for k, v in cell_data.items()})
    meshio.write(path, mesh, file_format="vtk", binary=False)
    log.debug(f"wrote {path}: {n_cells} cells, {len(points)} points")
    return path


def surface_points(y: DGField) -> NDArray:
    """y_h at the nine nodes of every element, (E * 9, 3) in VTK order."""
    ref = np.asarray(REFERENCE_NODES, dtype=float)[VTK_ORDER]
    values, _, _ = y.space.basis.evaluate(ref)
    return np.einsum('nb,ebc->enc', values, y.element_coefficients).reshape(-1, 3)


def export_surface(y: DGField, path: Union[str, Path], defect: Optional[NDArray] = None) -> Path:
    """Write the deformed surface y_h(Omega) with per-element defect and region id.

    Args:
        y: The deformation.
        path: Target .vtk file.
        defect: Per-element isometry defect; recomputed from y when omitted.
    """
    mesh = y.space.mesh
    if defect is None:
        g = y.barycenter_gradients()
        defect = np.linalg.norm(np.einsum('eca,ecb->eab', g, g) - np.eye(2), axis=(1, 2))
    return _write(path, surface_points(y), mesh.n_elements,
                  {"defect": np.asarray(defect, dtype=float), "region_id": mesh.region_id.astype(np.int32)})


def export_flat_mesh(mesh: Mesh, path: Union[str, Path]) -> Path:
    """Write the reference mesh itself (z = 0), one cell per element."""
    nodes = mesh.geometry[:, VTK_ORDER].reshape(-1, 2)
    points = np.concatenate([nodes, np.zeros((len(nodes), 1))], axis=1)
    return _write(path, points, mesh.n_elements,
                  {"defect": np.zeros(mesh.n_elements), "region_id": mesh.region_id.astype(np.int32)})
