"""Binary final-state files.

Layout: the magic b"LDGPLATE", a little-endian uint32 format version, a
uint64 length followed by that many bytes of UTF-8 JSON metadata, then the
arrays named in metadata["arrays"], each written with numpy.save.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from numpy.typing import NDArray

from ..dg_space import BoundaryData, DGField, DGSpace
from ..energy import MultiplierField
from ..mesh import Mesh

log = logging.getLogger(__name__)

MAGIC = b"LDGPLATE"
VERSION = 1
MESH_ARRAYS = ("vertices", "elements", "geometry", "region_id", "dirichlet_edges", "crease_edges")


class StateFormatError(ValueError):
    """Raised when a state file is not a readable final state."""


@dataclass
class SavedState:
    mesh: Mesh
    y: DGField
    multiplier: MultiplierField
    metadata: Dict[str, Any]

    @property
    def aborted(self) -> bool:
        return bool(self.metadata.get("aborted", False))


def save_state(path: Union[str, Path], y: DGField, multiplier: Optional[MultiplierField] = None,
               metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write mesh, coefficients and multiplier; `metadata` must be JSON-serializable."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh = y.space.mesh
    if multiplier is None:
        multiplier = MultiplierField.zeros(mesh.n_elements)
    arrays: Dict[str, NDArray] = dict(mesh.to_arrays())
    arrays["coefficients"] = y.coefficients
    arrays["multiplier"] = multiplier.values
    meta = dict(metadata or {})
    meta.update(degree=y.space.degree, clamped=y.boundary_data is not None, arrays=list(arrays))
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for name in meta["arrays"]:
            np.save(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    log.info(f"saved state to {path}")
    return path


def load_state(path: Union[str, Path]) -> SavedState:
    """Read a state file and rebuild mesh, field and multiplier.

    Clamped states get the flat-plate boundary data back.

    Raises:
        StateFormatError: On a wrong magic, an unknown version or truncation.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise StateFormatError(f"{path}: not a final-state file")
        header = fh.read(struct.calcsize("<IQ"))
        if len(header) != struct.calcsize("<IQ"):
            raise StateFormatError(f"{path}: truncated header")
        version, length = struct.unpack("<IQ", header)
        if version != VERSION:
            raise StateFormatError(f"{path}: unsupported format version {version}")
        try:
            meta = json.loads(fh.read(length).decode("utf-8"))
            arrays = {name: np.load(fh, allow_pickle=False) for name in meta["arrays"]}
        except (ValueError, KeyError, EOFError) as e:
            raise StateFormatError(f"{path}: corrupt state file: {e}") from e
    mesh = Mesh.from_arrays({k: arrays[k] for k in MESH_ARRAYS})
    space = DGSpace(mesh, int(meta["degree"]))
    data = BoundaryData.flat_plate() if meta.get("clamped") else None
    y = DGField(space, arrays["coefficients"], data)
    return SavedState(mesh, y, MultiplierField(arrays["multiplier"]), meta)
