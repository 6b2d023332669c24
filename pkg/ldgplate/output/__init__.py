from .state import SavedState, StateFormatError, load_state, save_state
from .vtk import export_flat_mesh, export_surface

__all__ = [
    "SavedState",
    "StateFormatError",
    "load_state",
    "save_state",
    "export_flat_mesh",
    "export_surface",
]
