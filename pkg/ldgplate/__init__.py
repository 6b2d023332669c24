from .config import (
    ConfigManager,
    ConfigError,
    ScenarioConfig,
    MeshConfig,
    BoundaryConfig,
    CurvatureConfig,
    LiftingConfig,
    FlowConfig,
    OutputConfig,
)
from .mesh import Mesh, MeshError
from .dg_space import BoundaryData, DGField, DGSpace, SpaceError
from .hessian import HessianError, discrete_hessian, precompute_basis_hessians, reduced_hessian
from .energy import EnergyForms, MultiplierField, SpontaneousCurvature
from .flow import FlowError, FlowState, GradientFlow, run_flow

__all__ = [
    "ConfigManager",
    "ConfigError",
    "ScenarioConfig",
    "MeshConfig",
    "BoundaryConfig",
    "CurvatureConfig",
    "LiftingConfig",
    "FlowConfig",
    "OutputConfig",
    "Mesh",
    "MeshError",
    "BoundaryData",
    "DGField",
    "DGSpace",
    "SpaceError",
    "HessianError",
    "discrete_hessian",
    "precompute_basis_hessians",
    "reduced_hessian",
    "EnergyForms",
    "MultiplierField",
    "SpontaneousCurvature",
    "FlowError",
    "FlowState",
    "GradientFlow",
    "run_flow",
]
