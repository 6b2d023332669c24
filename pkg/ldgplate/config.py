from __future__ import annotations


import copy
import json
import math
import re
from pathlib import Path
from typing import Optional, List, Dict, Any, Literal, Mapping, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


Matrix2 = List[List[float]]

SCENARIO_NAMES = ("flat", "cylinder", "cigar", "helix", "climate", "origami", "custom")
SIDES = ("left", "right", "bottom", "top")


def _check_matrix(v: Matrix2, name: str) -> Matrix2:
    if len(v) != 2 or any(len(row) != 2 for row in v):
        raise ValueError(f"{name} must be a 2x2 matrix, got {v}")
    if any(not math.isfinite(x) for row in v for x in row):
        raise ValueError(f"{name} has non-finite entries")
    if v[0][1] != v[1][0]:
        raise ValueError(f"{name} must be symmetric, got off-diagonal {v[0][1]} != {v[1][0]}")
    return v


class MeshConfig(BaseModel):
    kind: Literal["rect", "crease", "triangle"] = "rect"
    xmin: float = 0.0
    xmax: float = 1.0
    ymin: float = 0.0
    ymax: float = 1.0
    nx: int = 1
    ny: int = 1
    # [p0, p1, apex] for crease meshes
    crease: Optional[List[List[float]]] = None
    # triangle (climate) mesh: trapezoid strips and uniform refinement depth
    layers: int = 2
    subdivision: int = 0

    @field_validator('nx', 'ny', 'layers')
    @classmethod
    def validate_counts(cls, v):
        if v < 1:
            raise ValueError(f"mesh counts must be >= 1, got {v}")
        return v

    @field_validator('subdivision')
    @classmethod
    def validate_subdivision(cls, v):
        if v < 0:
            raise ValueError(f"subdivision must be >= 0, got {v}")
        return v

    @field_validator('crease')
    @classmethod
    def validate_crease(cls, v):
        if v is None:
            return v
        if len(v) != 3 or any(len(p) != 2 for p in v):
            raise ValueError("crease needs three 2D points: [p0, p1, apex]")
        return v

    @model_validator(mode='after')
    def validate_box(self):
        if self.kind != "triangle":
            if not self.xmin < self.xmax:
                raise ValueError(f"degenerate domain: xmin={self.xmin} >= xmax={self.xmax}")
            if not self.ymin < self.ymax:
                raise ValueError(f"degenerate domain: ymin={self.ymin} >= ymax={self.ymax}")
        if self.kind == "crease" and self.crease is None:
            raise ValueError("crease mesh requires 'crease' points")
        return self


class BoundaryConfig(BaseModel):
    """Clamped sides carry the flat-plate trace phi(x) = (x1, x2, 0), Phi = [I; 0]."""
    kind: Literal["clamped", "free"] = "free"
    sides: List[Literal["left", "right", "bottom", "top"]] = Field(default_factory=list)

    @model_validator(mode='after')
    def validate_sides(self):
        if self.kind == "clamped" and not self.sides:
            raise ValueError("clamped boundary requires at least one side")
        if self.kind == "free" and self.sides:
            raise ValueError("free boundary must not list clamped sides")
        return self


class CurvatureConfig(BaseModel):
    kind: Literal["constant", "regions", "rotated"] = "constant"
    matrix: Matrix2 = Field(default_factory=lambda: [[0.0, 0.0], [0.0, 0.0]])
    regions: Dict[int, Matrix2] = Field(default_factory=dict)
    # climate device: Z = diag(0, alpha), rotated by angle (radians)
    alpha: Optional[float] = None
    angle: float = 0.0

    @field_validator('matrix')
    @classmethod
    def validate_matrix(cls, v):
        return _check_matrix(v, "curvature matrix")

    @field_validator('regions')
    @classmethod
    def validate_regions(cls, v):
        for region, m in v.items():
            _check_matrix(m, f"curvature of region {region}")
        return v

    @model_validator(mode='after')
    def validate_kind(self):
        if self.kind == "regions" and not self.regions:
            raise ValueError("per-region curvature requires 'regions'")
        return self


class LiftingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = 2
    l1: int = 2
    l2: int = 2
    mode: Literal["standard", "crease"] = "standard"

    @field_validator('k')
    @classmethod
    def validate_degree(cls, v):
        if v < 2:
            raise ValueError(f"polynomial degree k must be >= 2, got {v}")
        return v

    @field_validator('l1', 'l2')
    @classmethod
    def validate_lifting_degree(cls, v):
        if v < 0:
            raise ValueError(f"lifting degrees must be >= 0, got {v}")
        return v


class FlowConfig(BaseModel):
    tau: float = 5e-3
    tol: float = 1e-4
    max_steps: int = 100_000
    gamma0: float = 1.0
    gamma1: float = 1.0
    # None: 1.0 for free plates, 0.0 when some edge is clamped
    l2_weight: Optional[float] = None
    cg_rel_tol: float = 1e-8
    cg_max_iters: int = 5000
    defect_budget: Optional[float] = None
    energy_slack: float = 1e-8
    abort_on_energy_increase: bool = True
    inner_solver: Literal["direct", "iterative"] = "direct"

    @field_validator('tau', 'tol', 'gamma0', 'gamma1', 'cg_rel_tol')
    @classmethod
    def validate_positive(cls, v, info):
        if not v > 0:
            raise ValueError(f"{info.field_name} must be positive, got {v}")
        return v

    @field_validator('max_steps', 'cg_max_iters')
    @classmethod
    def validate_limits(cls, v, info):
        if v < 1:
            raise ValueError(f"{info.field_name} must be >= 1, got {v}")
        return v

    @field_validator('l2_weight', 'defect_budget')
    @classmethod
    def validate_nonnegative(cls, v, info):
        if v is not None and v < 0:
            raise ValueError(f"{info.field_name} must be nonnegative, got {v}")
        return v


class OutputConfig(BaseModel):
    directory: str = "out"
    # snapshot every `cadence` steps
    cadence: int = 100
    snapshots: bool = True

    @field_validator('cadence')
    @classmethod
    def validate_cadence(cls, v):
        if v < 1:
            raise ValueError(f"output cadence must be >= 1, got {v}")
        return v


class ScenarioConfig(BaseModel):
    name: Literal["flat", "cylinder", "cigar", "helix", "climate", "origami", "custom"] = "custom"
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    boundary: BoundaryConfig = Field(default_factory=BoundaryConfig)
    curvature: CurvatureConfig = Field(default_factory=CurvatureConfig)
    lifting: LiftingConfig = Field(default_factory=LiftingConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode='after')
    def validate_scenario(self):
        if self.name == "custom":
            missing = {"mesh", "boundary", "curvature", "flow"} - self.model_fields_set
            if missing:
                raise ValueError(f"custom scenario requires explicit sections: {', '.join(sorted(missing))}")
        if self.lifting.mode == "crease" and self.mesh.kind != "crease":
            raise ValueError("crease lifting mode requires a crease mesh")
        return self


class ConfigError(ValueError):
    """Raised when the configuration is invalid or cannot be loaded."""


def deep_merge(base: Mapping[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    """Return a copy of `base` with `update` merged in, recursing into dicts."""
    out = copy.deepcopy(dict(base))
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(config_data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply `key.path=value` overrides; values are parsed as JSON when possible.

    Raises:
        ConfigError: If an override is not of the form key=value.
    """
    data = copy.deepcopy(config_data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        path = [p for p in key.strip().split(".") if p]
        if not path:
            raise ConfigError(f"override '{item}' has an empty key")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{item}': '{part}' is not a section")
        node[path[-1]] = value
    return data


class ConfigManager:
    """Load and validate scenario configuration files.
    """
    def __init__(self, config_path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()):
        """Initialize the config parser.

        Args:
            config_path: Path to the JSON configuration file. If None, the
                        configuration is built from a preset and overrides only.
            overrides: `key.path=value` strings applied after the file is read.
        """
        self.config_path = Path(config_path) if config_path is not None else None
        self.overrides = list(overrides)
        self._source: Optional[str] = None
        self._config: Optional[ScenarioConfig] = None

    def read_data(self) -> Dict[str, Any]:
        """Read the raw JSON mapping from the config file ({} without a file).

        Raises:
            ConfigError: If the file is missing or holds invalid JSON.
        """
        if self.config_path is None:
            return {}
        if not self.config_path.exists():
            raise ConfigError(f"Configuration file not found: {self.config_path}")
        self._source = self.config_path.read_text(encoding='utf-8')
        try:
            data = json.loads(self._source)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.config_path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{self.config_path}: top level must be a JSON object")
        return data

    def load_config(self, presets: Optional[Mapping[str, Mapping[str, Any]]] = None,
                    preset: Optional[str] = None) -> ScenarioConfig:
        """Load configuration from file, preset defaults and overrides.

        Args:
            presets: Named preset mappings used as defaults under the file data.
            preset: Preset name; defaults to the file's `name` field.

        Returns:
            ScenarioConfig: The validated configuration.

        Raises:
            ConfigError: If the file, the preset or any field is invalid.
        """
        data = self.read_data()
        name = preset or data.get("name")
        if presets is not None and name is not None and name != "custom":
            if name not in presets:
                raise ConfigError(f"Unknown preset '{name}'; choose from {', '.join(SCENARIO_NAMES)}")
            data = deep_merge(presets[name], data)
            data["name"] = name
        data = apply_overrides(data, self.overrides)
        self._config = self.load_settings(data)
        return self._config

    def load_settings(self, config_data: Mapping[str, Any]) -> ScenarioConfig:
        """Validate a raw mapping into a ScenarioConfig.

        Returns:
            ScenarioConfig built from `config_data`.

        Raises:
            ConfigError: With one line per validation problem.
        """
        try:
            return ScenarioConfig(**config_data)
        except ValidationError as e:
            lines = [self._describe(err) for err in e.errors()]
            raise ConfigError("Invalid configuration:\n" + "\n".join(lines)) from e
        except TypeError as e:
            raise ConfigError(f"Error loading configuration: {e}") from e

    def _describe(self, err: Mapping[str, Any]) -> str:
        loc = ".".join(str(p) for p in err.get("loc", ()))
        msg = err.get("msg", "invalid value")
        line = self._line_of(err.get("loc", ()))
        where = f"line {line}: " if line is not None else ""
        return f"  {where}{loc or '<root>'}: {msg}"

    def _line_of(self, loc: Sequence[Any]) -> Optional[int]:
        if not self._source:
            return None
        keys = [p for p in loc if isinstance(p, str)]
        for key in reversed(keys):
            pattern = re.compile(r'"' + re.escape(key) + r'"\s*:')
            for lineno, text in enumerate(self._source.splitlines(), start=1):
                if pattern.search(text):
                    return lineno
        return None
