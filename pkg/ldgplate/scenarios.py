"""Scenario presets, problem construction, runs and refinement studies."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray

from .config import ConfigError, ConfigManager, ScenarioConfig
from .dg_space import BoundaryData, DGField, DGSpace
from .energy import EnergyForms, SpontaneousCurvature
from .flow import FlowError, FlowState, GradientFlow
from .hessian import precompute_basis_hessians
from .mesh import Mesh, build_crease_mesh, build_rect_mesh, build_triangle_mesh, side_predicate
from .oracle import schur_spectrum_probe
from .runner import ScenarioRunner, get_prog_name

log = logging.getLogger(__name__)

TRIANGLE = ((0.0, 0.0), (1.0, 0.0), (0.5, math.sqrt(3.0) / 2.0))

_PLATE = {"xmin": -5.0, "xmax": 5.0, "ymin": -2.0, "ymax": 2.0}

PRESETS: Dict[str, Dict[str, Any]] = {
    "flat": {
        "mesh": {"kind": "rect", **_PLATE, "nx": 8, "ny": 4},
        "boundary": {"kind": "clamped", "sides": ["left"]},
        "curvature": {"kind": "constant", "matrix": [[0.0, 0.0], [0.0, 0.0]]},
        "flow": {"tau": 5e-3, "tol": 1e-4},
    },
    "cylinder": {
        "mesh": {"kind": "rect", **_PLATE, "nx": 32, "ny": 8},
        "boundary": {"kind": "clamped", "sides": ["left"]},
        "curvature": {"kind": "constant", "matrix": [[1.0, 0.0], [0.0, 1.0]]},
        "flow": {"tau": 5e-3, "tol": 1e-4},
    },
    "cigar": {
        "mesh": {"kind": "rect", **_PLATE, "nx": 64, "ny": 16},
        "boundary": {"kind": "free"},
        "curvature": {"kind": "constant", "matrix": [[3.0, -2.0], [-2.0, 3.0]]},
        "flow": {"tau": 5e-3, "tol": 1e-4},
    },
    "helix": {
        "mesh": {"kind": "rect", "xmin": -8.0, "xmax": 8.0, "ymin": -0.5, "ymax": 0.5, "nx": 128, "ny": 8},
        "boundary": {"kind": "free"},
        "curvature": {"kind": "constant", "matrix": [[1.0, -1.5], [-1.5, 1.0]]},
        "flow": {"tau": 1e-2, "tol": 1e-4},
    },
    "climate": {
        "mesh": {"kind": "triangle", "xmin": 0.0, "xmax": 1.0, "ymin": 0.0, "ymax": TRIANGLE[2][1],
                 "layers": 2, "subdivision": 2},
        "boundary": {"kind": "clamped", "sides": ["bottom"]},
        "curvature": {"kind": "rotated", "alpha": 1.0, "angle": 0.0},
        "flow": {"tau": 1.0, "tol": 1e-4},
    },
    "origami": {
        "mesh": {"kind": "crease", "xmin": 0.0, "xmax": 9.6, "ymin": 0.0, "ymax": 15.0, "nx": 12, "ny": 18,
                 "crease": [[0.0, 2.0], [9.6, 2.0], [4.8, 6.0]]},
        "boundary": {"kind": "free"},
        "curvature": {"kind": "regions", "regions": {"0": [[0.0, 0.0], [0.0, 0.5]], "1": [[0.0, 0.0], [0.0, -0.5]]}},
        "lifting": {"mode": "crease"},
        "flow": {"tau": 1e-2, "tol": 1e-4},
    },
}

CLIMATE_ALPHAS = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
STUDY_KINDS = ("hessian_convergence", "interpolation", "cg_scaling", "climate_sweep")


def preset_config(name: str, overrides: Sequence[str] = ()) -> ScenarioConfig:
    """Validated config of a named preset with optional `key=value` overrides."""
    return ConfigManager(overrides=overrides).load_config(PRESETS, preset=name)


def load_scenario(config_path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                  overrides: Sequence[str] = ()) -> ScenarioConfig:
    if config_path is None and preset is None:
        raise ConfigError("either a config file or a preset is required")
    return ConfigManager(config_path, overrides).load_config(PRESETS, preset)


def build_mesh(config: ScenarioConfig) -> Mesh:
    m = config.mesh
    if m.kind == "triangle":
        ys = [p[1] for p in TRIANGLE]
        box = (min(p[0] for p in TRIANGLE), max(p[0] for p in TRIANGLE), min(ys), max(ys))
    else:
        box = (m.xmin, m.xmax, m.ymin, m.ymax)
    dirichlet = side_predicate(config.boundary.sides, *box) if config.boundary.kind == "clamped" else None
    if m.kind == "rect":
        return build_rect_mesh(m.xmin, m.xmax, m.ymin, m.ymax, m.nx, m.ny, dirichlet)
    if m.kind == "crease":
        return build_crease_mesh(m.xmin, m.xmax, m.ymin, m.ymax, m.crease, m.nx, m.ny, dirichlet)
    return build_triangle_mesh(TRIANGLE, m.layers, m.subdivision, dirichlet)


def build_curvature(config: ScenarioConfig, mesh: Mesh) -> SpontaneousCurvature:
    c = config.curvature
    if c.kind == "regions":
        return SpontaneousCurvature.per_region(mesh, {int(k): v for k, v in c.regions.items()})
    matrix = np.diag([0.0, c.alpha]) if c.alpha is not None else np.asarray(c.matrix, dtype=float)
    if c.kind == "rotated":
        return SpontaneousCurvature.rotated(mesh, matrix, c.angle)
    return SpontaneousCurvature.constant(mesh, matrix)


def flat_plate(x: NDArray) -> NDArray:
    return np.stack([x[:, 0], x[:, 1], np.zeros(len(x))], axis=-1)


@dataclass
class Problem:
    config: ScenarioConfig
    mesh: Mesh
    space: DGSpace
    forms: EnergyForms
    curvature: SpontaneousCurvature
    boundary_data: Optional[BoundaryData]

    def initial(self) -> DGField:
        """The flat plate y(x) = (x, 0), which lies exactly in the space."""
        return self.space.interpolate(flat_plate, self.boundary_data)


def build_problem(config: ScenarioConfig) -> Problem:
    mesh = build_mesh(config)
    mesh.validate()
    if config.boundary.kind == "clamped" and not mesh.has_dirichlet:
        raise ConfigError(f"clamped sides {config.boundary.sides} select no boundary edge")
    space = DGSpace(mesh, config.lifting.k)
    table = precompute_basis_hessians(space, config.lifting)
    forms = EnergyForms(space, config.lifting, config.flow.gamma0, config.flow.gamma1,
                        config.flow.l2_weight, table)
    data = BoundaryData.flat_plate() if mesh.has_dirichlet else None
    log.info(f"problem '{config.name}': {mesh.n_elements} elements, {space.n_dofs} dofs, "
             f"h={mesh.h:.4g}, h_min={mesh.h_min:.4g}")
    return Problem(config, mesh, space, forms, build_curvature(config, mesh), data)


@dataclass
class RunResult:
    status: int
    state: Optional[FlowState]
    out_dir: Path
    error: Optional[str] = None


def hexagon_placement(apex: Sequence[float] = TRIANGLE[2]) -> List[Dict[str, Any]]:
    """Rigid placements of six copies of the climate triangle around its apex."""
    placements = []
    for k in range(6):
        angle = k * math.pi / 3.0
        c, s = math.cos(angle), math.sin(angle)
        rot = [[c, -s], [s, c]]
        shift = [apex[0] - (c * apex[0] - s * apex[1]), apex[1] - (s * apex[0] + c * apex[1])]
        placements.append({"index": k, "angle_deg": 60.0 * k, "rotation": rot, "translation": shift})
    return placements


def run_scenario(config: ScenarioConfig, out_dir: Optional[Union[str, Path]] = None,
                 prog: Optional[str] = None) -> RunResult:
    """Run one scenario and write its artifacts.

    Returns status 0 on success and 3 when the flow aborted; the final
    state is written in both cases.
    """
    out = Path(out_dir or config.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(config)
    (out / "config.json").write_text(config.model_dump_json(indent=2), encoding="utf-8")
    if config.mesh.kind == "triangle":
        (out / "hexagon_placement.json").write_text(json.dumps(hexagon_placement(), indent=2), encoding="utf-8")
    runner = ScenarioRunner(prog or get_prog_name(), problem, out)
    flow = GradientFlow(problem.forms, problem.curvature, config.flow)
    with runner.interrupt_guard():
        try:
            state = flow.run(problem.initial(), [runner])
        except FlowError as e:
            return RunResult(3, runner.state, out, str(e))
    return RunResult(0, state, out)


# studies

def _ratios(values: Sequence[float], inverse: bool = False) -> List[Optional[float]]:
    out: List[Optional[float]] = [None]
    for a, b in zip(values[:-1], values[1:]):
        num, den = (b, a) if inverse else (a, b)
        out.append(num / den if den else None)
    return out


def manufactured_field(x: NDArray) -> NDArray:
    return np.stack([np.sin(x[:, 0]), x[:, 0] * x[:, 1], np.cos(x[:, 1])], axis=-1)


def manufactured_gradient(x: NDArray) -> NDArray:
    g = np.zeros((len(x), 3, 2))
    g[:, 0, 0] = np.cos(x[:, 0])
    g[:, 1, 0] = x[:, 1]
    g[:, 1, 1] = x[:, 0]
    g[:, 2, 1] = -np.sin(x[:, 1])
    return g


def manufactured_hessian(x: NDArray) -> NDArray:
    h = np.zeros((len(x), 3, 2, 2))
    h[:, 0, 0, 0] = -np.sin(x[:, 0])
    h[:, 1, 0, 1] = h[:, 1, 1, 0] = 1.0
    h[:, 2, 1, 1] = -np.cos(x[:, 1])
    return h


def _unit_square(n: int, clamped: bool) -> Mesh:
    dirichlet = side_predicate(("left", "right", "bottom", "top"), 0.0, 1.0, 0.0, 1.0) if clamped else None
    return build_rect_mesh(0.0, 1.0, 0.0, 1.0, n, n, dirichlet)


def _interpolation_level(level: int) -> Dict[str, Any]:
    mesh = _unit_square(2 ** (level + 1), clamped=False)
    space = DGSpace(mesh)
    v = space.interpolate(manufactured_field)
    t = space.element_tables
    diff = v.values() - manufactured_field(t.points.reshape(-1, 2)).reshape(v.values().shape)
    return {"level": level, "n_elements": mesh.n_elements, "h": mesh.h,
            "error": math.sqrt(float(np.einsum('eq,eqc,eqc->', t.jxw, diff, diff)))}


def _hessian_level(level: int) -> Dict[str, Any]:
    mesh = _unit_square(2 ** (level + 1), clamped=True)
    space = DGSpace(mesh)
    data = BoundaryData(manufactured_field, manufactured_gradient)
    v = space.interpolate(manufactured_field, data)
    values = precompute_basis_hessians(space).values(v)
    t = space.element_tables
    diff = values - manufactured_hessian(t.points.reshape(-1, 2)).reshape(values.shape)
    return {"level": level, "n_elements": mesh.n_elements, "h": mesh.h,
            "error": math.sqrt(float(np.einsum('eq,eqcab,eqcab->', t.jxw, diff, diff)))}


def _cg_level(level: int) -> Dict[str, Any]:
    n = 2 ** level
    config = preset_config("cylinder", [f"mesh.nx={16 * n}", f"mesh.ny={4 * n}"])
    problem = build_problem(config)
    flow = GradientFlow(problem.forms, problem.curvature, config.flow)
    state = flow.initial_state(problem.initial())
    system = flow.assemble_step(state)
    solution = flow.solve_step(system)
    probe = schur_spectrum_probe(system)
    return {"level": level, "n_elements": problem.mesh.n_elements, "h_min": problem.mesh.h_min,
            "cg_iters": solution.cg_iters, "kappa": probe.kappa,
            "lambda_min": probe.lambda_min, "lambda_max": probe.lambda_max}


def climate_sweep(alphas: Sequence[float] = CLIMATE_ALPHAS, out_dir: Optional[Union[str, Path]] = None,
                  overrides: Sequence[str] = ()) -> List[Dict[str, Any]]:
    rows = []
    for alpha in alphas:
        config = preset_config("climate", [*overrides, f"curvature.alpha={alpha}"])
        target = Path(out_dir) / f"alpha_{alpha:g}" if out_dir is not None else None
        result = run_scenario(config, target)
        state = result.state
        rows.append({"alpha": alpha, "status": result.status, "steps": state.step if state else 0,
                     "E_h": state.energies[-1] if state else math.nan,
                     "B_h": state.bending[-1] if state else math.nan,
                     "C_h": state.cubic[-1] if state else math.nan,
                     "max_defect": state.max_defect[-1] if state else math.nan})
    return rows


_LEVELS: Dict[str, Callable[[int], Dict[str, Any]]] = {
    "interpolation": _interpolation_level,
    "hessian_convergence": _hessian_level,
    "cg_scaling": _cg_level,
}


def manufactured_study(kind: str, levels: int, out_dir: Optional[Union[str, Path]] = None) -> List[Dict[str, Any]]:
    """Per-level errors (or CG counts) with consecutive ratios; writes <kind>.csv under out_dir.

    Error ratios are coarse/fine; the CG ratios are fine/coarse.
    """
    if kind not in STUDY_KINDS:
        raise ConfigError(f"unknown study '{kind}'; choose from {', '.join(STUDY_KINDS)}")
    if kind == "climate_sweep":
        rows = climate_sweep(out_dir=out_dir)
    else:
        if levels < 2:
            raise ConfigError(f"a refinement study needs levels >= 2, got {levels}")
        rows = [_LEVELS[kind](level) for level in range(levels)]
        key = "cg_iters" if kind == "cg_scaling" else "error"
        for row, ratio in zip(rows, _ratios([r[key] for r in rows], inverse=kind == "cg_scaling")):
            row["ratio"] = ratio
        if kind == "cg_scaling":
            for row, ratio in zip(rows, _ratios([r["kappa"] for r in rows], inverse=True)):
                row["kappa_ratio"] = ratio
    for row in rows:
        log.info(f"{kind}: " + ", ".join(f"{k}={v}" for k, v in row.items()))
    if out_dir is not None:
        path = Path(out_dir) / f"{kind}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return rows
