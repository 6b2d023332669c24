import os
import sys
import csv
import json
import logging
import signal
from contextlib import contextmanager
from pathlib import Path
from typing import TYPE_CHECKING, Optional

from ldgplate.flow import FlowCallback, FlowError, FlowReport, FlowState, StepRecord
from ldgplate.output import export_surface, save_state

if TYPE_CHECKING:
    from ldgplate.scenarios import Problem

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "time", "E_h", "B_h", "C_h", "max_defect", "increment_norm", "cg_iters", "wall_ms")


def get_prog_name() -> str:
    """Return the invoked program name (supports symlink renaming).

    Uses sys.argv[0] basename; if empty, falls back to 'ldgplate'.
    """
    try:
        base = os.path.splitext(os.path.basename(sys.argv[0]))[0] or "ldgplate"
        return base
    except Exception:
        return "ldgplate"


class ScenarioRunner(FlowCallback):
    """Writes energies.csv, snapshots, the final state and the flow report of one run."""

    def __init__(self, prog: str, problem: "Problem", out_dir: Path):
        self.prog = prog
        self.problem = problem
        self.cfg = problem.config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.state: Optional[FlowState] = None
        self._interrupted = False
        self._csv_path = self.out_dir / "energies.csv"
        with open(self._csv_path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(CSV_COLUMNS)
        log.debug(f"{prog}: writing run artifacts to {self.out_dir}")

    @contextmanager
    def interrupt_guard(self):
        """Turn Ctrl-C into a stop request honoured after the current step."""
        def handler(signum, frame):
            log.warning("interrupt received; stopping after the current step")
            self._interrupted = True
        try:
            previous = signal.signal(signal.SIGINT, handler)
        except ValueError:
            # not in the main thread
            previous = None
        try:
            yield self
        finally:
            if previous is not None:
                signal.signal(signal.SIGINT, previous)

    def should_stop(self) -> bool:
        return self._interrupted

    def _snapshot(self, state: FlowState) -> None:
        if self.cfg.output.snapshots:
            export_surface(state.y, self.out_dir / f"snapshot_{state.step:06d}.vtk", state.defect)

    def on_step(self, state: FlowState, record: StepRecord) -> None:
        self.state = state
        with open(self._csv_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([repr(record[c]) if isinstance(record[c], float) else record[c]
                                     for c in CSV_COLUMNS])
        log.info(f"step {record['step']} t={record['time']:g} E_h={record['E_h']:.10g} B_h={record['B_h']:.10g} "
                 f"C_h={record['C_h']:.10g} defect={record['max_defect']:.3e} "
                 f"|dy|={record['increment_norm']:.3e} cg={record['cg_iters']} ({record['wall_ms']:.1f} ms)")
        if record["cg_iters"] > 0.9 * self.cfg.flow.cg_max_iters:
            log.warning(f"step {record['step']}: {record['cg_iters']} CG iterations, close to the cap "
                        f"{self.cfg.flow.cg_max_iters}")
        if state.step % self.cfg.output.cadence == 0:
            self._snapshot(state)

    def _write_final(self, state: FlowState, report: FlowReport) -> None:
        metadata = {
            "scenario": self.cfg.name,
            "config": self.cfg.model_dump(mode="json"),
            "step": state.step,
            "time": state.time,
            "E_h": state.energies[-1],
            "B_h": state.bending[-1],
            "C_h": state.cubic[-1],
            "max_defect": state.max_defect[-1],
            "stop_reason": state.stop_reason,
            "aborted": state.aborted,
        }
        save_state(self.out_dir / "final_state.bin", state.y, state.multiplier, metadata)
        summary = report.as_dict()
        summary["final_energy_with_self_term"] = state.energies[-1] + self.problem.curvature.self_energy(
            self.problem.mesh.areas)
        (self.out_dir / "flow_report.json").write_text(json.dumps(summary, indent=2, default=float), encoding="utf-8")
        self._snapshot(state)

    def on_finish(self, state: FlowState, report: FlowReport) -> None:
        self.state = state
        self._write_final(state, report)
        log.info(f"{self.prog}: run finished ({state.stop_reason}); artifacts in {self.out_dir}")

    def on_abort(self, state: FlowState, error: FlowError) -> None:
        self.state = state
        self._write_final(state, state.report)
        log.error(f"{self.prog}: run aborted at step {state.step}: {error}; state dumped to {self.out_dir}")
