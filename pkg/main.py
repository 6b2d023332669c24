from __future__ import annotations

import argparse
from pathlib import Path
import sys
import logging
import os

log = logging.getLogger("main")

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def configure_logging(log_level: str, prog_name: str):
    """Configure logging to a file in the working directory.

    Args:
        log_level: The log level to use (debug, info, warning, error, critical).
        prog_name: Base name of the log file, `<prog_name>.log`.
    """
    # Convert string log level to logging constant
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    # File handler writes logs to the project directory (absolute path)
    log_file = str(Path.cwd() / f'{prog_name}.log')
    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setLevel(numeric_level)
    file_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))

    # Configure root logger
    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    # Clear any existing handlers
    root_logger.handlers.clear()
    root_logger.addHandler(file_handler)

    loggers = [
        'ldgplate',
        'ldgplate.mesh',
        'ldgplate.dg_space',
        'ldgplate.hessian',
        'ldgplate.energy',
        'ldgplate.flow',
        'ldgplate.scenarios',
        'ldgplate.runner',
        'ldgplate.output',
    ]

    for logger_name in loggers:
        logger = logging.getLogger(logger_name)
        logger.setLevel(numeric_level)
        logger.handlers.clear()
        logger.propagate = True

    logging.info(f"Logging configured with level: {log_level.upper()} -> {log_file}")


def parse_args(prog, argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog=prog, description="LDG bilayer plate gradient-flow runner")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, help="Output directory (default: output.directory of the config)")
    common.add_argument("--threads", type=int, help="Number of BLAS/OpenMP threads")
    common.add_argument("--deterministic", action="store_true",
                        help="Single-threaded linear algebra for bitwise reproducible runs")
    common.add_argument("--debug", action="store_true", help="Enable debug level logging")

    run = sub.add_parser("run", parents=[common], help="Run a scenario")
    run.add_argument("--config", type=Path, help="Path to a scenario JSON file")
    run.add_argument("--preset", choices=["flat", "cylinder", "cigar", "helix", "climate", "origami"],
                     help="Named scenario preset (file values override it)")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="Override a config value, e.g. flow.tau=1e-3 (repeatable)")

    study = sub.add_parser("study", parents=[common], help="Run a refinement study")
    study.add_argument("--kind", required=True,
                       choices=["hessian_convergence", "interpolation", "cg_scaling", "climate_sweep"])
    study.add_argument("--levels", type=int, default=3, help="Number of refinement levels (>= 2)")

    export = sub.add_parser("export", parents=[common], help="Export a saved final state to VTK")
    export.add_argument("--state", type=Path, required=True, help="final_state.bin written by a run")
    export.add_argument("--flat", action="store_true", help="Export the reference mesh instead of the surface")
    return parser.parse_args(argv)


def set_thread_env(threads: int | None, deterministic: bool) -> None:
    """Must run before numpy is imported."""
    if deterministic:
        threads = 1
    if threads is not None:
        for name in THREAD_VARIABLES:
            os.environ[name] = str(threads)


def main(argv: list[str] | None = None) -> int:
    # progname from the runner module would import numpy too early
    prog = os.path.splitext(os.path.basename(sys.argv[0]))[0] or "ldgplate"
    args = parse_args(prog, argv)
    set_thread_env(args.threads, args.deterministic)
    configure_logging("debug" if args.debug else "info", prog)

    from ldgplate import ConfigError, FlowError, MeshError
    from ldgplate.output import StateFormatError, export_flat_mesh, export_surface, load_state
    from ldgplate.scenarios import load_scenario, manufactured_study, run_scenario

    try:
        if args.command == "run":
            log.info("Loading configuration from %s (preset %s)", args.config, args.preset)
            cfg = load_scenario(args.config, args.preset, args.override)
            result = run_scenario(cfg, args.out, prog)
            if result.status != 0:
                print(f"{prog}: flow aborted: {result.error}; state written to {result.out_dir}", file=sys.stderr)
            else:
                state = result.state
                print(f"{prog}: {state.stop_reason} after {state.step} steps, E_h={state.energies[-1]:.6f}, "
                      f"max defect {state.max_defect[-1]:.3e}; output in {result.out_dir}")
            return result.status
        if args.command == "study":
            out = args.out or Path("out") / args.kind
            rows = manufactured_study(args.kind, args.levels, out)
            for row in rows:
                print(", ".join(f"{k}={v}" for k, v in row.items()))
            return 0
        saved = load_state(args.state)
        target = args.out or args.state.with_suffix(".vtk")
        if target.suffix != ".vtk":
            target = target / ("reference.vtk" if args.flat else "surface.vtk")
        if args.flat:
            export_flat_mesh(saved.mesh, target)
        else:
            export_surface(saved.y, target)
        print(f"{prog}: wrote {target}")
        return 0
    except (ConfigError, MeshError) as e:
        logging.error("Failed to load configuration: %s", e)
        print(f"{prog}: {e}", file=sys.stderr)
        return 2
    except FlowError as e:
        logging.error("Flow failed: %s", e)
        print(f"{prog}: {e}", file=sys.stderr)
        return 3
    except (OSError, StateFormatError) as e:
        logging.error("I/O error: %s", e)
        print(f"{prog}: {e}", file=sys.stderr)
        return 4


def cli() -> None:
    sys.exit(main())


if __name__ == "__main__":
    cli()
