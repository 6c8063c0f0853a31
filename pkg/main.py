import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml
from dotenv import load_dotenv

from harness import (
    DEFAULT_CONFIG,
    ExperimentConfig,
    LevelResult,
    MeshSource,
    compute_errors,
    get_case,
    merge_config,
    run_bench,
    run_convergence,
    solve_case,
    write_report,
)
from mesh import compute_geometry, mesh_summary
from solver import SOLVER_KINDS
from vemspace import MAX_ORDER, MIN_ORDER


logger = logging.getLogger(__name__)

DEFAULT_LOG_FILE = "mixedvem.log"


def setup_logging(log_file: Optional[str] = None) -> None:
    """Configures file and console logging. Call only from the entry point."""
    root = logging.getLogger()
    if root.handlers:
        return  # already configured; avoid duplicate handlers
    logging.basicConfig(
        filename=log_file or os.environ.get("MVEM_LOG_FILE", DEFAULT_LOG_FILE),
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    console = logging.StreamHandler()
    console.setLevel(logging.INFO)
    root.addHandler(console)


def load_config(path: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
    """
    Loads the layered configuration.

    The YAML file is ``path`` if given, else ``$MVEM_CONFIG``, else
    ``config.yaml`` when it exists. Its sections are merged over
    ``DEFAULT_CONFIG``; ``$MVEM_WORKERS`` overrides the assembly worker count.

    Raises:
        FileNotFoundError: An explicitly requested file does not exist.
    """
    path = path or os.environ.get("MVEM_CONFIG")
    data: Dict[str, Any] = {}
    if path:
        with open(path, "r") as f:
            data = yaml.safe_load(f) or {}
    elif os.path.exists("config.yaml"):
        with open("config.yaml", "r") as f:
            data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"Config file must hold a mapping, got {type(data).__name__}")
    config = merge_config(DEFAULT_CONFIG, data)
    workers = os.environ.get("MVEM_WORKERS")
    if workers:
        config["assembly"]["workers"] = int(workers)
    return config


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _gamma(text: str) -> str:
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be 'auto' or a number, got {text!r}")
    if value <= 0.0:
        raise argparse.ArgumentTypeError("gamma must be positive")
    return text


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    source = common.add_mutually_exclusive_group()
    source.add_argument("--mesh", help="Mesh file(s) in the JSON mesh format, comma-separated")
    source.add_argument("--gen-cube", type=_int_list, help="Structured cube resolution(s), e.g. 2,4,8")
    common.add_argument("--lenient", action="store_true", help="Accept degenerate faces with a warning")
    common.add_argument("--order", type=int, choices=range(MIN_ORDER, MAX_ORDER + 1))
    common.add_argument("--solver", choices=SOLVER_KINDS)
    common.add_argument("--gamma", type=_gamma, help="Block-Reg shift: 'auto' (h^2) or a value")
    common.add_argument("--inner", choices=("exact", "amg"), help="Block-Reg inner solve")
    common.add_argument("--rtol", type=float)
    common.add_argument("--restart", type=int)
    common.add_argument("--maxit", type=int)
    common.add_argument("--threads", type=_int_list, help="Worker count(s); bench sweeps the list")
    common.add_argument("--out", help="Report directory")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--case", choices=("default", "linear", "polynomial"))

    parser = argparse.ArgumentParser(
        prog="mixedvem",
        description="Mixed virtual element solver for the 3D Darcy problem on polyhedral meshes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("convergence", parents=[common], help="Convergence study with observed rates")
    sub.add_parser("bench", parents=[common], help="Assembly speedup and preconditioner benchmark")
    sub.add_parser("solve", parents=[common], help="Solve one manufactured problem")
    sub.add_parser("mesh-info", parents=[common], help="Print mesh statistics")
    return parser


def _apply_flags(config: Dict[str, Dict[str, Any]], args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    """CLI flags win over the file and the defaults."""
    overrides: Dict[str, Dict[str, Any]] = {
        "discretization": {"order": args.order},
        "solver": {
            "kind": args.solver,
            "gamma": args.gamma,
            "inner": args.inner,
            "rtol": args.rtol,
            "restart": args.restart,
            "maxit": args.maxit,
        },
        "case": {"name": args.case},
        "output": {"dir": args.out, "format": args.format},
    }
    if args.threads:
        overrides["assembly"] = {"workers": args.threads[0]}
        overrides["bench"] = {"threads": args.threads}
    cleaned = {s: {k: v for k, v in values.items() if v is not None} for s, values in overrides.items()}
    return merge_config(config, cleaned)


def _mesh_sources(args: argparse.Namespace) -> List[MeshSource]:
    if args.mesh:
        return [MeshSource.from_path(p.strip(), strict=not args.lenient) for p in args.mesh.split(",") if p.strip()]
    if args.gen_cube:
        return [MeshSource.from_cube(n) for n in args.gen_cube]
    return []


def _run_solve(experiment: ExperimentConfig) -> List[Dict[str, Any]]:
    source = experiment.meshes[0]
    case = get_case(experiment.case, experiment.order, experiment.nu)
    mesh = source.load()
    system, x, report = solve_case(mesh, experiment, case)
    errors = compute_errors(system, x, case)
    print(
        f"{source.label}: dofs={system.space.n_total} it={report.iterations} "
        f"e_v={errors.e_v:.3e} e_q={errors.e_q:.3e} e_div={errors.e_div:.3e}"
    )
    level = LevelResult(
        label=source.label,
        h=system.h,
        n_cells=mesh.n_cells,
        dofs=system.space.n_total,
        e_v=errors.e_v,
        e_q=errors.e_q,
        e_div=errors.e_div,
        iterations=report.iterations,
        converged=report.converged,
        message=report.message,
    )
    return [{
        "order": experiment.order,
        "case": case.name,
        "solver": experiment.solver,
        **asdict(level),
        "t_assembly": report.t_assembly,
        "t_solve": report.t_solve,
    }]


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command-line entry point.

    Returns:
        0 on success, 1 on runtime/config/file errors or failed levels,
        2 on argument errors.
    """
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = _apply_flags(load_config(args.config), args)
    except Exception as e:
        logger.error(f"Failed to load config: {e}")
        return 1

    sources = _mesh_sources(args)
    if args.command in ("solve", "mesh-info") and not sources:
        parser.print_usage(sys.stderr)
        print(f"{args.command}: one of --mesh or --gen-cube is required", file=sys.stderr)
        return 2

    out_dir = Path(config["output"]["dir"])
    fmt = config["output"]["format"]
    try:
        if args.command == "mesh-info":
            source = sources[0]
            mesh = source.load()
            summary = {"label": source.label, **mesh_summary(mesh, compute_geometry(mesh))}
            print(json.dumps(summary, indent=2))
            return 0

        section = "bench" if args.command == "bench" else "convergence"
        experiment = ExperimentConfig.from_dict(config, sources, section=section)
        logger.info(f"--- {args.command}: k={experiment.order} solver={experiment.solver} meshes={len(experiment.meshes)} ---")

        if args.command == "convergence":
            report = run_convergence(experiment)
            write_report(report.rows(), out_dir, "convergence", fmt)
            return 0 if report.ok else 1
        if args.command == "bench":
            if args.solver:
                experiment = replace(experiment, solvers=(args.solver,))
            rows = run_bench(experiment)
            write_report(rows, out_dir, "bench", fmt)
            return 0 if all(row["status"] == "ok" for row in rows) else 1
        rows = _run_solve(experiment)
        write_report(rows, out_dir, "solve", fmt)
        return 0
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    setup_logging()
    sys.exit(cli())
