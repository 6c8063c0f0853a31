"""Experiment driver: manufactured cases, error indicators, convergence and
benchmark sweeps, and CSV/JSON reports."""
import copy
import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from functools import partial
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from assembly import CoefficientField, SaddleSystem, assemble
from mesh import PolyMesh, gen_cube_mesh, load_mesh
from solver import SOLVER_KINDS, PreconditionerSpec, SolveReport, compute_speedup, solve
from vemspace import dof_counts

__all__ = [
    "REPORT_SCHEMA_VERSION",
    "DEFAULT_CONFIG",
    "ManufacturedCase",
    "default_case",
    "linear_pressure_case",
    "polynomial_case",
    "get_case",
    "ErrorTriple",
    "LevelResult",
    "ErrorReport",
    "MeshSource",
    "ExperimentConfig",
    "merge_config",
    "compute_errors",
    "observed_rates",
    "solve_case",
    "run_convergence",
    "run_bench",
    "write_report",
]

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
NORM_DEGREE = 12

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "discretization": {"order": 1},
    "assembly": {"workers": 1},
    "solver": {
        "kind": "direct",
        "rtol": 1e-8,
        "restart": 30,
        "maxit": 10000,
        "gamma": "auto",
        "inner": "exact",
    },
    "case": {"name": "default", "nu": 1.0},
    "convergence": {"cube_levels": [2, 4, 8, 12]},
    "bench": {
        "cube_levels": [4, 8],
        "solvers": ["direct", "block-schur", "block-reg"],
        "threads": [1],
    },
    "output": {"dir": "reports", "format": "csv"},
}


# --- Manufactured cases ---

def _quintic_velocity(points: np.ndarray, nu: float = 1.0) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.column_stack([
        -5 * x**4 - y**2 * z**3,
        -24 * y**3 - 2 * x * y * z**3,
        -27 * z**2 - 3 * x * y**2 * z**2,
    ]) / nu


def _quintic_pressure(points: np.ndarray) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return x**5 + 6 * y**4 + 9 * z**3 + x * y**2 * z**3


def _quintic_source(points: np.ndarray, nu: float = 1.0) -> np.ndarray:
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return (-20 * x**3 - 72 * y**2 - 2 * x * z**3 - 54 * z - 6 * x * y**2 * z) / nu


def _linear_velocity(points: np.ndarray, nu: float = 1.0) -> np.ndarray:
    out = np.zeros((points.shape[0], 3))
    out[:, 0] = -1.0 / nu
    return out


def _linear_pressure(points: np.ndarray) -> np.ndarray:
    return points[:, 0] - 0.5


def _zero(points: np.ndarray, nu: float = 1.0) -> np.ndarray:
    return np.zeros(points.shape[0])


_DIRECTION = np.array([1.0, 2.0, -1.0])


def _power_pressure(points: np.ndarray, m: int) -> np.ndarray:
    return (points @ _DIRECTION + 0.5) ** m


def _power_velocity(points: np.ndarray, m: int, nu: float = 1.0) -> np.ndarray:
    base = points @ _DIRECTION + 0.5
    return -(m * base ** (m - 1))[:, None] * _DIRECTION[None, :] / nu


def _power_source(points: np.ndarray, m: int, nu: float = 1.0) -> np.ndarray:
    if m < 2:
        return np.zeros(points.shape[0])
    base = points @ _DIRECTION + 0.5
    return -m * (m - 1) * (_DIRECTION @ _DIRECTION) * base ** (m - 2) / nu


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact pair (v, q) with ``nu v + grad q = 0`` and ``f = div v``."""

    name: str
    velocity: Callable[[np.ndarray], np.ndarray]
    pressure: Callable[[np.ndarray], np.ndarray]
    source: Callable[[np.ndarray], np.ndarray]
    nu: float = 1.0

    def boundary_flux(self, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
        return np.einsum("ij,ij->i", self.velocity(points), normals)

    def fields(self) -> CoefficientField:
        return CoefficientField(nu=self.nu, f=self.source, u_N=self.boundary_flux)


def default_case(nu: float = 1.0) -> ManufacturedCase:
    """q = x^5 + 6y^4 + 9z^3 + x y^2 z^3 with v = -grad q / nu."""
    return ManufacturedCase(
        name="default",
        velocity=partial(_quintic_velocity, nu=nu),
        pressure=_quintic_pressure,
        source=partial(_quintic_source, nu=nu),
        nu=nu,
    )


def linear_pressure_case(nu: float = 1.0) -> ManufacturedCase:
    """q = x - 1/2 with constant velocity and no source."""
    return ManufacturedCase(
        name="linear",
        velocity=partial(_linear_velocity, nu=nu),
        pressure=_linear_pressure,
        source=partial(_zero, nu=nu),
        nu=nu,
    )


def polynomial_case(m: int, nu: float = 1.0) -> ManufacturedCase:
    """q = (x + 2y - z + 1/2)^m, recovered exactly by order k >= m - 1."""
    if m < 1:
        raise ValueError(f"polynomial_case needs m >= 1, got {m}")
    return ManufacturedCase(
        name=f"polynomial{m}",
        velocity=partial(_power_velocity, m=m, nu=nu),
        pressure=partial(_power_pressure, m=m),
        source=partial(_power_source, m=m, nu=nu),
        nu=nu,
    )


def get_case(name: str, order: int, nu: float = 1.0) -> ManufacturedCase:
    if name == "default":
        return default_case(nu)
    if name == "linear":
        return linear_pressure_case(nu)
    if name == "polynomial":
        return polynomial_case(order + 1, nu)
    raise ValueError(f"Unknown case {name!r} (choose default, linear or polynomial)")


# --- Errors ---

class ErrorTriple(NamedTuple):
    e_v: float
    e_q: float
    e_div: float


def compute_errors(
    system: SaddleSystem,
    x: np.ndarray,
    case: ManufacturedCase,
    degree: Optional[int] = None,
    pressure_reference: str = "exact",
) -> ErrorTriple:
    """
    Relative L^2 errors of a solved system against a manufactured case.

    e_v compares the cell-wise projection of u_h with v, e_q compares p_h with
    the mean-free exact pressure and e_div compares div u_h with f. With
    ``pressure_reference="projected"`` the pressure is compared with the
    cell-wise L^2 projection of the mean-free exact pressure onto P_{k-1}.

    Args:
        system: Assembled system (carries the space and element operators).
        x: Solution of the bordered system.
        case: Exact solution.
        degree: Quadrature degree of the error integrals (default 2k + 4).
        pressure_reference: "exact" or "projected".
    """
    if pressure_reference not in ("exact", "projected"):
        raise ValueError(f"Unknown pressure reference {pressure_reference!r}")
    space = system.space
    k = space.k
    degree = 2 * k + 4 if degree is None else degree
    norm_degree = max(NORM_DEGREE, degree)
    velocity = system.velocity(x)
    pressure = system.pressure(x)
    n_q = space.layout.n_q

    q_total = 0.0
    for c in range(space.mesh.n_cells):
        points, weights = space.cell_rule(c, norm_degree)
        q_total += weights @ case.pressure(points)
    q_mean = q_total / float(space.geom.cell_volume.sum())

    def shifted(points):
        return case.pressure(points) - q_mean

    err = np.zeros(3)
    norm = np.zeros(3)
    for ops in system.elements:
        c = ops.cell
        local = ops.signs * velocity[ops.dofs]
        points, weights = space.cell_rule(c, degree)
        uh = space.cell_basis(c)(points) @ ops.project(local).T
        err[0] += weights @ np.sum((case.velocity(points) - uh) ** 2, axis=1)

        lower = space.cell_basis(c, k - 1)(points)
        qh = lower @ (ops.pressure_map @ pressure[c * n_q:(c + 1) * n_q])
        if pressure_reference == "projected":
            qref = lower @ (ops.pressure_map @ space.interpolate_pressure(c, shifted, norm_degree))
        else:
            qref = shifted(points)
        err[1] += weights @ (qref - qh) ** 2

        divh = lower @ (ops.div @ local)
        err[2] += weights @ (case.source(points) - divh) ** 2

        points, weights = space.cell_rule(c, norm_degree)
        norm[0] += weights @ np.sum(case.velocity(points) ** 2, axis=1)
        norm[1] += weights @ shifted(points) ** 2
        norm[2] += weights @ case.source(points) ** 2

    norm = np.where(norm > 0.0, norm, 1.0)
    e = np.sqrt(err / norm)
    return ErrorTriple(float(e[0]), float(e[1]), float(e[2]))


def observed_rates(hs: Sequence[float], errors: Sequence[float]) -> List[Optional[float]]:
    """rate_i = ln(e_{i-1} / e_i) / ln(h_{i-1} / h_i); None where undefined."""
    rates: List[Optional[float]] = [None]
    for i in range(1, len(hs)):
        h0, h1, e0, e1 = hs[i - 1], hs[i], errors[i - 1], errors[i]
        if h1 < h0 and e0 > 0.0 and e1 > 0.0:
            rates.append(float(np.log(e0 / e1) / np.log(h0 / h1)))
        else:
            rates.append(None)
    return rates


# --- Configuration ---

@dataclass(frozen=True)
class MeshSource:
    """A structured cube of resolution ``cube`` or a mesh file ``path``."""

    label: str
    cube: Optional[int] = None
    path: Optional[str] = None
    strict: bool = True

    @classmethod
    def from_cube(cls, n: int) -> "MeshSource":
        return cls(label=f"cube{n}", cube=int(n))

    @classmethod
    def from_path(cls, path: str, strict: bool = True) -> "MeshSource":
        return cls(label=Path(path).stem, path=str(path), strict=strict)

    def load(self) -> PolyMesh:
        if self.cube is not None:
            return gen_cube_mesh(self.cube)
        return load_mesh(self.path, strict=self.strict)


def merge_config(base: Dict[str, Dict[str, Any]], override: Optional[Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """Per-section shallow merge: ``{**base[s], **override[s]}``."""
    merged = copy.deepcopy(base)
    for section, values in (override or {}).items():
        if isinstance(values, dict):
            merged[section] = {**merged.get(section, {}), **values}
        else:
            merged[section] = values
    return merged


@dataclass(frozen=True)
class ExperimentConfig:
    order: int = 1
    solver: str = "direct"
    gamma: Optional[float] = None
    inner: str = "exact"
    rtol: float = 1e-8
    restart: int = 30
    maxit: int = 10000
    workers: int = 1
    threads: Tuple[int, ...] = (1,)
    solvers: Tuple[str, ...] = SOLVER_KINDS
    meshes: Tuple[MeshSource, ...] = ()
    case: str = "default"
    nu: float = 1.0

    @classmethod
    def from_dict(cls, config: Dict[str, Dict[str, Any]], meshes: Sequence[MeshSource] = (), section: str = "convergence") -> "ExperimentConfig":
        """Builds an experiment from a layered config; cube levels of
        ``section`` are used when no meshes are given."""
        cfg = merge_config(DEFAULT_CONFIG, config)
        solver = cfg["solver"]
        gamma = solver.get("gamma", "auto")
        if not meshes:
            meshes = [MeshSource.from_cube(n) for n in cfg[section].get("cube_levels", [])]
        bench = cfg["bench"]
        return cls(
            order=int(cfg["discretization"]["order"]),
            solver=str(solver["kind"]),
            gamma=None if gamma in (None, "auto") else float(gamma),
            inner=str(solver.get("inner", "exact")),
            rtol=float(solver["rtol"]),
            restart=int(solver["restart"]),
            maxit=int(solver["maxit"]),
            workers=max(1, int(cfg["assembly"]["workers"])),
            threads=tuple(int(t) for t in bench.get("threads", [1])),
            solvers=tuple(bench.get("solvers", SOLVER_KINDS)),
            meshes=tuple(meshes),
            case=str(cfg["case"]["name"]),
            nu=float(cfg["case"].get("nu", 1.0)),
        )

    def spec(self, kind: Optional[str] = None) -> PreconditionerSpec:
        return PreconditionerSpec(kind=kind or self.solver, gamma=self.gamma, inner=self.inner)


# --- Experiments ---

@dataclass
class LevelResult:
    label: str
    status: str = "ok"
    h: Optional[float] = None
    n_cells: Optional[int] = None
    dofs: Optional[int] = None
    e_v: Optional[float] = None
    e_q: Optional[float] = None
    e_div: Optional[float] = None
    rate_v: Optional[float] = None
    rate_q: Optional[float] = None
    rate_div: Optional[float] = None
    iterations: Optional[int] = None
    converged: Optional[bool] = None
    message: str = ""


@dataclass
class ErrorReport:
    order: int
    case: str
    solver: str
    levels: List[LevelResult] = field(default_factory=list)

    def rows(self) -> List[Dict[str, Any]]:
        return [{"order": self.order, "case": self.case, "solver": self.solver, **asdict(lvl)} for lvl in self.levels]

    @property
    def ok(self) -> bool:
        return all(lvl.status == "ok" for lvl in self.levels)


def solve_case(
    mesh: PolyMesh,
    config: ExperimentConfig,
    case: ManufacturedCase,
    workers: Optional[int] = None,
    kind: Optional[str] = None,
) -> Tuple[SaddleSystem, np.ndarray, SolveReport]:
    """Assembles and solves one manufactured problem."""
    system = assemble(mesh, config.order, case.fields(), workers=workers or config.workers)
    x, report = solve(system, config.spec(kind), rtol=config.rtol, restart=config.restart, maxit=config.maxit)
    return system, x, report


def run_convergence(config: ExperimentConfig) -> ErrorReport:
    """
    Solves every mesh level and reports errors with observed rates.

    Failures are recorded per level and the sweep continues.
    """
    case = get_case(config.case, config.order, config.nu)
    report = ErrorReport(order=config.order, case=case.name, solver=config.solver)
    for source in config.meshes:
        logger.info(f"--- Convergence level {source.label} (k={config.order}) ---")
        try:
            mesh = source.load()
            system, x, solve_report = solve_case(mesh, config, case)
            errors = compute_errors(system, x, case)
            level = LevelResult(
                label=source.label,
                h=system.h,
                n_cells=mesh.n_cells,
                dofs=system.space.n_total,
                e_v=errors.e_v,
                e_q=errors.e_q,
                e_div=errors.e_div,
                iterations=solve_report.iterations,
                converged=solve_report.converged,
                message=solve_report.message,
            )
            logger.info(f"{source.label}: h={system.h:.4f} e_v={errors.e_v:.3e} e_q={errors.e_q:.3e}")
        except Exception as e:
            logger.error(f"Level {source.label} failed: {e}")
            level = LevelResult(label=source.label, status="failed", message=str(e))
        report.levels.append(level)

    done = [lvl for lvl in report.levels if lvl.status == "ok"]
    hs = [lvl.h for lvl in done]
    for attr in ("v", "q", "div"):
        rates = observed_rates(hs, [getattr(lvl, f"e_{attr}") for lvl in done])
        for lvl, rate in zip(done, rates):
            setattr(lvl, f"rate_{attr}", rate)
    return report


def run_bench(config: ExperimentConfig) -> List[Dict[str, Any]]:
    """
    Benchmark table: per mesh, assembly times over the thread sweep with
    speedups, and per solver the GMRES iterations and solve time.
    """
    case = get_case(config.case, config.order, config.nu)
    threads = sorted(set(config.threads)) or [1]
    rows: List[Dict[str, Any]] = []
    for source in config.meshes:
        logger.info(f"--- Bench level {source.label} (k={config.order}) ---")
        row: Dict[str, Any] = {"label": source.label, "order": config.order, "status": "ok"}
        try:
            mesh = source.load()
            row["n_cells"] = mesh.n_cells
            row["dofs"] = dof_counts(config.order, mesh)[2]
            timings: Dict[int, float] = {}
            system = None
            for p in threads:
                system = assemble(mesh, config.order, case.fields(), workers=p)
                timings[p] = system.t_assembly
            speedups = compute_speedup(timings)
            row["h"] = system.h
            row["t_ass"] = timings[threads[0]]
            for p in threads:
                row[f"t_ass_p{p}"] = timings[p]
                row[f"s_p{p}"] = speedups[p]
                row[f"s_id_p{p}"] = p / threads[0]
        except Exception as e:
            logger.error(f"Bench level {source.label} failed: {e}")
            row.update(status="failed", message=str(e))
            rows.append(row)
            continue

        solutions = {}
        for kind in config.solvers:
            try:
                x, report = solve(system, config.spec(kind), rtol=config.rtol, restart=config.restart, maxit=config.maxit)
                row[f"it_{kind}"] = report.iterations
                row[f"t_sol_{kind}"] = report.t_solve
                row[f"converged_{kind}"] = report.converged
                solutions[kind] = x
            except Exception as e:
                logger.error(f"Solver {kind} failed on {source.label}: {e}")
                row[f"it_{kind}"] = None
                row[f"error_{kind}"] = str(e)
                row["status"] = "partial"
        diffs = [
            float(np.linalg.norm(solutions[a] - solutions[b]) / max(np.linalg.norm(solutions[b]), 1e-300))
            for a, b in combinations(sorted(solutions), 2)
        ]
        row["max_pairwise_diff"] = max(diffs) if diffs else None
        rows.append(row)
    return rows


# --- Reports ---

def write_report(
    rows: List[Dict[str, Any]],
    out_dir: Union[str, Path],
    name: str,
    fmt: str = "csv",
) -> Path:
    """
    Writes rows as CSV or JSON (schema version REPORT_SCHEMA_VERSION).

    Returns:
        Path of the written file.
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if fmt == "json":
        path = out_dir / f"{name}.json"
        with open(path, "w") as f:
            json.dump({"schema_version": REPORT_SCHEMA_VERSION, "kind": name, "rows": rows}, f, indent=2)
            f.write("\n")
    elif fmt == "csv":
        path = out_dir / f"{name}.csv"
        fieldnames: List[str] = ["schema_version"]
        for row in rows:
            fieldnames.extend(key for key in row if key not in fieldnames)
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow({"schema_version": REPORT_SCHEMA_VERSION, **row})
    else:
        raise ValueError(f"Unknown report format {fmt!r}")
    logger.info(f"Wrote {path}")
    return path
