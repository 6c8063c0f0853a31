"""Sparse direct solve and right-preconditioned restarted GMRES with the
Block-Schur and Block-Reg block-diagonal preconditioners."""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pyamg
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import LinearOperator, aslinearoperator, splu

from assembly import SaddleSystem

__all__ = [
    "SolverError",
    "SolveReport",
    "PreconditionerSpec",
    "BlockOperator",
    "direct_solve",
    "gmres",
    "build_block_schur",
    "build_block_reg",
    "solve",
    "compute_speedup",
    "SOLVER_KINDS",
]

logger = logging.getLogger(__name__)

DIRECT_RESIDUAL_TARGET = 1e-10
DEFAULT_RTOL = 1e-8
DEFAULT_RESTART = 30
DEFAULT_MAXIT = 10000

SOLVER_KINDS = ("direct", "block-schur", "block-reg")

AMG_STRENGTH_THETA = 0.08
AMG_MAX_COARSE = 200


class SolverError(RuntimeError):
    """Raised when a factorization or a Krylov solve fails."""


@dataclass
class SolveReport:
    """Outcome of a solve. ``iterations`` counts preconditioned matvecs."""

    solver: str
    converged: bool
    iterations: int = 0
    relative_residual: float = float("nan")
    residual_history: List[float] = field(default_factory=list)
    t_solve: float = 0.0
    t_assembly: Optional[float] = None
    speedup: Optional[float] = None
    message: str = ""


@dataclass(frozen=True)
class PreconditionerSpec:
    """
    Solver choice.

    Attributes:
        kind: One of "direct", "block-schur", "block-reg".
        gamma: Block-Reg weight (W = gamma I); None means mesh size squared.
        inner: Block-Reg velocity block, "exact" (sparse LU) or "amg"
            (one pyamg smoothed-aggregation V-cycle).
    """

    kind: str = "direct"
    gamma: Optional[float] = None
    inner: str = "exact"

    def __post_init__(self) -> None:
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"Unknown solver kind {self.kind!r} (choose from {', '.join(SOLVER_KINDS)})")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.inner not in ("exact", "amg"):
            raise ValueError(f"Unknown inner solver {self.inner!r}")


class BlockOperator(LinearOperator):
    """Matrix-free product with the bordered saddle-point matrix."""

    def __init__(self, system: SaddleSystem) -> None:
        self.system = system
        n = system.n_total
        super().__init__(dtype=np.float64, shape=(n, n))

    def _matvec(self, x: np.ndarray) -> np.ndarray:
        s = self.system
        x = np.asarray(x, dtype=float).ravel()
        u, p, lam = s.split(x)
        out_u = s.A @ u + s.B.T @ p
        out_p = s.B @ u - s.C @ p
        if s.e is None:
            return np.concatenate([out_u, out_p])
        out_p = out_p + s.e * lam[0]
        return np.concatenate([out_u, out_p, [s.e @ p]])

    def _rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self._matvec(x)


def _relative_residual(K: sp.spmatrix, x: np.ndarray, b: np.ndarray) -> float:
    bnorm = np.linalg.norm(b)
    r = np.linalg.norm(b - K @ x)
    return r / bnorm if bnorm > 0 else r


def _factorize(M: sp.spmatrix, what: str, symmetric: bool = False):
    try:
        if symmetric:
            return splu(sp.csc_matrix(M), permc_spec="MMD_AT_PLUS_A", options={"SymmetricMode": True})
        return splu(sp.csc_matrix(M), permc_spec="COLAMD")
    except MemoryError as e:
        raise SolverError(f"Out of memory factorizing {what}") from e
    except RuntimeError as e:
        raise SolverError(f"Factorization of {what} failed: {e}") from e


def direct_solve(system: SaddleSystem, refine: int = 2) -> Tuple[np.ndarray, SolveReport]:
    """
    Sparse LU of the bordered matrix with a fill-reducing column ordering.

    Up to ``refine`` steps of iterative refinement are applied when the
    relative residual exceeds the target.
    """
    start = time.perf_counter()
    K = system.matrix()
    b = system.rhs()
    lu = _factorize(K, "the bordered system")
    x = lu.solve(b)
    res = _relative_residual(K, x, b)
    history = [res]
    steps = 0
    while res > DIRECT_RESIDUAL_TARGET and steps < refine and np.isfinite(res):
        x = x + lu.solve(b - K @ x)
        res = _relative_residual(K, x, b)
        history.append(res)
        steps += 1
    if not np.all(np.isfinite(x)):
        raise SolverError("Direct solve produced non-finite values (singular pivot)")
    converged = bool(res <= DIRECT_RESIDUAL_TARGET)
    if not converged:
        logger.warning(f"Direct solve residual {res:.3e} above target {DIRECT_RESIDUAL_TARGET:.0e}")
    report = SolveReport(
        solver="direct",
        converged=converged,
        iterations=steps,
        relative_residual=res,
        residual_history=history,
        t_solve=time.perf_counter() - start,
    )
    return x, report


def gmres(
    op: Union[sp.spmatrix, LinearOperator, np.ndarray, Callable],
    precond: Optional[Union[LinearOperator, Callable]],
    rhs: np.ndarray,
    rtol: float = DEFAULT_RTOL,
    restart: int = DEFAULT_RESTART,
    maxit: int = DEFAULT_MAXIT,
    x0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, SolveReport]:
    """
    Right-preconditioned restarted GMRES (modified Gram-Schmidt, Givens).

    Solves ``op M y = rhs`` and returns ``x = M y``. The true residual is
    recomputed at every restart and decides convergence; when ``maxit`` is
    exhausted the best iterate is returned with ``converged=False``.

    Args:
        op: Operator, sparse/dense matrix or callable.
        precond: Right preconditioner M (None = identity).
        rhs: Right-hand side.
        rtol: Relative tolerance on the true residual.
        restart: Krylov subspace size per cycle.
        maxit: Cap on the total number of inner iterations.
        x0: Initial guess.

    Returns:
        (solution, SolveReport)
    """
    start = time.perf_counter()
    b = np.asarray(rhs, dtype=float).ravel()
    n = b.size
    A = _as_apply(op, n)
    M = _as_apply(precond, n) if precond is not None else (lambda v: v)

    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if bnorm == 0.0:
        return np.zeros(n), SolveReport("gmres", True, 0, 0.0, [0.0], time.perf_counter() - start)

    r = b - A(x)
    beta = np.linalg.norm(r)
    history = [beta / bnorm]
    best_x, best_res = x.copy(), beta / bnorm
    total = 0
    message = ""
    restart = max(1, int(restart))

    while beta / bnorm > rtol and total < maxit:
        V = np.zeros((restart + 1, n))
        H = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        g = np.zeros(restart + 1)
        V[0] = r / beta
        g[0] = beta
        breakdown = False
        j_end = 0
        for j in range(restart):
            w = A(M(V[j]))
            total += 1
            w_norm = np.linalg.norm(w)
            for i in range(j + 1):
                H[i, j] = w @ V[i]
                w = w - H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            breakdown = H[j + 1, j] <= 1e-14 * w_norm
            if not breakdown:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                temp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = temp
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            j_end = j + 1
            history.append(abs(g[j + 1]) / bnorm)
            if history[-1] <= rtol or breakdown or total >= maxit:
                break

        diag = np.abs(np.diag(H[:j_end, :j_end]))
        if np.any(diag == 0.0):
            message = "GMRES breakdown: singular Hessenberg matrix"
            logger.warning(message)
            break
        y = solve_triangular(H[:j_end, :j_end], g[:j_end], lower=False)
        x = x + M(V[:j_end].T @ y)
        r = b - A(x)
        beta = np.linalg.norm(r)
        if beta / bnorm < best_res:
            best_x, best_res = x.copy(), beta / bnorm
        if breakdown and beta / bnorm > rtol:
            message = f"GMRES breakdown at iteration {total} with residual {beta / bnorm:.3e}"
            logger.warning(message)
            break

    converged = bool(best_res <= rtol)
    if not converged and not message:
        message = f"GMRES reached maxit={maxit} with residual {best_res:.3e}"
        logger.warning(message)
    report = SolveReport(
        solver="gmres",
        converged=converged,
        iterations=total,
        relative_residual=best_res,
        residual_history=history,
        t_solve=time.perf_counter() - start,
        message=message,
    )
    return best_x, report


def _as_apply(op, n: int) -> Callable[[np.ndarray], np.ndarray]:
    if callable(op) and not isinstance(op, (LinearOperator, sp.spmatrix, np.ndarray)):
        return op
    linear = aslinearoperator(op)
    if linear.shape != (n, n):
        raise ValueError(f"Operator shape {linear.shape} does not match rhs size {n}")
    return linear.matvec


def build_block_schur(system: SaddleSystem) -> LinearOperator:
    """
    ``diag(A)^-1`` on the velocity block and an exact solve with
    ``S = -C - B diag(A)^-1 B^T`` (bordered with e) on the pressure block.
    """
    d = system.A.diagonal()
    if np.any(d == 0.0):
        raise SolverError(f"A has a zero diagonal entry at row {int(np.flatnonzero(d == 0.0)[0])}")
    if np.any(d < 0.0):
        raise SolverError("A has a negative diagonal entry")
    d_inv = 1.0 / d
    S = (-system.C - system.B @ sp.diags(d_inv) @ system.B.T).tocsr()
    if system.e is not None:
        e = sp.csr_matrix(system.e.reshape(-1, 1))
        S = sp.bmat([[S, e], [e.T, sp.csr_matrix((1, 1))]], format="csr")
    lu = _factorize(S, "the Schur complement")
    n_u = system.n_u

    def apply(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float).ravel()
        return np.concatenate([d_inv * v[:n_u], lu.solve(v[n_u:])])

    return LinearOperator((system.n_total, system.n_total), matvec=apply, rmatvec=apply, dtype=float)


def _amg_inverse(M: sp.spmatrix) -> Callable[[np.ndarray], np.ndarray]:
    """One smoothed-aggregation V-cycle as an approximate inverse of ``M``."""
    try:
        ml = pyamg.smoothed_aggregation_solver(
            sp.csr_matrix(M),
            symmetry="symmetric",
            strength=("symmetric", {"theta": AMG_STRENGTH_THETA}),
            smooth="jacobi",
            max_coarse=AMG_MAX_COARSE,
        )
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as e:
        raise SolverError(f"AMG setup on the regularized block failed: {e}") from e
    logger.info(f"AMG hierarchy with {len(ml.levels)} levels, operator complexity {ml.operator_complexity():.2f}")
    return ml.aspreconditioner(cycle="V").matvec


def build_block_reg(system: SaddleSystem, gamma: float, inner: str = "exact") -> LinearOperator:
    """
    Approximate inverse of ``A + (1/gamma) B^T B`` on the velocity block and
    ``(1/gamma) I`` on the bordered pressure block.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    regularized = (system.A + (1.0 / gamma) * (system.B.T @ system.B)).tocsc()
    if inner == "amg":
        velocity_inverse = _amg_inverse(regularized)
    else:
        lu = _factorize(regularized, "the regularized velocity block", symmetric=True)
        velocity_inverse = lu.solve
    n_u = system.n_u

    def apply(v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float).ravel()
        return np.concatenate([velocity_inverse(v[:n_u]), v[n_u:] / gamma])

    return LinearOperator((system.n_total, system.n_total), matvec=apply, rmatvec=apply, dtype=float)


def solve(
    system: SaddleSystem,
    spec: PreconditionerSpec,
    rtol: float = DEFAULT_RTOL,
    restart: int = DEFAULT_RESTART,
    maxit: int = DEFAULT_MAXIT,
) -> Tuple[np.ndarray, SolveReport]:
    """Dispatches to the direct solver or to GMRES with the chosen preconditioner."""
    if spec.kind == "direct":
        x, report = direct_solve(system)
    else:
        start = time.perf_counter()
        if spec.kind == "block-schur":
            precond = build_block_schur(system)
        else:
            gamma = spec.gamma
            if gamma is None:
                if system.h is None:
                    raise ValueError("gamma=auto needs a system with a known mesh size")
                gamma = system.h**2
            precond = build_block_reg(system, gamma, spec.inner)
        setup = time.perf_counter() - start
        x, report = gmres(BlockOperator(system), precond, system.rhs(), rtol=rtol, restart=restart, maxit=maxit)
        report.t_solve += setup
        report.solver = spec.kind
    report.t_assembly = system.t_assembly
    logger.info(
        f"Solved with {report.solver}: it={report.iterations}, "
        f"residual={report.relative_residual:.2e}, T_sol={report.t_solve:.2f}s"
    )
    return x, report


def compute_speedup(timings: Mapping[int, float]) -> Dict[int, float]:
    """S_p = T_baseline / T_p, the baseline being the smallest thread count."""
    if not timings:
        raise ValueError("compute_speedup needs at least the baseline timing")
    baseline = timings[min(timings)]
    return {p: baseline / t for p, t in sorted(timings.items())}
