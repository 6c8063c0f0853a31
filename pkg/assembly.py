"""Local discrete forms and global assembly of the bordered saddle-point system.

The continuous problem ``nu u + grad p = 0, div u = f`` gives

    a_h(u, v) - b_h(v, p) = 0,    b_h(u, q) = (f, q).

The assembled matrix is kept symmetric by storing ``-p`` as the pressure
unknown; the mean-value condition on the pressure is a single Lagrange
multiplier row/column:

    [[A, B^T, 0], [B, -C, e], [0, e^T, 0]] (u, -p, lambda) = (g, F, 0)

with C = 0. Neumann data fix the boundary face dofs, which are eliminated.
"""
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from mesh import PolyMesh, mesh_size
from vemspace import ElementOperators, VemSpace

__all__ = [
    "IncompatibleDataError",
    "CoefficientField",
    "LocalForms",
    "SaddleSystem",
    "local_a",
    "local_b",
    "local_f",
    "assemble",
    "export_triplets",
]

logger = logging.getLogger(__name__)

COMPATIBILITY_TOL = 1e-8

NuSpec = Union[float, Sequence[float], Callable[[np.ndarray], np.ndarray]]


class IncompatibleDataError(ValueError):
    """Raised when the source does not balance the boundary flux."""


@dataclass(frozen=True)
class CoefficientField:
    """
    Problem data.

    Attributes:
        nu: Per-cell positive constant: a scalar, one value per cell, or a
            callable sampled at cell centroids.
        f: Source, callable on (n, 3) points; None means zero.
        u_N: Outward normal flux, callable on (points, outward normals);
            None means zero flux.
    """

    nu: NuSpec = 1.0
    f: Optional[Callable[[np.ndarray], np.ndarray]] = None
    u_N: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def cell_nu(self, centroids: np.ndarray) -> np.ndarray:
        n = centroids.shape[0]
        if callable(self.nu):
            values = np.asarray(self.nu(centroids), dtype=float).reshape(n)
        else:
            values = np.broadcast_to(np.asarray(self.nu, dtype=float), (n,)).copy()
        if np.any(values <= 0.0):
            raise ValueError(f"nu must be positive on every cell (min {values.min():.3e})")
        return values


@dataclass(frozen=True)
class LocalForms:
    a: np.ndarray
    b: np.ndarray
    f: np.ndarray


def local_a(ops: ElementOperators, nu: float) -> np.ndarray:
    """
    Consistency plus dof-Euclidean stabilization:
    ``nu * Pi^T M Pi + nu * |P| * (I - D_Pi)^T (I - D_Pi)``.
    """
    block_mass = np.kron(np.eye(3), ops.mass)
    consistency = ops.proj.T @ block_mass @ ops.proj
    defect = np.eye(ops.n_local) - ops.dof_projection()
    a = nu * consistency + nu * ops.volume * (defect.T @ defect)
    return 0.5 * (a + a.T)


def local_b(ops: ElementOperators) -> np.ndarray:
    """``int_P div v q`` on (pressure moments) x (velocity dofs)."""
    return ops.volume * ops.div


def local_f(space: VemSpace, ops: ElementOperators, f: Optional[Callable], degree: Optional[int] = None) -> np.ndarray:
    """``int_P f q`` for every pressure moment of the cell."""
    n_q = space.layout.n_q
    if f is None:
        return np.zeros(n_q)
    degree = 2 * space.k + 4 if degree is None else degree
    points, weights = space.cell_rule(ops.cell, degree)
    moments = space.cell_basis(ops.cell, space.k - 1)(points).T @ (weights * np.asarray(f(points)))
    return ops.pressure_map @ moments


@dataclass
class SaddleSystem:
    """
    Blocks of the bordered saddle-point system on the free velocity dofs.

    The pressure unknown is ``-p``; use :meth:`pressure` to recover ``p``.
    """

    A: sp.csr_matrix
    B: sp.csr_matrix
    rhs_u: np.ndarray
    rhs_p: np.ndarray
    e: Optional[np.ndarray] = None
    C: Optional[sp.csr_matrix] = None
    free_dofs: Optional[np.ndarray] = None
    fixed_dofs: Optional[np.ndarray] = None
    fixed_values: Optional[np.ndarray] = None
    space: Optional[VemSpace] = None
    elements: Sequence[ElementOperators] = field(default_factory=list)
    h: Optional[float] = None
    t_assembly: float = 0.0

    def __post_init__(self) -> None:
        self.A = sp.csr_matrix(self.A)
        self.B = sp.csr_matrix(self.B)
        if self.C is None:
            self.C = sp.csr_matrix((self.n_p, self.n_p))
        self.rhs_u = np.asarray(self.rhs_u, dtype=float)
        self.rhs_p = np.asarray(self.rhs_p, dtype=float)

    @classmethod
    def from_blocks(cls, A, B, rhs_u=None, rhs_p=None, e=None) -> "SaddleSystem":
        """Builds a bare system (no mesh bookkeeping) from its blocks."""
        A, B = sp.csr_matrix(A), sp.csr_matrix(B)
        rhs_u = np.zeros(A.shape[0]) if rhs_u is None else rhs_u
        rhs_p = np.zeros(B.shape[0]) if rhs_p is None else rhs_p
        return cls(A=A, B=B, rhs_u=rhs_u, rhs_p=rhs_p, e=None if e is None else np.asarray(e, dtype=float))

    @property
    def n_u(self) -> int:
        return self.A.shape[0]

    @property
    def n_p(self) -> int:
        return self.B.shape[0]

    @property
    def n_border(self) -> int:
        return 0 if self.e is None else 1

    @property
    def n_total(self) -> int:
        return self.n_u + self.n_p + self.n_border

    def matrix(self) -> sp.csr_matrix:
        """The monolithic bordered matrix."""
        if self.e is None:
            return sp.bmat([[self.A, self.B.T], [self.B, -self.C]], format="csr")
        e = sp.csr_matrix(self.e.reshape(-1, 1))
        return sp.bmat(
            [[self.A, self.B.T, None], [self.B, -self.C, e], [None, e.T, sp.csr_matrix((1, 1))]],
            format="csr",
        )

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.rhs_u, self.rhs_p, np.zeros(self.n_border)])

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(u, -p, multiplier) parts of a solution vector."""
        return x[: self.n_u], x[self.n_u:self.n_u + self.n_p], x[self.n_u + self.n_p:]

    def velocity(self, x: np.ndarray) -> np.ndarray:
        """All global velocity dofs, including the eliminated boundary ones."""
        if self.free_dofs is None:
            return x[: self.n_u].copy()
        n_vel = self.free_dofs.size + self.fixed_dofs.size
        out = np.zeros(n_vel)
        out[self.free_dofs] = x[: self.n_u]
        out[self.fixed_dofs] = self.fixed_values
        return out

    def pressure(self, x: np.ndarray) -> np.ndarray:
        """Pressure moments ``p`` (the solved block holds ``-p``)."""
        return -x[self.n_u:self.n_u + self.n_p]


# --- Element loop ---

_CONTEXT: Optional[Tuple[VemSpace, CoefficientField, np.ndarray]] = None


def _init_worker(context) -> None:
    global _CONTEXT
    _CONTEXT = context


def _cell_forms(cells: range) -> List[Tuple[ElementOperators, LocalForms]]:
    space, fields, nu = _CONTEXT
    out = []
    for c in cells:
        ops = space.element(c)
        forms = LocalForms(a=local_a(ops, nu[c]), b=local_b(ops), f=local_f(space, ops, fields.f))
        out.append((ops.slim(), forms))
    return out


def _element_loop(space: VemSpace, fields: CoefficientField, nu: np.ndarray, workers: int):
    n = space.mesh.n_cells
    context = (space, fields, nu)
    if workers <= 1 or n == 1:
        _init_worker(context)
        try:
            return _cell_forms(range(n))
        finally:
            _init_worker(None)

    chunk = max(1, n // (4 * workers))
    chunks = [range(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if "fork" in multiprocessing.get_all_start_methods():
        executor = ProcessPoolExecutor(
            max_workers=workers,
            mp_context=multiprocessing.get_context("fork"),
            initializer=_init_worker,
            initargs=(context,),
        )
    else:
        logger.warning("fork start method unavailable; assembling with threads")
        _init_worker(context)
        executor = ThreadPoolExecutor(max_workers=workers)
    try:
        with executor:
            results = list(executor.map(_cell_forms, chunks))
    finally:
        _init_worker(None)
    return [item for part in results for item in part]


# --- Boundary data ---

def _boundary_values(
    space: VemSpace, u_N: Optional[Callable], degree: int
) -> Tuple[np.ndarray, np.ndarray, Tuple[float, float]]:
    """Canonical boundary face dofs, plus the total and absolute outward flux."""
    faces = sorted(space.mesh.boundary_faces)
    dofs = space.boundary_dofs()
    values = np.zeros(dofs.size)
    if u_N is None:
        return dofs, values, (0.0, 0.0)
    n = space.layout.n_face
    total = 0.0
    abs_total = 0.0
    for i, f in enumerate(faces):
        s = space.mesh.boundary_sign(f)
        normal = space.geom.face_normal[f]
        points, weights = space.face_rule(f, degree)
        flux = np.asarray(u_N(points, np.broadcast_to(s * normal, points.shape)))
        moments = space.face_basis(f)(points).T @ (weights * flux)
        values[i * n:(i + 1) * n] = s * moments / space.geom.face_area[f]
        total += weights @ flux
        abs_total += weights @ np.abs(flux)
    return dofs, values, (total, abs_total)


def _check_compatibility(space: VemSpace, f: Optional[Callable], flux: Tuple[float, float], degree: int) -> None:
    source, abs_source = 0.0, 0.0
    if f is not None:
        for c in range(space.mesh.n_cells):
            points, weights = space.cell_rule(c, degree)
            values = np.asarray(f(points))
            source += weights @ values
            abs_source += weights @ np.abs(values)
    total_flux, abs_flux = flux
    scale = max(abs_source, abs_flux)
    if abs(source - total_flux) > COMPATIBILITY_TOL * scale:
        raise IncompatibleDataError(
            f"Source integral {source:.6e} does not match boundary flux {total_flux:.6e}"
        )


def assemble(
    mesh: PolyMesh,
    k: int,
    fields: CoefficientField,
    workers: int = 1,
    space: Optional[VemSpace] = None,
) -> SaddleSystem:
    """
    Assembles the bordered saddle-point system.

    Args:
        mesh: Polyhedral mesh.
        k: Order (1..4).
        fields: Coefficient, source and boundary flux.
        workers: Element-loop workers (1 = serial).
        space: Prebuilt space to reuse (must match mesh and k).

    Returns:
        The SaddleSystem with the boundary dofs eliminated.

    Raises:
        IncompatibleDataError: If the source and the boundary flux do not balance.
    """
    start = time.perf_counter()
    space = space if space is not None else VemSpace(mesh, k)
    degree = 2 * space.k + 4
    nu = fields.cell_nu(space.geom.cell_centroid)

    fixed, fixed_values, flux = _boundary_values(space, fields.u_N, degree)
    if fields.u_N is not None or fields.f is not None:
        _check_compatibility(space, fields.f, flux, degree)

    results = _element_loop(space, fields, nu, max(1, int(workers)))

    a_rows, a_cols, a_vals = [], [], []
    b_rows, b_cols, b_vals = [], [], []
    rhs_p = np.zeros(space.n_pressure)
    e = np.zeros(space.n_pressure)
    elements = []
    for ops, forms in results:
        sg = ops.signs
        a_rows.append(np.repeat(ops.dofs, ops.n_local))
        a_cols.append(np.tile(ops.dofs, ops.n_local))
        a_vals.append((forms.a * np.outer(sg, sg)).ravel())
        pdofs = space.pressure_dofs(ops.cell) - space.n_velocity
        b_rows.append(np.repeat(pdofs, ops.n_local))
        b_cols.append(np.tile(ops.dofs, pdofs.size))
        b_vals.append((forms.b * sg[None, :]).ravel())
        rhs_p[pdofs] += forms.f
        e[pdofs[0]] = ops.volume
        elements.append(ops)

    n_vel = space.n_velocity
    A = sp.coo_matrix(
        (np.concatenate(a_vals), (np.concatenate(a_rows), np.concatenate(a_cols))), shape=(n_vel, n_vel)
    ).tocsr()
    B = sp.coo_matrix(
        (np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))),
        shape=(space.n_pressure, n_vel),
    ).tocsr()

    free_mask = np.ones(n_vel, dtype=bool)
    free_mask[fixed] = False
    free = np.flatnonzero(free_mask)
    A_free = A[free][:, free]
    B_free = B[:, free]
    rhs_u = -(A[free][:, fixed] @ fixed_values)
    rhs_p = rhs_p - B[:, fixed] @ fixed_values

    elapsed = time.perf_counter() - start
    system = SaddleSystem(
        A=A_free,
        B=B_free,
        rhs_u=rhs_u,
        rhs_p=rhs_p,
        e=e,
        free_dofs=free,
        fixed_dofs=fixed,
        fixed_values=fixed_values,
        space=space,
        elements=elements,
        h=mesh_size(mesh, space.geom),
        t_assembly=elapsed,
    )
    logger.info(
        f"Assembled k={space.k} on {mesh.n_cells} cells: {system.n_total} unknowns "
        f"({fixed.size} eliminated) in {elapsed:.2f}s with {workers} worker(s)"
    )
    return system


def export_triplets(system: SaddleSystem, path: Union[str, Path]) -> None:
    """Writes the bordered matrix as 0-based ``row col value`` lines."""
    coo = system.matrix().tocoo()
    data = np.column_stack([coo.row, coo.col, coo.data])
    header = f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}"
    np.savetxt(path, data, fmt=["%d", "%d", "%.17g"], header=header)
