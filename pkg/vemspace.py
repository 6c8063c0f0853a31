"""Local mixed virtual element spaces: dof layout, face-normal polynomials,
divergence, the L^2 projection onto [P_k]^3 and the pressure space.

Velocity dofs of a cell (local order):
    * per face (cell order), the moments ``(1/|f|) int_f v.n m^f_i`` of the
      normal component against M_k(f), taken with the outward normal;
    * gradient moments ``(h/|P|) int_P v.grad m_beta`` for beta in M_{k-1} \\ M_0;
    * cross moments ``(1/|P|) int_P v.(m_I x g)`` for the generators g.
Globally a face dof is stored once against the face's own normal; a cell
reads it with its orientation sign.
"""
import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from mesh import GeometryCache, PolyMesh, SubTessellation, compute_geometry, sub_tessellate
from poly import (
    MonomialBasis2,
    MonomialBasis3,
    decompose_vector_monomial,
    dim_Gperp,
    dim_Pk,
    gperp_generators,
    mI_cross,
    monomial_exponents,
    monomial_index,
    rewrite_first_component,
    spd_solve,
)
from quadrature import cell_rule, face_rule

__all__ = [
    "MIN_ORDER",
    "MAX_ORDER",
    "UnsupportedOrderError",
    "DofLayout",
    "ElementOperators",
    "VemSpace",
    "dof_counts",
]

logger = logging.getLogger(__name__)

MIN_ORDER = 1
MAX_ORDER = 4

VectorField = Callable[[np.ndarray], np.ndarray]
ScalarField = Callable[[np.ndarray], np.ndarray]


class UnsupportedOrderError(ValueError):
    """Raised for an order outside MIN_ORDER..MAX_ORDER."""


@dataclass(frozen=True)
class DofLayout:
    """Dof counts per face, per cell and for the pressure of order ``k``."""

    k: int
    n_face: int
    n_grad: int
    n_cross: int
    n_q: int

    @classmethod
    def for_order(cls, k: int) -> "DofLayout":
        if not MIN_ORDER <= int(k) <= MAX_ORDER:
            raise UnsupportedOrderError(f"Order k={k} is not supported (use {MIN_ORDER}..{MAX_ORDER})")
        k = int(k)
        return cls(
            k=k,
            n_face=dim_Pk(k, 2),
            n_grad=dim_Pk(k - 1) - 1,
            n_cross=dim_Gperp(k),
            n_q=dim_Pk(k - 1),
        )

    @property
    def n_internal(self) -> int:
        return self.n_grad + self.n_cross

    def n_local(self, n_faces: int) -> int:
        return n_faces * self.n_face + self.n_internal


def dof_counts(k: int, mesh: PolyMesh) -> Tuple[int, int, int]:
    """
    Global dof counts.

    Returns:
        (velocity dofs, pressure dofs, total including the mean multiplier).
    """
    layout = DofLayout.for_order(k)
    n_vel = mesh.n_faces * layout.n_face + mesh.n_cells * layout.n_internal
    n_pres = mesh.n_cells * layout.n_q
    return n_vel, n_pres, n_vel + n_pres + 1


# --- Order-dependent recipes (geometry free, cached) ---

@lru_cache(maxsize=None)
def _projection_recipe(k: int):
    """
    For every test vector monomial m_alpha e_c of [M_k]^3 (component-major),
    the terms of ``int_P v . m_alpha e_c`` in dof language:

        ("grad", j, w): w * |P| * gradient dof j
        ("ibp", b, w):  w * h * (integration by parts row of monomial b)
        ("cross", j, w): w * |P| * cross dof j
    """
    generators = {g: j for j, g in enumerate(gperp_generators(k))}
    recipe = []
    for c in range(3):
        for alpha in monomial_exponents(k):
            terms = []
            dec = decompose_vector_monomial(c, tuple(int(a) for a in alpha), 1.0)
            for coef, beta in dec.gradient:
                b = monomial_index(beta)
                if sum(beta) <= k - 1:
                    terms.append(("grad", b - 1, coef))
                else:
                    terms.append(("ibp", b, coef))
            for coef, vm in dec.cross:
                if vm.component == 0 and vm.alpha[0] > 0:
                    parts = rewrite_first_component(vm.alpha)
                else:
                    parts = [(1.0, vm)]
                for sign, g in parts:
                    terms.append(("cross", generators[g], coef * sign))
            recipe.append(tuple(terms))
    return tuple(recipe)


@lru_cache(maxsize=None)
def _internal_dof_table(k: int) -> np.ndarray:
    """
    Matrix E (n_internal, 3 * dim_Pk(k)) with internal dof = E @ W / |P|, W the
    component-major moments ``int_P v_c m_alpha`` over M_k.
    """
    n_k = dim_Pk(k)
    grad = monomial_exponents(k - 1)[1:]
    gens = gperp_generators(k)
    table = np.zeros((len(grad) + len(gens), 3 * n_k))
    for j, beta in enumerate(grad):
        for c in range(3):
            if beta[c] > 0:
                lower = list(beta)
                lower[c] -= 1
                table[j, c * n_k + monomial_index(lower)] += beta[c]
    for j, g in enumerate(gens):
        for coef, vm in mI_cross(g):
            table[len(grad) + j, vm.component * n_k + monomial_index(vm.alpha)] += coef
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class ElementOperators:
    """
    Dense operators of one cell, all acting on local (outward oriented) dofs.

    Attributes:
        dofs: Global velocity dof index of each local dof.
        signs: Orientation sign linking local and global dofs.
        face_poly: Per local face, the map from its dof slice to the
            coefficients of v.n (outward) over M_k(f).
        div: Dofs -> coefficients of div v over M_{k-1}(P).
        proj: Dofs -> coefficients of the L^2 projection over [M_k(P)]^3,
            component-major.
        dof_of_poly: Coefficients over [M_k(P)]^3 -> dofs.
        mass: Monomial mass matrix over M_k(P).
        pressure_map: Pressure dofs -> pressure coefficients over M_{k-1}(P).
    """

    cell: int
    k: int
    volume: float
    centroid: np.ndarray
    diameter: float
    dofs: np.ndarray
    signs: np.ndarray
    face_slices: Tuple[slice, ...]
    face_poly: Tuple[np.ndarray, ...]
    div: np.ndarray
    proj: np.ndarray
    dof_of_poly: Optional[np.ndarray]
    mass: np.ndarray
    pressure_map: np.ndarray

    @property
    def n_local(self) -> int:
        return self.dofs.size

    def face_normal_poly(self, local_face: int, dof_slice: np.ndarray) -> np.ndarray:
        """Coefficients of v.n over M_k(f) from the face's dof slice."""
        return self.face_poly[local_face] @ np.asarray(dof_slice)

    def dof_projection(self) -> np.ndarray:
        """Dofs of the projected polynomial, as a matrix on dofs."""
        return self.dof_of_poly @ self.proj

    def project(self, local_dofs: np.ndarray) -> np.ndarray:
        """Projection coefficients reshaped to (3, dim_Pk(k))."""
        return (self.proj @ local_dofs).reshape(3, -1)

    def slim(self) -> "ElementOperators":
        """Copy without the matrices only needed while building local forms."""
        return replace(self, dof_of_poly=None, face_poly=())


class VemSpace:
    """
    Velocity/pressure spaces of order ``k`` on a mesh, with the global dof map.

    Global numbering: face dofs (face-major), then the internal velocity dofs
    of every cell, then the pressure moments of every cell, then the single
    mean-value multiplier.
    """

    def __init__(
        self,
        mesh: PolyMesh,
        k: int,
        geom: Optional[GeometryCache] = None,
        tess: Optional[SubTessellation] = None,
    ) -> None:
        self.layout = DofLayout.for_order(k)
        self.k = self.layout.k
        self.mesh = mesh
        self.geom = geom if geom is not None else compute_geometry(mesh)
        self.tess = tess if tess is not None else sub_tessellate(mesh, self.geom)
        self.generators = gperp_generators(self.k)
        self.n_velocity, self.n_pressure, self.n_total = dof_counts(self.k, mesh)
        self.multiplier = self.n_total - 1

    # --- Dof map ---

    def face_dofs(self, face: int) -> np.ndarray:
        n = self.layout.n_face
        return np.arange(face * n, (face + 1) * n)

    def internal_dofs(self, cell: int) -> np.ndarray:
        n = self.layout.n_internal
        start = self.mesh.n_faces * self.layout.n_face + cell * n
        return np.arange(start, start + n)

    def pressure_dofs(self, cell: int) -> np.ndarray:
        n = self.layout.n_q
        start = self.n_velocity + cell * n
        return np.arange(start, start + n)

    def cell_dofs(self, cell: int) -> Tuple[np.ndarray, np.ndarray]:
        """Global indices and orientation signs of a cell's velocity dofs."""
        n = self.layout.n_face
        idx, sgn = [], []
        for f, s in self.mesh.cells[cell]:
            idx.append(self.face_dofs(f))
            sgn.append(np.full(n, s, dtype=float))
        idx.append(self.internal_dofs(cell))
        sgn.append(np.ones(self.layout.n_internal))
        return np.concatenate(idx), np.concatenate(sgn)

    def boundary_dofs(self) -> np.ndarray:
        faces = sorted(self.mesh.boundary_faces)
        if not faces:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.face_dofs(f) for f in faces])

    # --- Bases and rules ---

    def cell_basis(self, cell: int, degree: Optional[int] = None) -> MonomialBasis3:
        return MonomialBasis3(
            self.k if degree is None else degree,
            self.geom.cell_centroid[cell],
            self.geom.cell_diameter[cell],
        )

    def face_basis(self, face: int) -> MonomialBasis2:
        return MonomialBasis2(
            self.k,
            self.geom.face_centroid[face],
            self.geom.face_frame[face],
            self.geom.face_diameter[face],
        )

    def cell_rule(self, cell: int, degree: int):
        return cell_rule(self.tess, cell, degree)

    def face_rule(self, face: int, degree: int):
        return face_rule(self.tess, face, self.geom.face_normal[face], degree)

    # --- Element operators ---

    def element(self, cell: int) -> ElementOperators:
        """Builds the dense operators of ``cell``."""
        k, lay, geom = self.k, self.layout, self.geom
        n_k, n_km1 = dim_Pk(k), dim_Pk(k - 1)
        vol = float(geom.cell_volume[cell])
        h = float(geom.cell_diameter[cell])
        basis = self.cell_basis(cell, k + 1)
        label = f"cell {cell}"

        points, weights = self.cell_rule(cell, 2 * k + 2)
        values = basis(points)
        full_mass = values.T @ (weights[:, None] * values)
        mass = full_mass[:n_k, :n_k]
        mass_km1 = full_mass[:n_km1, :n_km1]

        faces = self.mesh.cells[cell]
        n_loc = lay.n_local(len(faces))
        grad_off = len(faces) * lay.n_face
        cross_off = grad_off + lay.n_grad
        dofs, signs = self.cell_dofs(cell)

        face_slices: List[slice] = []
        face_poly: List[np.ndarray] = []
        boundary_rows = np.zeros((full_mass.shape[0], n_loc))  # int_f v.n m_beta, summed over faces
        dof_of_poly = np.zeros((n_loc, 3 * n_k))
        for i, (f, s) in enumerate(faces):
            sl = slice(i * lay.n_face, (i + 1) * lay.n_face)
            face_slices.append(sl)
            area = float(geom.face_area[f])
            normal_out = s * geom.face_normal[f]
            fbasis = self.face_basis(f)
            fpoints, fweights = self.face_rule(f, 2 * k + 2)
            fvalues = fbasis(fpoints)
            face_mass = fvalues.T @ (fweights[:, None] * fvalues)
            cross_mass = basis(fpoints).T @ (fweights[:, None] * fvalues)  # (n_{k+1}, n_face)
            poly = area * spd_solve(face_mass, np.eye(lay.n_face), label=f"face {f}")
            face_poly.append(poly)
            boundary_rows[:, sl] = cross_mass @ poly
            for c in range(3):
                dof_of_poly[sl, c * n_k:(c + 1) * n_k] = normal_out[c] / area * cross_mass[:n_k].T

        # div v: int_P div v m_a = -int_P v.grad m_a + sum_f int_f v.n m_a
        div_rhs = boundary_rows[:n_km1].copy()
        div_rhs[1:, grad_off:cross_off] -= (vol / h) * np.eye(lay.n_grad)
        div = spd_solve(mass_km1, div_rhs, label=label)

        ibp = boundary_rows - full_mass[:, :n_km1] @ div
        rhs = np.zeros((3 * n_k, n_loc))
        for row, terms in enumerate(_projection_recipe(k)):
            for kind, j, w in terms:
                if kind == "grad":
                    rhs[row, grad_off + j] += w * vol
                elif kind == "ibp":
                    rhs[row] += w * h * ibp[j]
                else:
                    rhs[row, cross_off + j] += w * vol
        proj = np.vstack([spd_solve(mass, rhs[c * n_k:(c + 1) * n_k], label=label) for c in range(3)])

        block_mass = np.kron(np.eye(3), mass)
        dof_of_poly[grad_off:] = _internal_dof_table(k) @ block_mass / vol

        pressure_map = vol * spd_solve(mass_km1, np.eye(n_km1), label=label)

        return ElementOperators(
            cell=cell,
            k=k,
            volume=vol,
            centroid=geom.cell_centroid[cell],
            diameter=h,
            dofs=dofs,
            signs=signs,
            face_slices=tuple(face_slices),
            face_poly=tuple(face_poly),
            div=div,
            proj=proj,
            dof_of_poly=dof_of_poly,
            mass=mass,
            pressure_map=pressure_map,
        )

    def divergence_matrix(self, cell: int) -> np.ndarray:
        return self.element(cell).div

    def projection_matrix(self, cell: int) -> np.ndarray:
        return self.element(cell).proj

    def dof_of_polynomial(self, cell: int) -> np.ndarray:
        return self.element(cell).dof_of_poly

    # --- Interpolation ---

    def _face_moments(self, face: int, field: VectorField, normal: np.ndarray, degree: int) -> np.ndarray:
        points, weights = self.face_rule(face, degree)
        flux = np.asarray(field(points)) @ normal
        return self.face_basis(face)(points).T @ (weights * flux) / self.geom.face_area[face]

    def _internal_moments(self, cell: int, field: VectorField, degree: int) -> np.ndarray:
        points, weights = self.cell_rule(cell, degree)
        values = np.asarray(field(points))  # (n, 3)
        moments = self.cell_basis(cell)(points).T @ (weights[:, None] * values)  # (n_k, 3)
        return _internal_dof_table(self.k) @ moments.T.ravel() / self.geom.cell_volume[cell]

    def interpolate_velocity(self, cell: int, field: VectorField, degree: Optional[int] = None) -> np.ndarray:
        """
        Local (outward oriented) dofs of an analytic field.

        Args:
            cell: Cell index.
            field: Callable mapping (n, 3) points to (n, 3) values.
            degree: Quadrature exactness; defaults to 2k + 4.
        """
        degree = 2 * self.k + 4 if degree is None else degree
        parts = [
            self._face_moments(f, field, s * self.geom.face_normal[f], degree)
            for f, s in self.mesh.cells[cell]
        ]
        parts.append(self._internal_moments(cell, field, degree))
        return np.concatenate(parts)

    def interpolate_pressure(self, cell: int, q: ScalarField, degree: Optional[int] = None) -> np.ndarray:
        """Scaled moments ``(1/|P|) int_P q m_alpha`` over M_{k-1}(P)."""
        degree = 2 * self.k + 4 if degree is None else degree
        points, weights = self.cell_rule(cell, degree)
        values = np.asarray(q(points))
        return self.cell_basis(cell, self.k - 1)(points).T @ (weights * values) / self.geom.cell_volume[cell]

    def interpolate_global(
        self,
        field: VectorField,
        pressure: Optional[ScalarField] = None,
        degree: Optional[int] = None,
    ) -> np.ndarray:
        """Global dof vector (velocity, pressure, zero multiplier) of exact data."""
        degree = 2 * self.k + 4 if degree is None else degree
        out = np.zeros(self.n_total)
        for f in range(self.mesh.n_faces):
            out[self.face_dofs(f)] = self._face_moments(f, field, self.geom.face_normal[f], degree)
        for c in range(self.mesh.n_cells):
            out[self.internal_dofs(c)] = self._internal_moments(c, field, degree)
            if pressure is not None:
                out[self.pressure_dofs(c)] = self.interpolate_pressure(c, pressure, degree)
        return out

    def pressure_coefficients(self, cell: int, dofs: np.ndarray) -> np.ndarray:
        """Coefficients over M_{k-1}(P) of the pressure with these moments."""
        points, weights = self.cell_rule(cell, 2 * self.k)
        values = self.cell_basis(cell, self.k - 1)(points)
        mass = values.T @ (weights[:, None] * values)
        return self.geom.cell_volume[cell] * spd_solve(mass, np.asarray(dofs, dtype=float), label=f"cell {cell}")

    def pressure_eval(self, cell: int, dofs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluates the pressure polynomial of ``cell`` at ``points``."""
        return self.cell_basis(cell, self.k - 1)(points) @ self.pressure_coefficients(cell, dofs)
