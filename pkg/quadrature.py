"""Gauss rules on simplices and integration over the cell/face sub-tessellation.

Rules are collapsed (Duffy) tensor products of Gauss-Jacobi points, so any
exactness degree can be produced on demand; a rule with ``(d + 2) // 2``
points per axis is exact for polynomials of total degree ``d``.
"""
import logging
from functools import lru_cache
from typing import TYPE_CHECKING, Callable, Tuple

import numpy as np
from scipy.special import roots_jacobi

if TYPE_CHECKING:
    from mesh import SubTessellation

__all__ = [
    "MAX_DEGREE",
    "QuadratureError",
    "triangle_rule",
    "tet_rule",
    "cell_rule",
    "face_rule",
    "integrate_cell",
    "integrate_face",
]

logger = logging.getLogger(__name__)

MAX_DEGREE = 20


class QuadratureError(ValueError):
    """Raised when a rule of the requested exactness is not available."""


def _check_degree(degree: int) -> int:
    degree = int(degree)
    if degree < 0 or degree > MAX_DEGREE:
        raise QuadratureError(
            f"No simplex rule exact to degree {degree} (supported 0..{MAX_DEGREE})"
        )
    return degree


def _jacobi_01(npts: int, a: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Jacobi nodes/weights on [0, 1] for the weight (1 - t)**a."""
    x, w = roots_jacobi(npts, a, 0)
    return (x + 1.0) / 2.0, w / 2.0 ** (a + 1)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Collapsed Gauss rule on the reference triangle (0,0), (1,0), (0,1).

    Args:
        degree: Total polynomial degree the rule must integrate exactly.

    Returns:
        (points, weights) with points of shape (n, 2); weights sum to 1/2.
    """
    npts = (_check_degree(degree) + 2) // 2
    t1, w1 = _jacobi_01(npts, 1)
    t2, w2 = _jacobi_01(npts, 0)
    T1, T2 = np.meshgrid(t1, t2, indexing="ij")
    W = np.outer(w1, w2)
    y = T1
    x = (1.0 - T1) * T2
    points = np.column_stack([x.ravel(), y.ravel()])
    points.setflags(write=False)
    weights = W.ravel()
    weights.setflags(write=False)
    return points, weights


@lru_cache(maxsize=None)
def tet_rule(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Collapsed Gauss rule on the reference tetrahedron spanned by the origin
    and the three unit vectors.

    Args:
        degree: Total polynomial degree the rule must integrate exactly.

    Returns:
        (points, weights) with points of shape (n, 3); weights sum to 1/6.
    """
    npts = (_check_degree(degree) + 2) // 2
    t1, w1 = _jacobi_01(npts, 2)
    t2, w2 = _jacobi_01(npts, 1)
    t3, w3 = _jacobi_01(npts, 0)
    T1, T2, T3 = np.meshgrid(t1, t2, t3, indexing="ij")
    W = w1[:, None, None] * w2[None, :, None] * w3[None, None, :]
    z = T1
    y = (1.0 - T1) * T2
    x = (1.0 - T1) * (1.0 - T2) * T3
    points = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    points.setflags(write=False)
    weights = W.ravel()
    weights.setflags(write=False)
    return points, weights


def _map_tets(corners: np.ndarray, degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Maps the reference rule onto tets given as (T, 4, 3) corner arrays.

    Weights carry the signed Jacobian, so a closed signed decomposition
    integrates exactly even when some tets are inverted.
    """
    ref, w = tet_rule(degree)
    origin = corners[:, 0, :]
    J = np.stack(
        [corners[:, 1] - origin, corners[:, 2] - origin, corners[:, 3] - origin],
        axis=2,
    )  # (T, 3, 3), columns are edge vectors
    det = np.linalg.det(J)
    points = origin[:, None, :] + np.einsum("tij,qj->tqi", J, ref)
    weights = det[:, None] * w[None, :]
    return points.reshape(-1, 3), weights.ravel()


def _map_triangles(corners: np.ndarray, normal: np.ndarray, degree: int):
    """Maps the reference rule onto 3D triangles (T, 3, 3) lying in a face
    with unit normal ``normal``; areas are signed with respect to it."""
    ref, w = triangle_rule(degree)
    origin = corners[:, 0, :]
    e1 = corners[:, 1] - origin
    e2 = corners[:, 2] - origin
    jac = np.cross(e1, e2) @ normal  # twice the signed area
    points = (
        origin[:, None, :]
        + ref[None, :, 0, None] * e1[:, None, :]
        + ref[None, :, 1, None] * e2[:, None, :]
    )
    weights = jac[:, None] * w[None, :]
    return points.reshape(-1, 3), weights.ravel()


def cell_rule(tess: "SubTessellation", cell: int, degree: int):
    """Returns (points, weights) integrating degree-``degree`` polynomials
    exactly over ``cell``."""
    start, stop = tess.cell_tet_ptr[cell], tess.cell_tet_ptr[cell + 1]
    corners = tess.points[tess.tets[start:stop]]
    return _map_tets(corners, degree)


def face_rule(tess: "SubTessellation", face: int, normal: np.ndarray, degree: int):
    """Returns (points, weights) integrating degree-``degree`` polynomials
    exactly over ``face`` (triangles signed with respect to ``normal``)."""
    start, stop = tess.face_tri_ptr[face], tess.face_tri_ptr[face + 1]
    corners = tess.points[tess.tris[start:stop]]
    return _map_triangles(corners, normal, degree)


def integrate_cell(
    tess: "SubTessellation",
    cell: int,
    degree: int,
    integrand: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """
    Integrates ``integrand`` over a cell with a rule exact to ``degree``.

    Args:
        tess: Sub-tessellation of the mesh.
        cell: Cell index.
        degree: Exactness degree of the rule.
        integrand: Callable mapping (n, 3) points to (n,) or (n, m) values.

    Returns:
        The integral, a scalar or an (m,) array.
    """
    points, weights = cell_rule(tess, cell, degree)
    return weights @ np.asarray(integrand(points))


def integrate_face(
    tess: "SubTessellation",
    face: int,
    normal: np.ndarray,
    degree: int,
    integrand: Callable[[np.ndarray], np.ndarray],
) -> np.ndarray:
    """Face analogue of :func:`integrate_cell`."""
    points, weights = face_rule(tess, face, normal, degree)
    return weights @ np.asarray(integrand(points))
