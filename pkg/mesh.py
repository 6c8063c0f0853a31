"""Polyhedral meshes: data model, JSON ingestion, structured cube generation,
geometric quantities and the sub-tessellation used for quadrature."""
import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

__all__ = [
    "MeshError",
    "MeshParseError",
    "PolyMesh",
    "GeometryCache",
    "SubTessellation",
    "load_mesh",
    "write_mesh",
    "gen_cube_mesh",
    "compute_geometry",
    "mesh_size",
    "sub_tessellate",
    "mesh_summary",
]

logger = logging.getLogger(__name__)

PLANARITY_TOL = 1e-6
TINY_FACE_TOL = 1e-10
CLOSEDNESS_TOL = 1e-10

Cell = Tuple[Tuple[int, int], ...]


class MeshError(ValueError):
    """Raised when a mesh violates a structural or geometric invariant."""


class MeshParseError(MeshError):
    """Raised when a mesh file cannot be read or has the wrong shape."""


# --- Face-level geometry shared by validation and compute_geometry ---

@dataclass(frozen=True)
class _FaceGeometry:
    area_vector: np.ndarray
    area: np.ndarray
    normal: np.ndarray
    centroid: np.ndarray
    diameter: np.ndarray
    deviation: np.ndarray  # max out-of-plane distance of the loop
    tri_face: np.ndarray
    tri_a: np.ndarray
    tri_b: np.ndarray


def _face_geometry(vertices: np.ndarray, face_ptr: np.ndarray, face_verts: np.ndarray) -> _FaceGeometry:
    nf = face_ptr.size - 1
    sizes = np.diff(face_ptr)
    tri_face = np.repeat(np.arange(nf), sizes)
    nxt = np.arange(face_verts.size) + 1
    nxt[face_ptr[1:] - 1] = face_ptr[:-1]
    tri_a, tri_b = face_verts, face_verts[nxt]

    mean = np.zeros((nf, 3))
    np.add.at(mean, tri_face, vertices[tri_a])
    mean /= sizes[:, None]

    a = vertices[tri_a] - mean[tri_face]
    b = vertices[tri_b] - mean[tri_face]
    doubled = np.cross(a, b)
    area_vector = np.zeros((nf, 3))
    np.add.at(area_vector, tri_face, 0.5 * doubled)
    area = np.linalg.norm(area_vector, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = area_vector / area[:, None]
    normal = np.nan_to_num(normal)

    tri_area = 0.5 * np.einsum("ij,ij->i", doubled, normal[tri_face])
    weighted = tri_area[:, None] * (mean[tri_face] + vertices[tri_a] + vertices[tri_b]) / 3.0
    centroid = np.zeros((nf, 3))
    np.add.at(centroid, tri_face, weighted)
    total = np.bincount(tri_face, weights=tri_area, minlength=nf)
    with np.errstate(invalid="ignore", divide="ignore"):
        centroid = np.where(total[:, None] != 0, centroid / total[:, None], mean)

    deviation = np.zeros(nf)
    offsets = np.abs(np.einsum("ij,ij->i", vertices[tri_a] - centroid[tri_face], normal[tri_face]))
    np.maximum.at(deviation, tri_face, offsets)

    diameter = np.zeros(nf)
    for m in np.unique(sizes):
        group = np.flatnonzero(sizes == m)
        idx = face_ptr[group][:, None] + np.arange(m)[None, :]
        pts = vertices[face_verts[idx]]  # (G, m, 3)
        diffs = pts[:, :, None, :] - pts[:, None, :, :]
        diameter[group] = np.sqrt((diffs**2).sum(-1)).reshape(group.size, -1).max(1)

    return _FaceGeometry(area_vector, area, normal, centroid, diameter, deviation, tri_face, tri_a, tri_b)


# --- Data model ---

@dataclass(frozen=True, eq=False)
class PolyMesh:
    """
    Polyhedral mesh.

    Faces are vertex loops, counter-clockwise with respect to the stored face
    normal. Cells list (face index, sign) pairs; sign = +1 when the stored
    normal points out of the cell.
    """

    vertices: np.ndarray
    faces: Tuple[Tuple[int, ...], ...]
    cells: Tuple[Cell, ...]
    boundary_faces: FrozenSet[int] = field(default_factory=frozenset)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def face_ptr(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([len(f) for f in self.faces])]).astype(np.int64)

    @cached_property
    def face_verts(self) -> np.ndarray:
        return np.fromiter((v for f in self.faces for v in f), dtype=np.int64, count=int(self.face_ptr[-1]))

    @cached_property
    def incidence(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (cell, face, sign) arrays in cell order."""
        cell = np.repeat(np.arange(self.n_cells), [len(c) for c in self.cells])
        pairs = np.array([p for c in self.cells for p in c], dtype=np.int64).reshape(-1, 2)
        return cell, pairs[:, 0], pairs[:, 1]

    @cached_property
    def face_cells(self) -> Tuple[Tuple[Tuple[int, int], ...], ...]:
        """Per face, the (cell, sign) pairs referencing it."""
        owners: List[List[Tuple[int, int]]] = [[] for _ in range(self.n_faces)]
        for c, cell in enumerate(self.cells):
            for f, s in cell:
                owners[f].append((c, s))
        return tuple(tuple(o) for o in owners)

    def boundary_sign(self, face: int) -> int:
        """Sign of the single cell owning a boundary face."""
        return self.face_cells[face][0][1]

    @classmethod
    def from_arrays(
        cls,
        vertices: Sequence[Sequence[float]],
        faces: Sequence[Sequence[int]],
        cells: Sequence[Sequence[Tuple[int, int]]],
        strict: bool = True,
    ) -> "PolyMesh":
        """
        Builds and validates a mesh.

        Args:
            vertices: (nv, 3) coordinates.
            faces: Vertex-index loops (0-based).
            cells: Per cell, (face index, sign) pairs.
            strict: Reject tiny or warped faces instead of warning.

        Raises:
            MeshError: On the first violated invariant.
        """
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 3 or not np.all(np.isfinite(verts)):
            raise MeshError("vertices must be a finite (n, 3) array")
        nv = verts.shape[0]

        loops = tuple(tuple(int(v) for v in f) for f in faces)
        for f, loop in enumerate(loops):
            if len(loop) < 3 or len(set(loop)) != len(loop):
                raise MeshError(f"face {f} needs at least 3 distinct vertices, got {list(loop)}")
            if min(loop) < 0 or max(loop) >= nv:
                raise MeshError(f"face {f} references a vertex outside 0..{nv - 1}")

        nf = len(loops)
        cell_tuple = tuple(tuple((int(f), int(s)) for f, s in cell) for cell in cells)
        if not cell_tuple:
            raise MeshError("mesh has no cells")
        counts = np.zeros(nf, dtype=np.int64)
        sign_sum = np.zeros(nf, dtype=np.int64)
        for c, cell in enumerate(cell_tuple):
            if len(cell) < 4:
                raise MeshError(f"cell {c} has only {len(cell)} faces")
            seen = set()
            for f, s in cell:
                if f < 0 or f >= nf:
                    raise MeshError(f"cell {c} references face {f} outside 0..{nf - 1}")
                if s not in (1, -1):
                    raise MeshError(f"cell {c} uses orientation sign {s} for face {f}")
                if f in seen:
                    raise MeshError(f"cell {c} references face {f} twice")
                seen.add(f)
                counts[f] += 1
                sign_sum[f] += s

        for f in range(nf):
            if counts[f] == 0:
                raise MeshError(f"face {f} is not referenced by any cell")
            if counts[f] > 2:
                raise MeshError(f"face {f} is referenced by {counts[f]} cells")
            if counts[f] == 2 and sign_sum[f] != 0:
                raise MeshError(f"face {f} is shared by two cells with the same orientation")

        mesh = cls(
            vertices=verts,
            faces=loops,
            cells=cell_tuple,
            boundary_faces=frozenset(int(f) for f in np.flatnonzero(counts == 1)),
        )
        mesh._check_geometry(strict)
        return mesh

    def _check_geometry(self, strict: bool) -> None:
        fg = _face_geometry(self.vertices, self.face_ptr, self.face_verts)
        for f in np.flatnonzero(fg.area <= 0.0):
            raise MeshError(f"face {f} has zero area")

        tiny = np.flatnonzero(fg.area < TINY_FACE_TOL * fg.diameter**2)
        warped = np.flatnonzero(fg.deviation > PLANARITY_TOL * fg.diameter)
        for label, bad in (("degenerate (tiny area)", tiny), ("non-planar", warped)):
            if bad.size == 0:
                continue
            if strict:
                raise MeshError(f"face {bad[0]} is {label}")
            logger.warning(f"Accepting {bad.size} {label} faces (first: {bad[0]})")

        cell, face, sign = self.incidence
        closure = np.zeros((self.n_cells, 3))
        np.add.at(closure, cell, sign[:, None] * fg.area_vector[face])
        scale = np.zeros(self.n_cells)
        np.maximum.at(scale, cell, fg.diameter[face])
        open_cells = np.flatnonzero(np.linalg.norm(closure, axis=1) > CLOSEDNESS_TOL * scale**2)
        if open_cells.size:
            raise MeshError(f"cell {open_cells[0]} is not closed (signed face areas do not cancel)")

    def transformed(self, rotation: np.ndarray, shift: Sequence[float]) -> "PolyMesh":
        """Applies the rigid motion x -> R x + shift to the vertices."""
        moved = self.vertices @ np.asarray(rotation, dtype=float).T + np.asarray(shift, dtype=float)
        return replace(self, vertices=moved)


@dataclass(frozen=True)
class GeometryCache:
    """Per-cell and per-face geometric quantities."""

    cell_centroid: np.ndarray
    cell_diameter: np.ndarray
    cell_volume: np.ndarray
    face_centroid: np.ndarray
    face_diameter: np.ndarray
    face_area: np.ndarray
    face_normal: np.ndarray
    face_frame: np.ndarray  # (nf, 2, 3) orthonormal in-plane axes


@dataclass(frozen=True)
class SubTessellation:
    """
    Simplices supporting quadrature. ``points`` stacks mesh vertices, face
    centroids and cell centroids; ``tets``/``tris`` index into it and are
    grouped per cell/face by the CSR pointers.
    """

    points: np.ndarray
    tets: np.ndarray
    cell_tet_ptr: np.ndarray
    tris: np.ndarray
    face_tri_ptr: np.ndarray

    def tet_volumes(self) -> np.ndarray:
        p = self.points[self.tets]
        return np.linalg.det(np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=1)) / 6.0

    def triangle_areas(self, normals: np.ndarray) -> np.ndarray:
        """Signed areas with respect to each triangle's face normal."""
        p = self.points[self.tris]
        face = np.repeat(np.arange(self.face_tri_ptr.size - 1), np.diff(self.face_tri_ptr))
        return 0.5 * np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), normals[face])


# --- Ingestion and emission ---

def load_mesh(path: Union[str, Path], strict: bool = True) -> PolyMesh:
    """
    Reads a mesh in the native JSON format.

    The document holds ``vertices`` ([x, y, z] rows), ``faces`` (0-based vertex
    loops) and ``cells`` (signed 1-based face indices, the sign being the
    orientation of the face normal relative to the cell's outward normal).

    Args:
        path: Path to the JSON file.
        strict: Reject tiny or warped faces instead of warning.

    Returns:
        The validated PolyMesh.
    """
    path = Path(path)
    try:
        with open(path, "r") as f:
            data = json.load(f)
        vertices = data["vertices"]
        faces = data["faces"]
        cells = [[(abs(int(s)) - 1, 1 if int(s) > 0 else -1) for s in cell] for cell in data["cells"]]
    except FileNotFoundError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise MeshParseError(f"Cannot parse mesh file {path}: {e}") from e
    if any(int(s) == 0 for cell in data["cells"] for s in cell):
        raise MeshParseError(f"Mesh file {path} uses face index 0 (indices are 1-based)")

    mesh = PolyMesh.from_arrays(vertices, faces, cells, strict=strict)
    logger.info(f"Loaded mesh {path.name}: {mesh.n_cells} cells, {mesh.n_faces} faces, {mesh.n_vertices} vertices")
    return mesh


def write_mesh(mesh: PolyMesh, path: Union[str, Path]) -> None:
    """Writes ``mesh`` in the native JSON format."""
    data = {
        "vertices": mesh.vertices.tolist(),
        "faces": [list(f) for f in mesh.faces],
        "cells": [[(f + 1) * s for f, s in cell] for cell in mesh.cells],
    }
    with open(path, "w") as f:
        json.dump(data, f)


# --- Structured generation ---

def gen_cube_mesh(
    n: int,
    domain: Tuple[Sequence[float], Sequence[float]] = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),
) -> PolyMesh:
    """
    Generates n^3 congruent hexahedra on an axis-aligned box.

    Face normals are stored along +x, +y or +z; each cell lists its faces as
    -x, +x, -y, +y, -z, +z.
    """
    if int(n) < 1:
        raise MeshError(f"gen_cube_mesh needs n >= 1, got {n}")
    n = int(n)
    lo = np.asarray(domain[0], dtype=float)
    hi = np.asarray(domain[1], dtype=float)
    if np.any(hi <= lo):
        raise MeshError(f"Empty box {domain}")

    axis = [np.linspace(lo[d], hi[d], n + 1) for d in range(3)]
    Z, Y, X = np.meshgrid(axis[2], axis[1], axis[0], indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    m = n + 1

    def vid(i, j, k):
        return i + m * (j + m * k)

    nx = n * n * m
    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(m), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    fx = np.stack([vid(i, j, k), vid(i, j + 1, k), vid(i, j + 1, k + 1), vid(i, j, k + 1)], axis=1)
    k, j, i = np.meshgrid(np.arange(n), np.arange(m), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    fy = np.stack([vid(i, j, k), vid(i, j, k + 1), vid(i + 1, j, k + 1), vid(i + 1, j, k)], axis=1)
    k, j, i = np.meshgrid(np.arange(m), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    fz = np.stack([vid(i, j, k), vid(i + 1, j, k), vid(i + 1, j + 1, k), vid(i, j + 1, k)], axis=1)
    faces = np.concatenate([fx, fy, fz]).tolist()

    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    x_face = i + m * (j + n * k)
    y_face = nx + i + n * (j + m * k)
    z_face = 2 * nx + i + n * (j + n * k)
    cell_faces = np.stack(
        [x_face, x_face + 1, y_face, y_face + n, z_face, z_face + n * n], axis=1
    ).tolist()
    signs = (-1, 1, -1, 1, -1, 1)
    cells = [tuple(zip(row, signs)) for row in cell_faces]

    mesh = PolyMesh.from_arrays(vertices, faces, cells)
    logger.debug(f"Generated cube mesh n={n}: {mesh.n_cells} cells, {mesh.n_faces} faces")
    return mesh


# --- Geometry ---

def compute_geometry(mesh: PolyMesh) -> GeometryCache:
    """
    Computes centroids, diameters, volumes, face normals and frames.

    Cell volumes and centroids come from a signed-tet decomposition of the
    boundary (divergence theorem), so non-convex cells are handled exactly.
    """
    verts = mesh.vertices
    fg = _face_geometry(verts, mesh.face_ptr, mesh.face_verts)
    if np.any(fg.area <= 0.0):
        raise MeshError(f"face {int(np.argmin(fg.area))} has zero area")

    edge = verts[mesh.face_verts[mesh.face_ptr[:-1] + 1]] - verts[mesh.face_verts[mesh.face_ptr[:-1]]]
    edge -= np.einsum("ij,ij->i", edge, fg.normal)[:, None] * fg.normal
    e1 = edge / np.linalg.norm(edge, axis=1)[:, None]
    e2 = np.cross(fg.normal, e1)
    frame = np.stack([e1, e2], axis=1)

    cell, face, sign = mesh.incidence
    nc = mesh.n_cells
    origin = np.zeros((nc, 3))
    np.add.at(origin, cell, fg.centroid[face])
    origin /= np.bincount(cell, minlength=nc)[:, None]

    tri_ptr = np.concatenate([[0], np.cumsum(np.bincount(fg.tri_face, minlength=mesh.n_faces))])
    counts = tri_ptr[face + 1] - tri_ptr[face]
    starts = np.repeat(tri_ptr[face], counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tri = starts + local
    t_cell = np.repeat(cell, counts)
    t_face = np.repeat(face, counts)
    t_sign = np.repeat(sign, counts)

    o = origin[t_cell]
    xf = fg.centroid[t_face]
    a = verts[fg.tri_a[tri]]
    b = verts[fg.tri_b[tri]]
    vol = t_sign * np.einsum("ij,ij->i", xf - o, np.cross(a - o, b - o)) / 6.0
    volume = np.bincount(t_cell, weights=vol, minlength=nc)
    moment = np.zeros((nc, 3))
    np.add.at(moment, t_cell, vol[:, None] * (o + xf + a + b) / 4.0)
    if np.any(volume <= 0.0):
        bad = int(np.argmin(volume))
        raise MeshError(f"cell {bad} has non-positive volume {volume[bad]:.3e}")
    centroid = moment / volume[:, None]

    diameter = np.empty(nc)
    for c, faces in enumerate(mesh.cells):
        ids = sorted({v for f, _ in faces for v in mesh.faces[f]})
        diameter[c] = pdist(verts[ids]).max()

    return GeometryCache(
        cell_centroid=centroid,
        cell_diameter=diameter,
        cell_volume=volume,
        face_centroid=fg.centroid,
        face_diameter=fg.diameter,
        face_area=fg.area,
        face_normal=fg.normal,
        face_frame=frame,
    )


def mesh_size(mesh: PolyMesh, geom: GeometryCache) -> float:
    """Mean cell diameter."""
    if mesh.n_cells < 1:
        raise MeshError("mesh_size needs at least one cell")
    return float(np.mean(geom.cell_diameter))


def sub_tessellate(mesh: PolyMesh, geom: GeometryCache) -> SubTessellation:
    """
    Fans every face from its centroid and cones the fans to the cell centroid.

    Tets are ordered so that each has positive volume on convex cells.
    """
    nv, nf = mesh.n_vertices, mesh.n_faces
    points = np.concatenate([mesh.vertices, geom.face_centroid, geom.cell_centroid])

    sizes = np.diff(mesh.face_ptr)
    tri_face = np.repeat(np.arange(nf), sizes)
    nxt = np.arange(mesh.face_verts.size) + 1
    nxt[mesh.face_ptr[1:] - 1] = mesh.face_ptr[:-1]
    tris = np.column_stack([nv + tri_face, mesh.face_verts, mesh.face_verts[nxt]])

    cell, face, sign = mesh.incidence
    counts = sizes[face]
    starts = np.repeat(mesh.face_ptr[face], counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    t = tris[starts + local]
    t_sign = np.repeat(sign, counts)
    apex = nv + nf + np.repeat(cell, counts)
    first = np.where(t_sign > 0, t[:, 2], t[:, 1])
    second = np.where(t_sign > 0, t[:, 1], t[:, 2])
    tets = np.column_stack([t[:, 0], first, second, apex])
    cell_tet_ptr = np.concatenate([[0], np.cumsum(np.bincount(np.repeat(cell, counts), minlength=mesh.n_cells))])

    return SubTessellation(
        points=points,
        tets=tets,
        cell_tet_ptr=cell_tet_ptr,
        tris=tris,
        face_tri_ptr=mesh.face_ptr.copy(),
    )


def mesh_summary(mesh: PolyMesh, geom: GeometryCache) -> Dict[str, float]:
    """Counts and extreme geometric quantities of a mesh."""
    return {
        "n_cells": mesh.n_cells,
        "n_faces": mesh.n_faces,
        "n_vertices": mesh.n_vertices,
        "n_boundary_faces": len(mesh.boundary_faces),
        "h": mesh_size(mesh, geom),
        "min_face_area": float(geom.face_area.min()),
        "min_cell_volume": float(geom.cell_volume.min()),
        "max_cell_diameter": float(geom.cell_diameter.max()),
        "volume": float(geom.cell_volume.sum()),
    }
