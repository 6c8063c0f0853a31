"""Writes clipped Voronoi meshes of the unit cube in the JSON mesh format.

Seeds are mirrored across the six cube faces so every unmirrored Voronoi cell
is clipped exactly by the cube. With --lloyd the seeds are first moved to their
cell centroids a number of times, which evens out cell sizes and removes most
sliver faces. The committed meshes under tests/data/voronoi are of this
centroidal kind.

Run from the project root: python scripts/make_voronoi_fixtures.py --out tests/data/voronoi
"""
import argparse
import json
import os

import numpy as np
from scipy.spatial import Voronoi, cKDTree

MERGE_TOL = 1e-12
MIN_RIDGE_AREA = 1e-14


def jittered_lattice_seeds(n: int, jitter: float = 0.5, seed: int = 0) -> np.ndarray:
    """n^3 seeds, one per lattice cell, displaced by up to jitter/2 of the spacing."""
    rng = np.random.default_rng(seed)
    ticks = (np.arange(n) + 0.5) / n
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid + rng.uniform(-0.5, 0.5, grid.shape) * jitter / n


def _mirrored(seeds: np.ndarray) -> np.ndarray:
    copies = [seeds]
    for axis in range(3):
        for plane in (0.0, 1.0):
            image = seeds.copy()
            image[:, axis] = 2.0 * plane - image[:, axis]
            copies.append(image)
    return np.vstack(copies)


def _ordered_loop(points: np.ndarray, loop: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Sorts a convex polygon by angle so its normal follows ``direction``."""
    centre = points[loop].mean(axis=0)
    normal = direction / np.linalg.norm(direction)
    e1 = points[loop[0]] - centre
    e1 -= (e1 @ normal) * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    rel = points[loop] - centre
    return loop[np.argsort(np.arctan2(rel @ e2, rel @ e1))]


def _area(points: np.ndarray, loop: np.ndarray) -> float:
    p = points[loop]
    return 0.5 * np.linalg.norm(np.cross(p, np.roll(p, -1, axis=0)).sum(axis=0))


def voronoi_mesh(seeds: np.ndarray) -> dict:
    """Clipped Voronoi tessellation of the unit cube as a native JSON document."""
    n = seeds.shape[0]
    vor = Voronoi(_mirrored(seeds))
    points = vor.vertices.copy()
    points[np.abs(points) < 1e-12] = 0.0
    points[np.abs(points - 1.0) < 1e-12] = 1.0

    faces = []
    cells = [[] for _ in range(n)]
    for (a, b), ridge in zip(vor.ridge_points, vor.ridge_vertices):
        if a >= n and b >= n:
            continue
        if a > b:
            a, b = b, a
        ridge = np.asarray(ridge)
        if np.any(ridge < 0):
            raise RuntimeError(f"unbounded ridge next to seed {a}")
        loop = _ordered_loop(points, ridge, vor.points[b] - vor.points[a])
        if _area(points, loop) < MIN_RIDGE_AREA:
            continue
        if b >= n and not np.allclose(vor.points[b], _mirror_of(vor.points[a], vor.points[b])):
            raise RuntimeError(f"seed {a} touches a foreign mirror image")
        faces.append(loop)
        cells[a].append(len(faces))
        if b < n:
            cells[b].append(-len(faces))

    used = np.unique(np.concatenate(faces))
    tree = cKDTree(points[used])
    canonical = np.arange(used.size)
    for i, j in sorted(tree.query_pairs(MERGE_TOL)):
        canonical[j] = canonical[i]
    keep, compact = np.unique(canonical, return_inverse=True)
    remap = dict(zip(used.tolist(), compact.tolist()))

    loops = []
    for loop in faces:
        merged = []
        for v in loop:
            w = remap[int(v)]
            if not merged or merged[-1] != w:
                merged.append(w)
        if len(merged) > 1 and merged[0] == merged[-1]:
            merged.pop()
        loops.append(merged)
    return {
        "vertices": points[used[keep]].tolist(),
        "faces": loops,
        "cells": cells,
    }


def cell_centroids(doc: dict) -> np.ndarray:
    """Centroids of the cells of a JSON mesh document by signed tetrahedra."""
    points = np.asarray(doc["vertices"], dtype=float)
    out = np.zeros((len(doc["cells"]), 3))
    for c, cell in enumerate(doc["cells"]):
        apex = points[doc["faces"][abs(cell[0]) - 1][0]]
        volume, moment = 0.0, np.zeros(3)
        for s in cell:
            loop = doc["faces"][abs(s) - 1]
            if s < 0:
                loop = loop[::-1]
            p = points[loop]
            a, b, d = p[0], p[1:-1], p[2:]
            vols = np.einsum("ij,ij->i", np.cross(b - apex, d - apex), np.broadcast_to(a - apex, b.shape)) / 6.0
            volume += vols.sum()
            moment += (vols[:, None] * (apex + a + b + d)).sum(axis=0) / 4.0
        out[c] = moment / volume
    return out


def lloyd_seeds(seeds: np.ndarray, iterations: int) -> np.ndarray:
    for _ in range(iterations):
        seeds = cell_centroids(voronoi_mesh(seeds))
    return seeds


def _mirror_of(seed: np.ndarray, image: np.ndarray) -> np.ndarray:
    """The reflection of ``seed`` through the cube face separating it from ``image``."""
    axis = int(np.argmax(np.abs(image - seed)))
    plane = 0.0 if image[axis] < 0.0 else 1.0
    out = seed.copy()
    out[axis] = 2.0 * plane - out[axis]
    return out


def write_fixtures(out_dir: str, sizes=(2, 3), seed: int = 0, lloyd: int = 0) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for n in sizes:
        path = os.path.join(out_dir, f"voronoi{n}.json")
        with open(path, "w") as f:
            json.dump(voronoi_mesh(lloyd_seeds(jittered_lattice_seeds(n, seed=seed + n), lloyd)), f)
        paths.append(path)
    return paths


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Generate Voronoi mesh fixtures")
    parser.add_argument("--out", default="tests/data/voronoi")
    parser.add_argument("--sizes", default="2,3", help="Seeds per axis, comma-separated")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--lloyd", type=int, default=0, help="Centroid relaxation sweeps")
    args = parser.parse_args()
    for p in write_fixtures(args.out, [int(s) for s in args.sizes.split(",")], args.seed, args.lloyd):
        print(f"✅ Wrote {p}")
