import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mesh import (
    MeshError,
    MeshParseError,
    PolyMesh,
    compute_geometry,
    gen_cube_mesh,
    load_mesh,
    mesh_size,
    mesh_summary,
    sub_tessellate,
    write_mesh,
)


def _cube_arrays(data_dir):
    with open(data_dir / "unit_cube.json") as f:
        data = json.load(f)
    cells = [[(abs(s) - 1, 1 if s > 0 else -1) for s in cell] for cell in data["cells"]]
    return data["vertices"], data["faces"], cells


# --- Structured cubes ---

def test_cube_mesh_counts():
    mesh = gen_cube_mesh(3)
    assert mesh.n_cells == 27
    assert mesh.n_vertices == 64
    assert mesh.n_faces == 3 * 9 * 4
    assert len(mesh.boundary_faces) == 6 * 9


def test_cube_mesh_geometry(cube2):
    geom = compute_geometry(cube2)
    np.testing.assert_allclose(geom.cell_volume, 0.125)
    np.testing.assert_allclose(geom.cell_centroid[0], [0.25, 0.25, 0.25])
    np.testing.assert_allclose(geom.cell_centroid[-1], [0.75, 0.75, 0.75])
    np.testing.assert_allclose(geom.cell_diameter, np.sqrt(3) / 2)
    np.testing.assert_allclose(geom.face_area, 0.25)
    assert mesh_size(cube2, geom) == pytest.approx(np.sqrt(3) / 2)


def test_cube_mesh_shared_faces_have_opposite_signs(cube2):
    for f, owners in enumerate(cube2.face_cells):
        if len(owners) == 2:
            assert owners[0][1] + owners[1][1] == 0
        else:
            assert f in cube2.boundary_faces


def test_cube_mesh_on_a_box():
    mesh = gen_cube_mesh(2, domain=((0.0, 0.0, 0.0), (2.0, 1.0, 1.0)))
    assert compute_geometry(mesh).cell_volume.sum() == pytest.approx(2.0)


def test_cube_mesh_rejects_bad_resolution():
    with pytest.raises(MeshError):
        gen_cube_mesh(0)


# --- Ingestion ---

def test_load_tetrahedron(tetrahedron):
    geom = compute_geometry(tetrahedron)
    assert tetrahedron.n_cells == 1
    assert geom.cell_volume[0] == pytest.approx(1.0 / 6.0)
    np.testing.assert_allclose(geom.cell_centroid[0], [0.25, 0.25, 0.25])
    # the slanted face is stored inward, so the cell sign flips it outward
    assert tetrahedron.boundary_sign(3) == -1
    np.testing.assert_allclose(geom.face_normal[3], -np.ones(3) / np.sqrt(3))


def test_load_unit_cube(unit_cube):
    geom = compute_geometry(unit_cube)
    assert geom.cell_volume[0] == pytest.approx(1.0)
    assert geom.cell_diameter[0] == pytest.approx(np.sqrt(3))


def test_face_referenced_by_three_cells_is_rejected(data_dir):
    with pytest.raises(MeshError, match="face 0 is referenced by 3 cells"):
        load_mesh(data_dir / "bad_three_cells.json")


def test_missing_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mesh(tmp_path / "absent.json")


def test_malformed_json_raises_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"vertices\": [[0, 0, 0]")
    with pytest.raises(MeshParseError):
        load_mesh(path)


def test_zero_face_index_is_rejected(tmp_path, data_dir):
    data = json.loads((data_dir / "tetrahedron.json").read_text())
    data["cells"] = [[0, 2, 3, -4]]
    path = tmp_path / "zero.json"
    path.write_text(json.dumps(data))
    with pytest.raises(MeshParseError, match="1-based"):
        load_mesh(path)


def test_open_cell_is_rejected(data_dir):
    vertices, faces, cells = _cube_arrays(data_dir)
    cells[0][5] = (5, -1)
    with pytest.raises(MeshError, match="cell 0 is not closed"):
        PolyMesh.from_arrays(vertices, faces, cells)


def test_repeated_vertex_in_face_is_rejected(data_dir):
    vertices, faces, cells = _cube_arrays(data_dir)
    faces[0] = [0, 4, 4, 2]
    with pytest.raises(MeshError, match="face 0"):
        PolyMesh.from_arrays(vertices, faces, cells)


def test_cell_with_too_few_faces_is_rejected(data_dir):
    vertices, faces, cells = _cube_arrays(data_dir)
    with pytest.raises(MeshError, match="cell 0 has only 3 faces"):
        PolyMesh.from_arrays(vertices, faces[:3], [cells[0][:3]])


def test_warped_face_strict_and_lenient(data_dir, caplog):
    vertices, faces, cells = _cube_arrays(data_dir)
    vertices[7] = [1.0, 1.0, 1.05]
    with pytest.raises(MeshError, match="non-planar"):
        PolyMesh.from_arrays(vertices, faces, cells, strict=True)
    with caplog.at_level(logging.WARNING, logger="mesh"):
        mesh = PolyMesh.from_arrays(vertices, faces, cells, strict=False)
    assert mesh.n_cells == 1
    assert "non-planar" in caplog.text


def test_write_then_load_preserves_mesh(tmp_path, tetrahedron):
    path = tmp_path / "tet.json"
    write_mesh(tetrahedron, path)
    again = load_mesh(path)
    np.testing.assert_array_equal(again.vertices, tetrahedron.vertices)
    assert again.faces == tetrahedron.faces
    assert again.cells == tetrahedron.cells


# --- Derived geometry ---

def test_rigid_motion_preserves_volumes(voronoi_mesh, rotation):
    moved = voronoi_mesh.transformed(rotation, (1.0, -2.0, 0.5))
    g0 = compute_geometry(voronoi_mesh)
    g1 = compute_geometry(moved)
    np.testing.assert_allclose(g1.cell_volume, g0.cell_volume, rtol=1e-12)
    np.testing.assert_allclose(g1.cell_centroid, g0.cell_centroid @ rotation.T + [1.0, -2.0, 0.5], atol=1e-12)


def test_voronoi_mesh_tiles_the_cube(voronoi_mesh_fine):
    geom = compute_geometry(voronoi_mesh_fine)
    assert voronoi_mesh_fine.n_cells == 27
    assert geom.cell_volume.sum() == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(np.linalg.norm(geom.face_normal, axis=1), 1.0)
    frames = geom.face_frame
    np.testing.assert_allclose(np.einsum("fij,fkj->fik", frames, frames), np.broadcast_to(np.eye(2), (len(frames), 2, 2)), atol=1e-12)
    np.testing.assert_allclose(np.einsum("fij,fj->fi", frames, geom.face_normal), 0.0, atol=1e-12)


def test_sub_tessellation_covers_each_cell(voronoi_mesh):
    geom = compute_geometry(voronoi_mesh)
    tess = sub_tessellate(voronoi_mesh, geom)
    volumes = tess.tet_volumes()
    per_cell = np.add.reduceat(volumes, tess.cell_tet_ptr[:-1])
    np.testing.assert_allclose(per_cell, geom.cell_volume, rtol=1e-12)
    areas = tess.triangle_areas(geom.face_normal)
    np.testing.assert_allclose(np.add.reduceat(areas, tess.face_tri_ptr[:-1]), geom.face_area, rtol=1e-12)


def test_mesh_summary(cube2):
    summary = mesh_summary(cube2, compute_geometry(cube2))
    assert summary["n_cells"] == 8
    assert summary["n_faces"] == 36
    assert summary["n_vertices"] == 27
    assert summary["n_boundary_faces"] == 24
    assert summary["min_face_area"] == pytest.approx(0.25)
    assert summary["volume"] == pytest.approx(1.0)


# --- Voronoi fixtures ---

@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_committed_voronoi_levels_tile_the_cube(n, voronoi_dir):
    mesh = load_mesh(voronoi_dir / f"voronoi{n}.json")
    geom = compute_geometry(mesh)
    assert mesh.n_cells == n**3
    assert (geom.cell_volume > 0).all()
    assert geom.cell_volume.sum() == pytest.approx(1.0, rel=1e-10)


def test_fixture_script_writes_loadable_meshes(tmp_path):
    root = Path(__file__).resolve().parents[1]
    done = subprocess.run(
        [sys.executable, str(root / "scripts" / "make_voronoi_fixtures.py"), "--out", str(tmp_path), "--sizes", "2", "--lloyd", "2"],
        cwd=root,
        capture_output=True,
        text=True,
    )
    assert done.returncode == 0, done.stderr
    mesh = load_mesh(tmp_path / "voronoi2.json")
    assert mesh.n_cells == 8
    assert compute_geometry(mesh).cell_volume.sum() == pytest.approx(1.0, rel=1e-10)
