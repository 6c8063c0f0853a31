from pathlib import Path

import numpy as np
import pytest

from mesh import compute_geometry, gen_cube_mesh, load_mesh

DATA = Path(__file__).resolve().parent / "data"


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def voronoi_dir():
    """Clipped centroidal Voronoi tessellations of the unit cube, 2**3 to 8**3 seeds."""
    return DATA / "voronoi"


@pytest.fixture(scope="session")
def voronoi_mesh(voronoi_dir):
    return load_mesh(voronoi_dir / "voronoi2.json")


@pytest.fixture(scope="session")
def voronoi_mesh_fine(voronoi_dir):
    return load_mesh(voronoi_dir / "voronoi3.json")


@pytest.fixture
def cube2():
    return gen_cube_mesh(2)


@pytest.fixture(scope="session")
def tetrahedron():
    return load_mesh(DATA / "tetrahedron.json")


@pytest.fixture(scope="session")
def unit_cube():
    return load_mesh(DATA / "unit_cube.json")


def random_rotation(seed: int = 0) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rotation():
    return random_rotation(7)
