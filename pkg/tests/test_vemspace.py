import numpy as np
import pytest

from mesh import gen_cube_mesh
from poly import dim_Pk, eval_monomials, monomial_exponents
from vemspace import DofLayout, UnsupportedOrderError, VemSpace, dof_counts

RNG = np.random.default_rng(11)


def _random_field(k, seed=0):
    """A vector polynomial of degree k (global monomials) and its divergence."""
    exps = monomial_exponents(k)
    coef = np.random.default_rng(seed).standard_normal((3, len(exps)))

    def field(points):
        return eval_monomials(exps, points) @ coef.T

    def divergence(points):
        out = np.zeros(len(points))
        for c in range(3):
            for a, w in zip(exps, coef[c]):
                if a[c] > 0:
                    lower = a.copy()
                    lower[c] -= 1
                    out += w * a[c] * np.prod(points**lower, axis=1)
        return out

    return field, divergence


# --- Dof layout ---

def test_layout_per_order():
    lay = DofLayout.for_order(2)
    assert (lay.n_face, lay.n_grad, lay.n_cross, lay.n_q) == (6, 3, 11, 4)
    assert lay.n_internal == 14
    assert lay.n_local(6) == 50


@pytest.mark.parametrize("k", [0, 5])
def test_unsupported_order(k):
    with pytest.raises(UnsupportedOrderError):
        DofLayout.for_order(k)


def test_dof_counts_on_small_cube(cube2):
    assert dof_counts(1, cube2) == (36 * 3 + 8 * 3, 8, 36 * 3 + 8 * 3 + 8 + 1)
    assert dof_counts(2, cube2) == (36 * 6 + 8 * 14, 32, 36 * 6 + 8 * 14 + 32 + 1)


@pytest.mark.slow
@pytest.mark.parametrize("n, k, total", [(32, 1, 435201), (24, 2, 508033), (20, 3, 612001)])
def test_dof_counts_of_reference_meshes(n, k, total):
    assert dof_counts(k, gen_cube_mesh(n))[2] == total


def test_global_numbering_blocks(cube2):
    space = VemSpace(cube2, 2)
    assert space.face_dofs(1)[0] == 6
    assert space.internal_dofs(0)[0] == 36 * 6
    assert space.pressure_dofs(0)[0] == space.n_velocity
    assert space.multiplier == space.n_total - 1
    assert space.boundary_dofs().size == 24 * 6
    dofs, signs = space.cell_dofs(0)
    assert dofs.size == DofLayout.for_order(2).n_local(6)
    np.testing.assert_array_equal(signs[:6], -1.0)


# --- Polynomial reproduction ---

@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("mesh_name", ["tetrahedron", "unit_cube", "voronoi_mesh"])
def test_projection_reproduces_polynomials(k, mesh_name, request):
    mesh = request.getfixturevalue(mesh_name)
    space = VemSpace(mesh, k)
    field, _ = _random_field(k, seed=k)
    for cell in range(min(mesh.n_cells, 3)):
        ops = space.element(cell)
        local = space.interpolate_velocity(cell, field)
        coeffs = ops.project(local)
        points, _ = space.cell_rule(cell, 3)
        np.testing.assert_allclose(space.cell_basis(cell)(points) @ coeffs.T, field(points), atol=1e-9)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_divergence_is_exact_for_polynomials(k, voronoi_mesh):
    space = VemSpace(voronoi_mesh, k)
    field, divergence = _random_field(k, seed=10 + k)
    for cell in range(voronoi_mesh.n_cells):
        ops = space.element(cell)
        local = space.interpolate_velocity(cell, field)
        points, _ = space.cell_rule(cell, 2)
        divh = space.cell_basis(cell, k - 1)(points) @ (ops.div @ local)
        np.testing.assert_allclose(divh, divergence(points), atol=1e-9)


@pytest.mark.parametrize("k", [1, 2, 4])
def test_dofs_of_projection_are_a_projector(k, unit_cube):
    space = VemSpace(unit_cube, k)
    ops = space.element(0)
    D = ops.dof_projection()
    np.testing.assert_allclose(D @ D, D, atol=1e-9)
    field, _ = _random_field(k, seed=20 + k)
    local = space.interpolate_velocity(0, field)
    np.testing.assert_allclose(ops.dof_of_poly @ ops.project(local).ravel(), local, atol=1e-9)


def test_divergence_theorem_for_constant_test_function(voronoi_mesh):
    space = VemSpace(voronoi_mesh, 2)
    ops = space.element(0)
    local = RNG.standard_normal(ops.n_local)
    # the first dof of a face is its mean outward flux
    flux = sum(space.geom.face_area[f] * local[sl][0] for sl, (f, _) in zip(ops.face_slices, voronoi_mesh.cells[0]))
    assert (ops.div @ local) @ _cell_means(space, 0) == pytest.approx(flux, rel=1e-10)


def _cell_means(space, cell):
    points, weights = space.cell_rule(cell, space.k)
    return space.cell_basis(cell, space.k - 1)(points).T @ weights


@pytest.mark.parametrize("k", [1, 2, 3])
def test_face_normal_poly_recovers_normal_flux(k, voronoi_mesh):
    space = VemSpace(voronoi_mesh, k)
    field, _ = _random_field(k, seed=30 + k)
    ops = space.element(0)
    local = space.interpolate_velocity(0, field)
    for i, (f, s) in enumerate(voronoi_mesh.cells[0]):
        coeffs = ops.face_normal_poly(i, local[ops.face_slices[i]])
        points, _ = space.face_rule(f, 4)
        flux = field(points) @ (s * space.geom.face_normal[f])
        np.testing.assert_allclose(space.face_basis(f)(points) @ coeffs, flux, atol=1e-9)


def test_face_normal_poly_of_constant_field(unit_cube):
    space = VemSpace(unit_cube, 2)
    ops = space.element(0)
    local = space.interpolate_velocity(0, lambda p: np.tile([1.0, 0.0, 0.0], (len(p), 1)))
    for i, (f, s) in enumerate(unit_cube.cells[0]):
        coeffs = ops.face_normal_poly(i, local[ops.face_slices[i]])
        outward_x = s * space.geom.face_normal[f][0]
        np.testing.assert_allclose(coeffs, [outward_x] + [0.0] * (coeffs.size - 1), atol=1e-12)


# --- Interpolation ---

def test_global_interpolation_matches_local(cube2):
    space = VemSpace(cube2, 2)
    field, _ = _random_field(2, seed=5)
    glob = space.interpolate_global(field)
    for cell in (0, 5):
        dofs, signs = space.cell_dofs(cell)
        np.testing.assert_allclose(signs * glob[dofs], space.interpolate_velocity(cell, field), atol=1e-12)
    assert glob[space.multiplier] == 0.0


def test_pressure_interpolation_reproduces_polynomials(voronoi_mesh):
    space = VemSpace(voronoi_mesh, 3)

    def q(points):
        return 1.0 + points[:, 0] * points[:, 1] - 2.0 * points[:, 2] ** 2

    for cell in range(voronoi_mesh.n_cells):
        dofs = space.interpolate_pressure(cell, q)
        points, _ = space.cell_rule(cell, 2)
        np.testing.assert_allclose(space.pressure_eval(cell, dofs, points), q(points), atol=1e-10)
        ops = space.element(cell)
        np.testing.assert_allclose(ops.pressure_map @ dofs, space.pressure_coefficients(cell, dofs), atol=1e-10)


def test_element_accessors_agree(unit_cube):
    space = VemSpace(unit_cube, 1)
    ops = space.element(0)
    np.testing.assert_allclose(space.divergence_matrix(0), ops.div)
    np.testing.assert_allclose(space.projection_matrix(0), ops.proj)
    np.testing.assert_allclose(space.dof_of_polynomial(0), ops.dof_of_poly)
    assert ops.slim().dof_of_poly is None


def test_dofs_are_translation_invariant(voronoi_mesh):
    shift = np.array([3.0, -1.5, 0.25])
    space = VemSpace(voronoi_mesh, 2)
    moved = VemSpace(voronoi_mesh.transformed(np.eye(3), shift), 2)
    field, _ = _random_field(2, seed=40)
    for cell in range(voronoi_mesh.n_cells):
        np.testing.assert_allclose(
            moved.interpolate_velocity(cell, lambda p: field(p - shift)),
            space.interpolate_velocity(cell, field),
            atol=1e-10,
        )
    np.testing.assert_allclose(moved.element(0).div, space.element(0).div, atol=1e-8)
    np.testing.assert_allclose(moved.element(0).proj, space.element(0).proj, atol=1e-8)
