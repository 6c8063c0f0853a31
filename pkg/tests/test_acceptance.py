"""Desk-scale sweeps: convergence rates, solver agreement, iteration trends
and assembly speedup. Run with ``pytest -m slow``."""
import os
from pathlib import Path

import numpy as np
import pytest

from assembly import assemble
from harness import (
    ExperimentConfig,
    MeshSource,
    compute_errors,
    linear_pressure_case,
    polynomial_case,
    run_convergence,
)
from mesh import gen_cube_mesh
from solver import PreconditionerSpec, compute_speedup, solve

pytestmark = pytest.mark.slow

VORONOI = Path(__file__).resolve().parent / "data" / "voronoi"


def _bracket(rate, expected):
    return expected - 0.25 <= rate <= expected + 0.4


@pytest.mark.parametrize("k", [1, 2, 3])
def test_cube_convergence_rates(k):
    cfg = ExperimentConfig(order=k, meshes=tuple(MeshSource.from_cube(n) for n in (2, 4, 8, 12)))
    report = run_convergence(cfg)
    assert report.ok
    last = report.levels[-1]
    assert _bracket(last.rate_v, k + 1)
    assert _bracket(last.rate_q, k)
    assert _bracket(last.rate_div, k)


@pytest.fixture(scope="module")
def voronoi_sequence():
    return [str(VORONOI / f"voronoi{n}.json") for n in (4, 8)]


@pytest.mark.parametrize("k", [1, 2])
def test_voronoi_convergence_rates(k, voronoi_sequence):
    cfg = ExperimentConfig(order=k, meshes=tuple(MeshSource.from_path(p) for p in voronoi_sequence))
    report = run_convergence(cfg)
    assert report.ok
    assert _bracket(report.levels[-1].rate_v, k + 1)
    assert _bracket(report.levels[-1].rate_q, k)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_patch_tests_up_to_order_four(k, voronoi_mesh):
    for mesh in (gen_cube_mesh(2), voronoi_mesh):
        for case in (linear_pressure_case(), polynomial_case(k + 1)):
            system = assemble(mesh, k, case.fields())
            x, _ = solve(system, PreconditionerSpec("direct"))
            errors = compute_errors(system, x, case, pressure_reference="projected")
            assert errors.e_v <= 1e-8
            assert errors.e_q <= 1e-8


@pytest.mark.parametrize("n", [2, 4, 8])
def test_solvers_agree_at_order_one(n):
    system = assemble(gen_cube_mesh(n), 1, polynomial_case(2).fields())
    reference, _ = solve(system, PreconditionerSpec("direct"))
    for kind in ("block-schur", "block-reg"):
        x, report = solve(system, PreconditionerSpec(kind), rtol=1e-10, restart=60)
        assert report.converged
        assert np.linalg.norm(x - reference) <= 1e-6 * np.linalg.norm(reference)


def _non_increasing_after_first(counts):
    return all(b <= a for a, b in zip(counts[1:], counts[2:]))


def _bounded_by_first(counts, factor=1.2):
    return max(counts[1:]) <= factor * counts[0]


def test_trend_helpers():
    # a rise from the first level followed by a steady decline passes on the first clause
    assert _non_increasing_after_first([90, 114, 110, 104])
    assert not _bounded_by_first([90, 114, 110, 104])
    assert _bounded_by_first([90, 95, 99, 107])
    assert not _non_increasing_after_first([90, 95, 99, 107])


def test_iteration_trends_at_order_two():
    schur, reg = [], []
    for n in (4, 8, 12, 16):
        system = assemble(gen_cube_mesh(n), 2, polynomial_case(3).fields(), workers=os.cpu_count() or 1)
        schur.append(solve(system, PreconditionerSpec("block-schur"))[1].iterations)
        reg.append(solve(system, PreconditionerSpec("block-reg"))[1].iterations)
    assert _non_increasing_after_first(schur) or _bounded_by_first(schur), f"Block-Schur iterations {schur}"
    assert reg[-1] <= 3.0 * reg[0], f"Block-Reg iterations {reg}"


@pytest.mark.skipif((os.cpu_count() or 1) < 4, reason="needs four cores")
def test_parallel_assembly_speedup():
    mesh = gen_cube_mesh(8)
    fields = polynomial_case(3).fields()
    serial = assemble(mesh, 2, fields, workers=1)
    parallel = assemble(mesh, 2, fields, workers=4)
    speedup = compute_speedup({1: serial.t_assembly, 4: parallel.t_assembly})
    assert speedup[4] >= 2.0
    scale = abs(serial.A).max()
    assert abs(serial.A - parallel.A).max() <= 1e-14 * scale
    assert abs(serial.B - parallel.B).max() <= 1e-14 * abs(serial.B).max()