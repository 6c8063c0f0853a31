import csv
import json

import numpy as np
import pytest

from harness import (
    DEFAULT_CONFIG,
    ExperimentConfig,
    MeshSource,
    compute_errors,
    default_case,
    get_case,
    linear_pressure_case,
    merge_config,
    observed_rates,
    polynomial_case,
    run_bench,
    run_convergence,
    write_report,
)
from solver import SolverError

POINTS = np.random.default_rng(4).uniform(0.0, 1.0, size=(10, 3))


def _gradient(q, points, eps=1e-5):
    out = np.zeros_like(points)
    for c in range(3):
        step = np.zeros(3)
        step[c] = eps
        out[:, c] = (q(points + step) - q(points - step)) / (2 * eps)
    return out


def _divergence(v, points, eps=1e-5):
    out = np.zeros(len(points))
    for c in range(3):
        step = np.zeros(3)
        step[c] = eps
        out += (v(points + step)[:, c] - v(points - step)[:, c]) / (2 * eps)
    return out


# --- Manufactured cases ---

def test_default_case_values():
    case = default_case()
    corner = np.array([[1.0, 1.0, 1.0]])
    np.testing.assert_allclose(case.velocity(corner), [[-6.0, -26.0, -30.0]])
    np.testing.assert_allclose(case.pressure(corner), [17.0])
    np.testing.assert_allclose(case.source(corner), [-154.0])


@pytest.mark.parametrize("case", [default_case(), linear_pressure_case(), polynomial_case(1), polynomial_case(3), default_case(nu=2.0)])
def test_cases_satisfy_darcy_law(case):
    np.testing.assert_allclose(case.nu * case.velocity(POINTS), -_gradient(case.pressure, POINTS), rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(case.source(POINTS), _divergence(case.velocity, POINTS), rtol=1e-5, atol=1e-5)


def test_boundary_flux_and_fields():
    case = linear_pressure_case()
    normals = np.tile([1.0, 0.0, 0.0], (len(POINTS), 1))
    np.testing.assert_allclose(case.boundary_flux(POINTS, normals), -1.0)
    fields = case.fields()
    assert fields.nu == 1.0
    assert fields.u_N == case.boundary_flux


def test_get_case():
    assert get_case("polynomial", order=2).name == "polynomial3"
    assert get_case("linear", order=1).name == "linear"
    with pytest.raises(ValueError):
        get_case("cubic", order=1)
    with pytest.raises(ValueError):
        polynomial_case(0)


# --- Rates ---

def test_observed_rates_recover_exponent():
    hs = [0.5, 0.25, 0.125, 0.1]
    rates = observed_rates(hs, [h**3 for h in hs])
    assert rates[0] is None
    np.testing.assert_allclose(rates[1:], 3.0)


def test_rates_undefined_without_refinement():
    assert observed_rates([0.5, 0.5], [1.0, 0.5]) == [None, None]
    assert observed_rates([0.3], [0.1]) == [None]


# --- Configuration ---

def test_merge_config_is_per_section_and_pure():
    merged = merge_config(DEFAULT_CONFIG, {"solver": {"kind": "block-reg"}})
    assert merged["solver"]["kind"] == "block-reg"
    assert merged["solver"]["rtol"] == 1e-8
    assert DEFAULT_CONFIG["solver"]["kind"] == "direct"


def test_experiment_config_from_dict():
    cfg = ExperimentConfig.from_dict({"solver": {"gamma": 0.1}, "discretization": {"order": 2}})
    assert cfg.gamma == 0.1
    assert cfg.order == 2
    assert [m.cube for m in cfg.meshes] == DEFAULT_CONFIG["convergence"]["cube_levels"]
    assert ExperimentConfig.from_dict({}).gamma is None
    bench = ExperimentConfig.from_dict({}, section="bench")
    assert [m.label for m in bench.meshes] == ["cube4", "cube8"]
    assert bench.spec("block-schur").kind == "block-schur"


def test_mesh_source_from_path(data_dir):
    source = MeshSource.from_path(str(data_dir / "unit_cube.json"))
    assert source.label == "unit_cube"
    assert source.load().n_cells == 1
    assert MeshSource.from_cube(3).load().n_cells == 27


# --- Errors ---

def test_compute_errors_rejects_unknown_reference(mocker):
    with pytest.raises(ValueError):
        compute_errors(mocker.MagicMock(), np.zeros(1), default_case(), pressure_reference="nodal")


# --- Experiments ---

def test_run_convergence_records_failures_and_continues(tmp_path):
    cfg = ExperimentConfig(
        order=1,
        case="linear",
        meshes=(MeshSource.from_cube(1), MeshSource.from_path(str(tmp_path / "missing.json")), MeshSource.from_cube(2)),
    )
    report = run_convergence(cfg)
    assert [lvl.status for lvl in report.levels] == ["ok", "failed", "ok"]
    assert not report.ok
    assert report.levels[0].rate_v is None
    assert report.levels[2].rate_q is not None
    assert "missing.json" in report.levels[1].message
    assert all("t_solve" not in row and "t_assembly" not in row for row in report.rows())


def test_single_level_has_no_rates():
    report = run_convergence(ExperimentConfig(order=1, meshes=(MeshSource.from_cube(2),)))
    assert report.ok
    assert report.levels[0].rate_v is None
    assert report.levels[0].dofs == 36 * 3 + 8 * 3 + 8 + 1


def test_run_bench_table():
    cfg = ExperimentConfig(
        order=1,
        case="polynomial",
        rtol=1e-12,
        restart=300,
        threads=(1, 2),
        solvers=("direct", "block-schur", "block-reg"),
        meshes=(MeshSource.from_cube(2),),
    )
    (row,) = run_bench(cfg)
    assert row["status"] == "ok"
    assert row["s_p1"] == pytest.approx(1.0)
    assert row["s_id_p2"] == 2.0
    assert row["t_ass"] == row["t_ass_p1"]
    assert row["dofs"] == 141
    for kind in cfg.solvers:
        assert row[f"converged_{kind}"]
    assert row["max_pairwise_diff"] < 1e-6


def test_run_bench_marks_failed_solver(mocker):
    mocker.patch("harness.solve", side_effect=SolverError("singular Schur block"))
    cfg = ExperimentConfig(order=1, case="linear", solvers=("block-schur",), meshes=(MeshSource.from_cube(1),))
    (row,) = run_bench(cfg)
    assert row["status"] == "partial"
    assert row["it_block-schur"] is None
    assert "singular" in row["error_block-schur"]
    assert row["max_pairwise_diff"] is None


# --- Reports ---

def test_write_csv_report(tmp_path):
    rows = [{"label": "cube2", "e_v": 0.5}, {"label": "cube4", "e_v": 0.125, "rate_v": 2.0}]
    path = write_report(rows, tmp_path / "out", "convergence", "csv")
    with open(path) as f:
        read = list(csv.DictReader(f))
    assert path.name == "convergence.csv"
    assert list(read[0]) == ["schema_version", "label", "e_v", "rate_v"]
    assert read[0]["schema_version"] == "1"
    assert read[1]["rate_v"] == "2.0"


def test_write_json_report(tmp_path):
    path = write_report([{"label": "cube2"}], tmp_path, "bench", "json")
    data = json.loads(path.read_text())
    assert data == {"schema_version": 1, "kind": "bench", "rows": [{"label": "cube2"}]}


def test_unknown_report_format(tmp_path):
    with pytest.raises(ValueError):
        write_report([], tmp_path, "x", "xml")
