import numpy as np
import pytest

from app.main import main
from app.services import field_io

GRID = "resolution = 8\ntime_points = 16\n"


def _run(tmp_path, name, text, *extra):
    problem = tmp_path / f"{name}.txt"
    problem.write_text(text)
    out = tmp_path / name
    return main(["--config", str(problem), "--out", str(out), *extra]), out


@pytest.fixture
def geodesic_dir(tmp_path):
    code, out = _run(tmp_path, "solve", "command = solve-geodesic\nepsilon = 0.1\n" + GRID)
    assert code == 0
    return out


def test_inspect_metric(tmp_path):
    code, out = _run(tmp_path, "inspect", "command = inspect-metric\n" + GRID, "--seed", "9")
    assert code == 0
    report = field_io.read_json(out / "report.json")
    assert report["status"] == "accepted"
    assert report["seed"] == 9
    assert report["result"]["min_eigenvalue"] == pytest.approx(1.0)
    assert (out / "config.txt").read_text().startswith("command = inspect-metric")
    assert (out / "x_wedge.npz").exists()


def test_solve_geodesic(geodesic_dir):
    table = field_io.read_table(geodesic_dir / "eps_sweep.csv")
    assert len(table) == 1
    assert table["sup_phi_tt"].iloc[0] == pytest.approx(0.1 / 3.0)
    phi = field_io.load_spacetime(geodesic_dir / "phi.npz")
    t = phi.times
    assert np.allclose(phi.values, (0.1 / 6.0) * t * (t - 1.0), atol=1e-8)


def test_without_continuation_exits_with_solver_failure(tmp_path):
    code, out = _run(tmp_path, "cone", "command = solve-geodesic\nepsilon = 0.1\ncontinuation = false\n" + GRID)
    assert code == 2
    report = field_io.read_json(out / "report.json")
    assert report["status"] == "solver_failure"
    assert report["error"]["error"] == "ConeExit"


def test_sweep_eps(tmp_path):
    code, out = _run(tmp_path, "sweep", "command = sweep-eps\nepsilons = 0.05, 0.1\n" + GRID)
    assert code == 0
    table = field_io.read_table(out / "eps_sweep.csv")
    assert list(table["epsilon"]) == [0.1, 0.05]
    assert table["success"].all()


def test_solve_cy_with_amplitude_sweep(tmp_path):
    code, out = _run(
        tmp_path, "cy",
        "command = solve-cy\npsi_expr = 0.1*sin(2*pi*x1)\npsi_amplitudes = 0.5, 1.0\nresolution = 8\n",
    )
    assert code == 0
    table = field_io.read_table(out / "c0_sweep.csv")
    assert list(table["amplitude"]) == [0.5, 1.0]
    assert table["success"].all()
    assert (out / "u.npz").exists()


def test_verify_accepts_solution(tmp_path, geodesic_dir, small_samples):
    code, out = _run(
        tmp_path, "verify",
        f"command = verify\nepsilon = 0.1\nsolution_dir = {geodesic_dir}\n" + GRID,
    )
    assert code == 0
    report = field_io.read_json(out / "report.json")
    assert report["result"]["solver_status"] == "accepted"
    assert (out / "energy_probe.csv").exists()


def test_verify_rejects_corrupted_solution(tmp_path, geodesic_dir, small_samples):
    phi = field_io.load_spacetime(geodesic_dir / "phi.npz")
    values = phi.values.copy()
    values[3, 5] += 1e-3
    corrupted = tmp_path / "corrupted"
    corrupted.mkdir()
    field_io.save_spacetime(corrupted / "phi.npz", phi.with_values(values))

    code, out = _run(
        tmp_path, "verify",
        f"command = verify\nepsilon = 0.1\nsolution_dir = {corrupted}\n" + GRID,
    )
    assert code == 3
    report = field_io.read_json(out / "report.json")
    assert report["status"] == "verification_failure"
    assert "equation_residual" in [f["name"] for f in report["error"]["failures"]]


def test_unknown_key_writes_nothing(tmp_path):
    code, out = _run(tmp_path, "bad", "command = solve-geodesic\nepsilonn = 0.1\n")
    assert code == 1
    assert not out.exists()


def test_invalid_boundary_data_writes_nothing(tmp_path):
    code, out = _run(tmp_path, "data", "command = solve-geodesic\nepsilon = 0.1\nphi1 = 2*cos(2*pi*x1)\n" + GRID)
    assert code == 1
    assert not out.exists()


def test_fixed_seed_and_threads_give_identical_output(tmp_path):
    text = "command = solve-geodesic\nepsilon = 0.1\nthreads = 1\nphi1 = 0.05*cos(2*pi*x1)\n" + GRID
    runs = [_run(tmp_path, name, text, "--seed", "3") for name in ("first", "second")]
    assert [code for code, _ in runs] == [0, 0]
    first, second = (field_io.load_spacetime(out / "phi.npz") for _, out in runs)
    assert np.array_equal(first.values, second.values)
    tables = [field_io.read_table(out / "eps_sweep.csv") for _, out in runs]
    assert tables[0].equals(tables[1])
