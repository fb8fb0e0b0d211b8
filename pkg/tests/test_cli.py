import copy
import json

import numpy as np
import pytest
import yaml

from evacontrol.checks import DEFAULT_CHECK
from evacontrol.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main
from evacontrol.io import read_controls, read_mesh, read_table


@pytest.fixture
def check_yaml(tmp_path):
    path = tmp_path / "check.yaml"
    path.write_text(yaml.safe_dump(copy.deepcopy(DEFAULT_CHECK)))
    return path


def _bundle_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_simulate_is_deterministic(check_yaml, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", str(check_yaml), "--output-dir", str(a), "--snapshot-stride", "5"]) == EXIT_OK
    assert main(["simulate", str(check_yaml), "--output-dir", str(b), "--snapshot-stride", "5"]) == EXIT_OK
    files = _bundle_bytes(a)
    assert files == _bundle_bytes(b)
    assert {"agents.csv", "series.csv", "control.csv", "summary.json",
            "snapshots/state_0000.vtk", "snapshots/state_0020.vtk"} <= set(files)


def test_simulate_series_respects_box(check_yaml, tmp_path):
    main(["simulate", str(check_yaml), "--output-dir", str(tmp_path / "o")])
    s = read_table(tmp_path / "o" / "series.csv")
    assert s["rho_min"].min() >= -1e-10 and s["rho_max"].max() <= 1 + 1e-10
    assert np.all(np.diff(s["mass"]) <= 1e-12)
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["eikonal_max_residual"] <= 1e-10


def test_mass_constant_without_exits(tmp_path):
    data = copy.deepcopy(DEFAULT_CHECK)
    data["model"] = dict(data["model"], gamma=0.0)
    path = tmp_path / "closed.yaml"
    path.write_text(yaml.safe_dump(data))
    main(["simulate", str(path), "--output-dir", str(tmp_path / "o")])
    mass = read_table(tmp_path / "o" / "series.csv")["mass"]
    assert np.max(np.abs(mass - mass[0])) <= 1e-12 * mass[0]


def test_optimize_history_and_admissible_controls(check_yaml, tmp_path):
    out = tmp_path / "o"
    assert main(["optimize", str(check_yaml), "--output-dir", str(out), "--max-iters", "3"]) == EXIT_OK
    hist = read_table(out / "history.csv")
    assert np.all(np.diff(hist["objective"]) <= 0)
    u, c = read_controls(out / "control.csv")
    assert np.hypot(u[..., 0], u[..., 1]).max() <= 1 + 1e-12
    assert c.min() >= 0 and c.max() <= 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["objective"] <= summary["objective_initial"]
    assert summary["iterations"] <= 3


def test_check_passes_and_writes_report(tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["check", "--report", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert data["passed"] and {c["name"] for c in data["checks"]} >= {
        "mass", "box", "m_matrix", "eikonal_residual", "adjoint_tangent", "gradient_fd", "projection_kkt"}


@pytest.mark.parametrize("inject,failing", [("box", "box"), ("adjoint_sign", "adjoint_tangent")])
def test_check_detects_injected_faults(inject, failing, capsys):
    assert main(["check", "--inject", inject]) == EXIT_CHECK
    data = json.loads(capsys.readouterr().out)
    assert not data["passed"]
    assert not next(c for c in data["checks"] if c["name"] == failing)["passed"]


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("geometry: {width: 4\ntime: [")
    assert main(["simulate", str(bad)]) == EXIT_CONFIG
    assert "bad.yaml:" in capsys.readouterr().err
    assert main(["simulate", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_mesh_gen_and_info(tmp_path, capsys):
    out = tmp_path / "room.msh"
    assert main(["mesh", "gen", "-o", str(out), "--width", "6", "--height", "4", "--h", "0.8",
                 "--exit", "east:1:3", "--wall", "2,0,3,1.5"]) == EXIT_OK
    mesh = read_mesh(out)
    capsys.readouterr()
    assert main(["mesh", "info", str(out)]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["triangles"] == mesh.n_triangles
    assert info["area"] == pytest.approx(6 * 4 - 1.5, abs=0.5)
    assert "exit" in info["boundary_faces"]


def test_mesh_gen_requires_size(tmp_path):
    assert main(["mesh", "gen", "-o", str(tmp_path / "m.msh")]) == EXIT_CONFIG
