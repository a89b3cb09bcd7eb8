from __future__ import annotations

import csv
import json

import pytest

from sympacool.cli import TIMESERIES_COLUMNS, main

SMALL = """
model.kind = ising
model.n = 3
model.j = 5.0
model.g = 1.0
bath.g_sb = 1.15
bath.gamma = 1.9
t_max = 8
n_grid = 41
n_traj = 30
seed = 5
sweep.points = 3
optimize.max_evals = 4
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text(SMALL)
    return path


def _run(capsys, *argv) -> list[str]:
    code = main([str(a) for a in argv])
    assert code == 0
    return capsys.readouterr().out.split()


def test_cool_writes_timeseries_and_summary(config, tmp_path, capsys):
    out = tmp_path / "cool"
    paths = _run(capsys, "cool", config, "--out", out, "--eps-target", 0.5)
    assert str(out / "timeseries.csv") in paths and str(out / "manifest.json") in paths
    with (out / "timeseries.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == TIMESERIES_COLUMNS
    assert len(rows) == 42
    summary = json.loads((out / "summary.json").read_text())
    assert summary["gap"] > 0 and 0 <= summary["final_fidelity"] <= 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 5 and manifest["command"] == "cool"


def test_flags_override_config(config, tmp_path, capsys):
    out = tmp_path / "cool"
    _run(capsys, "cool", config, "--out", out, "--n-traj", 7, "--set", "bath.gamma=1.0")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["n_traj"] == "7"
    assert manifest["config"]["bath.gamma"] == "1.0"


@pytest.mark.parametrize("command, artifact", [
    ("spectrum", "spectrum.csv"),
    ("transitions", "transitions.txt"),
    ("sweep-delta", "sweep.csv"),
    ("optimize", "trace.csv"),
])
def test_commands_write_artifacts(command, artifact, config, tmp_path, capsys):
    out = tmp_path / command
    paths = _run(capsys, command, config, "--out", out)
    assert str(out / artifact) in paths
    assert (out / artifact).read_text().strip()


def test_plot_flag_renders_png(config, tmp_path, capsys):
    out = tmp_path / "plot"
    paths = _run(capsys, "spectrum", config, "--out", out, "--plot")
    png = out / "spectrum.png"
    assert str(png) in paths
    assert png.read_bytes()[:4] == b"\x89PNG"


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("model.n = 3\nbath.gamma = -2\n")
    assert main(["cool", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "bath.gamma" in err and "line 2" in err


def test_missing_config_file(tmp_path, capsys):
    assert main(["spectrum", str(tmp_path / "nope.conf")]) == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    conf = tmp_path / "slow.conf"
    conf.write_text("model.n = 3\nmodel.j = 5\nt_max = 0.01\nn_grid = 3\nn_traj = 2\n"
                    "scale.n = 3, 4, 5\nscale.eps_target = 1e-9\nscale.max_evals = 3\n")
    assert main(["scale", str(conf), "--out", str(tmp_path / "s")]) == 3
    assert "numerical error" in capsys.readouterr().err


@pytest.mark.parametrize("command, artifact", [("cool", "timeseries.csv"), ("sweep-delta", "sweep.csv")])
def test_csv_is_byte_identical_across_runs_and_threads(command, artifact, config, tmp_path, capsys):
    blobs = []
    for i, threads in enumerate((1, 1, 2)):
        out = tmp_path / f"{command}{i}"
        _run(capsys, command, config, "--out", out, "--threads", threads, "--n-traj", 150)
        blobs.append((out / artifact).read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]
