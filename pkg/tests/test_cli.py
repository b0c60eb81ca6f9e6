import json
import subprocess
import sys

import pytest

from deepmpc.cli import main
from deepmpc.harness import read_csv


def run_cli(argv, capsys):
    code = 0
    try:
        main(argv)
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_artifacts(tmp_path, capsys):
    code, out, _ = run_cli(["run", "--scenario", "2", "--controller", "inversion", "--out", str(tmp_path),
                            "--duration", "0.3"], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["records"] == 30
    assert len(read_csv(tmp_path / "trajectory.csv")) == 30
    assert (tmp_path / "plot_trajectory.py").is_file()
    assert "final_rms" in json.loads((tmp_path / "metrics.json").read_text())


def test_metrics_command(tmp_path, capsys):
    run_cli(["run", "--scenario", "1", "--controller", "inversion", "--out", str(tmp_path), "--duration", "0.2"],
            capsys)
    code, out, _ = run_cli(["metrics", "--log", str(tmp_path / "trajectory.csv"), "--threshold", "0.5"], capsys)
    assert code == 0
    assert json.loads(out)["threshold"] == 0.5


def test_train_command(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"task": {"Q": 1.0, "R": 10.0}, "value": {"epochs": 5}, "episode_length": 5}))
    code, out, _ = run_cli(["train", "--config", str(cfg), "--episodes", "2", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert json.loads(out)["episodes"] == 2
    assert len((tmp_path / "learning_curve.csv").read_text().splitlines()) == 3
    assert "net" in json.loads((tmp_path / "value.json").read_text())


@pytest.mark.parametrize("argv,kind", [
    (["run", "--scenario", "9", "--out", "x"], "ConfigurationError"),
    (["run", "--scenario", "1", "--out", "x", "--duration", "0"], "ConfigurationError"),
    (["metrics", "--log", "/nonexistent/log.csv"], "OSError"),
])
def test_errors_are_json(argv, kind, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    code, _, err = run_cli(argv, capsys)
    assert code == 1
    assert json.loads(err)["error"] == kind


def test_usage_error_is_json(capsys):
    code, _, err = run_cli(["run", "--controller", "pid"], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "UsageError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "deepmpc.cli", "metrics", "--log", str(tmp_path / "nope.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "error" in json.loads(proc.stderr)
