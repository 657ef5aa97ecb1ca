import json

import pandas as pd
import pytest

from src import __version__, cli, risk
from src.cli import main
from src.errors import EXIT_CONFIG, EXIT_INTERRUPTED, EXIT_OK, EXIT_VERIFY_FAILED
from src.trainer import METRICS_COLUMNS, read_matrix


def test_train_zero_epochs_writes_manifest(tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--epochs", "0", "--seed", "4", "--out", str(out), "--quiet",
                 "--set", "rollout.horizon=5"])
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["seed"] == 4
    assert manifest["code_version"] == __version__
    assert manifest["config"]["rollout"]["horizon"] == 5
    assert manifest["config"]["dropout"]["alpha"] == 0.2
    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == 0 and list(metrics.columns) == METRICS_COLUMNS


def test_flags_beat_file_values(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"dropout": {"alpha": 0.1, "beta": 0.3}}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--alpha", "0.4", "--epochs", "0",
                 "--out", str(out), "--quiet"]) == EXIT_OK
    config = json.loads((out / "manifest.json").read_text())["config"]
    assert (config["dropout"]["alpha"], config["dropout"]["beta"]) == (0.4, 0.3)


def test_alpha_one_is_a_config_error(tmp_path, capsys):
    code = main(["train", "--alpha", "1.0", "--out", str(tmp_path / "run")])
    assert code == EXIT_CONFIG
    assert "dropout.alpha=1.0" in capsys.readouterr().err


def test_refuses_non_empty_output_without_overwrite(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["train", "--epochs", "0", "--out", str(out), "--quiet"]) == EXIT_CONFIG
    assert (out / "keep.txt").exists()
    assert main(["train", "--epochs", "0", "--out", str(out), "--quiet", "--overwrite"]) == EXIT_OK
    assert not (out / "keep.txt").exists()


def test_verify_passes(capsys):
    assert main(["verify", "--trials", "10"]) == EXIT_OK
    assert "all checks passed" in capsys.readouterr().out


def test_verify_zero_trials_is_a_vacuous_pass(capsys):
    assert main(["verify", "--trials", "0"]) == EXIT_OK
    assert "vacuous" in capsys.readouterr().out


def test_verify_catches_a_cvar_sign_flip(monkeypatch, tmp_path):
    original = risk.cvar_p
    monkeypatch.setattr(risk, "cvar_p", lambda dist, p, split_boundary=False: -original(dist, p, split_boundary))
    assert main(["verify", "--trials", "5", "--no-lp", "--quiet", "--out", str(tmp_path / "v")]) == EXIT_VERIFY_FAILED
    table = pd.read_csv(tmp_path / "v" / "verify.csv")
    assert not table["passed"].all()


def test_residual_trace(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    pd.DataFrame({"epoch": [1, 2], "eps_k": [3.0, 1.0], "eta": [1.0, -0.5]}).to_csv(run / "metrics.csv", index=False)
    assert main(["residual-trace", "--run", str(run)]) == EXIT_OK
    trace = pd.read_csv(run / "residual_trace.csv")
    assert trace["epoch"].tolist() == [1, 2]
    assert main(["residual-trace", "--run", str(run)]) == EXIT_CONFIG


def test_residual_trace_without_metrics(tmp_path):
    assert main(["residual-trace", "--run", str(tmp_path)]) == EXIT_VERIFY_FAILED


def test_robustness_grid_needs_a_source(tmp_path):
    assert main(["robustness-grid", "--out", str(tmp_path / "g"), "--quiet"]) == EXIT_CONFIG


@pytest.mark.slow
def test_train_then_grid(tmp_path):
    from tests.conftest import TINY_RUN

    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY_RUN))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--out", str(run), "--quiet"]) == EXIT_OK
    assert main(["robustness-grid", "--run", str(run), "--resolution", "2", "--quiet"]) == EXIT_OK
    grid = read_matrix(run / "grid.csv")
    assert grid.shape == (2, 2)


def test_ctrl_c_has_its_own_exit_code(monkeypatch):
    def interrupted(args, argv):
        raise KeyboardInterrupt

    monkeypatch.setitem(cli.COMMANDS, "verify", interrupted)
    assert main(["verify", "--trials", "1"]) == EXIT_INTERRUPTED
