import json
from pathlib import Path

import pytest

from src.config import (
    Config, apply_overrides, apply_preset, config_from_dict, default_output_root, ensure_valid, load_config,
    save_config, validate_config,
)
from src.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_match_published_ratios():
    cfg = Config()
    assert (cfg.dropout.alpha, cfg.dropout.beta, cfg.dropout.gamma) == (0.2, 0.2, 0.99)
    assert validate_config(cfg) == []


def test_unknown_keys_are_reported_per_field():
    with pytest.raises(ConfigError) as err:
        config_from_dict({"dropout": {"alpa": 0.3}, "bogus": 1})
    assert "dropout.alpa: unknown key" in err.value.problems
    assert "bogus: unknown key" in err.value.problems


def test_alpha_one_is_rejected():
    cfg = apply_overrides(Config(), {"dropout.alpha": 1.0})
    problems = validate_config(cfg)
    assert any(p.startswith("dropout.alpha=1.0") for p in problems)
    with pytest.raises(ConfigError):
        ensure_valid(cfg)


def test_every_bad_field_is_listed():
    cfg = config_from_dict({"env": {"name": "hopper", "c_mass": 2.0}, "rollout": {"horizon": 0}})
    problems = validate_config(cfg)
    assert len(problems) == 3


def test_overrides_parse_json_strings():
    cfg = apply_overrides(Config(), {"dropout.alpha": "0.3", "ensemble.hidden": "[32, 32]"})
    assert cfg.dropout.alpha == 0.3
    assert cfg.ensemble.hidden == [32, 32]


def test_overrides_leave_the_original_alone():
    base = Config()
    apply_overrides(base, {"schedule.epochs": 3})
    assert base.schedule.epochs == 30


def test_unknown_override_key():
    with pytest.raises(ConfigError):
        apply_overrides(Config(), {"rollout.depth": 3})


def test_presets():
    cfg = apply_preset(Config(), "robust")
    assert (cfg.dropout.alpha, cfg.dropout.beta) == (0.4, 0.1)
    with pytest.raises(ConfigError):
        apply_preset(Config(), "reckless")


def test_file_round_trip(tmp_path):
    cfg = apply_overrides(Config(), {"env.name": "cartpole", "seed": 11})
    path = tmp_path / "run.json"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_configs_are_valid():
    for name in ("pendulum", "point_mass", "cartpole"):
        cfg = ensure_valid(load_config(CONFIG_DIR / f"{name}.json"))
        assert cfg.env.name == name


def test_output_root_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MBDP_OUTPUT_ROOT", str(tmp_path))
    assert default_output_root() == tmp_path
    monkeypatch.delenv("MBDP_OUTPUT_ROOT")
    assert str(default_output_root()) == "runs"


def test_snapshot_is_json_serialisable():
    json.dumps(Config().to_dict())


def test_model_phase_needs_at_least_one_update_per_step():
    cfg = apply_overrides(Config(), {"schedule.model_updates_per_env_step": 0})
    problems = validate_config(cfg)
    assert problems == ["schedule.model_updates_per_env_step=0: expected an integer >= 1"]
    assert validate_config(apply_overrides(Config(), {"schedule.policy_updates_per_env_step": 0})) == []
