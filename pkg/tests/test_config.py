from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from fdia_dae.config import apply_override, config_from_dict, load_config
from fdia_dae.errors import ConfigError


def _write(tmp_path: Path, data) -> Path:
    path = tmp_path / "run.yml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_defaults_and_round_trip(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.delenv("FDIA_OUTPUT_DIR", raising=False)
    cfg = load_config(_write(tmp_path, {"seed": 7, "dataset": {"window": 4}}))
    assert cfg.seed == 7
    assert cfg.dataset.window == 4
    assert cfg.dataset.sample_count == 1000
    assert cfg.train.units == [32, 16, 32]
    assert cfg.dataset.span_hours == 8760
    assert (cfg.histogram.low, cfg.histogram.high, cfg.histogram.bins) == (0.0, 0.05, 50)
    again = config_from_dict(json.loads(cfg.to_json()))
    assert again == cfg


def test_overrides_parse_yaml_scalars(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.delenv("FDIA_OUTPUT_DIR", raising=False)
    cfg = load_config(
        _write(tmp_path, {"seed": 1}),
        ["train.epochs=3", "attack.targets=[1, 2]", "attack.mode=targeted", "train.resume=true"],
    )
    assert cfg.train.epochs == 3
    assert cfg.attack.targets == [1, 2]
    assert cfg.train.resume is True


def test_seed_comes_from_override_alone(monkeypatch) -> None:
    monkeypatch.delenv("FDIA_OUTPUT_DIR", raising=False)
    assert load_config(None, ["seed=5"]).seed == 5


def test_missing_seed_rejected(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="seed"):
        load_config(_write(tmp_path, {"dataset": {"window": 5}}))


@pytest.mark.parametrize(
    "data, match",
    [
        ({"seed": 1, "bogus": 2}, "unknown config keys: bogus"),
        ({"seed": 1, "dataset": {"windw": 5}}, "dataset.windw"),
        ({"seed": 1, "dataset": {"window": "five"}}, "dataset.window"),
        ({"seed": 1, "dataset": {"window": 1}}, "window"),
        ({"seed": 1, "dataset": {"fractions": [0.5, 0.5, 0.5]}}, "fractions"),
        ({"seed": 1, "attack": {"mode": "targeted"}}, "targets"),
        ({"seed": 1, "grid": {"alpha": 1.5}}, "alpha"),
        ({"seed": 1, "train": {"units": [32, 16]}}, "units"),
        ({"seed": 1, "train": {"lr_decay": 0.0}}, "lr_decay"),
        ({"seed": 1, "dataset": {"span_hours": -1}}, "span_hours"),
        ({"seed": True}, "seed"),
    ],
)
def test_invalid_documents(data, match) -> None:
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_bad_override_syntax() -> None:
    with pytest.raises(ConfigError):
        apply_override({}, "train.epochs")
    with pytest.raises(ConfigError):
        apply_override({"train": 3}, "train.epochs=4")


def test_env_overrides_output_dir(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.setenv("FDIA_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    cfg = load_config(_write(tmp_path, {"seed": 1, "output_dir": "runs/x"}))
    assert cfg.output_path == tmp_path / "elsewhere"


def test_referenced_paths_checked(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.delenv("FDIA_OUTPUT_DIR", raising=False)
    path = _write(tmp_path, {"seed": 1, "loads": {"csv_path": str(tmp_path / "none.csv")}})
    with pytest.raises(ConfigError, match="loads.csv_path"):
        load_config(path)
    assert load_config(path, check_paths=False).loads.csv_path.endswith("none.csv")


def test_unreadable_config(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yml")
    bad = tmp_path / "bad.yml"
    bad.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_unit_presets() -> None:
    cfg = config_from_dict({"seed": 0, "train": {"units": "full"}})
    assert cfg.train.units == [128, 64, 128]
    assert config_from_dict({"seed": 0}).train.units == [32, 16, 32]
    with pytest.raises(ConfigError, match="preset"):
        config_from_dict({"seed": 0, "train": {"units": "huge"}})
