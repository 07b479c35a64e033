from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fdia_dae.errors import ConfigError
from fdia_dae.loads import build_scenarios, demand_multipliers, read_load_csv, synthetic_profile


def test_read_load_csv(tmp_path: Path) -> None:
    path = tmp_path / "load.csv"
    path.write_text("timestamp, demand_mw\n2020-01-01 00:00,100\n2020-01-01 01:00,300\n", encoding="utf-8")
    frame = read_load_csv(path)
    assert list(frame.columns) == ["timestamp", "demand_mw"]
    assert np.allclose(demand_multipliers(frame["demand_mw"]), [0.5, 1.5])


@pytest.mark.parametrize(
    "body",
    [
        "timestamp,load\n0,1\n",
        "timestamp,demand_mw\n0,abc\n",
        "timestamp,demand_mw\n0,-5\n",
    ],
)
def test_read_load_csv_rejects_bad_files(tmp_path: Path, body: str) -> None:
    path = tmp_path / "bad.csv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(ConfigError):
        read_load_csv(path)


def test_missing_csv(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        read_load_csv(tmp_path / "nope.csv")


def test_synthetic_profile_is_seeded_and_bounded() -> None:
    a = synthetic_profile(24 * 60, np.random.default_rng(3))
    b = synthetic_profile(24 * 60, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.mean() == pytest.approx(1.0, abs=1e-3)
    assert a.min() >= 0.4 and a.max() <= 1.8
    # Daily cycle: evening hours load more than the early morning.
    by_hour = a.reshape(-1, 24).mean(axis=0)
    assert by_hour[16] > by_hour[4]


def test_build_scenarios_jitter() -> None:
    rng = np.random.default_rng(0)
    scenarios = build_scenarios(np.array([1.0, 1.2]), 5, rng, jitter=0.02, start_hour=10)
    assert [s.timestamp for s in scenarios] == [10, 11]
    assert np.all(np.abs(scenarios[1].scale_p / 1.2 - 1.0) <= 0.02)
    with pytest.raises(ConfigError):
        build_scenarios(np.ones(2), 5, rng, jitter=1.5)
