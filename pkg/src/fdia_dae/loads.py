from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np
import pandas as pd

from .errors import ConfigError
from .log import get_logger
from .powerflow import LoadScenario

logger = get_logger("loads")

HOURS_PER_YEAR = 8760
PROFILE_CLIP = (0.4, 1.8)


def read_load_csv(path: str | Path) -> pd.DataFrame:
    """Read an hourly demand CSV with columns `timestamp, demand_mw`."""

    try:
        frame = pd.read_csv(path, skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot read load csv {path}: {exc}") from exc
    frame.columns = [str(c).strip() for c in frame.columns]
    missing = {"timestamp", "demand_mw"} - set(frame.columns)
    if missing:
        raise ConfigError(f"load csv {path} is missing columns {sorted(missing)}")
    demand = pd.to_numeric(frame["demand_mw"], errors="coerce")
    if demand.isna().any():
        raise ConfigError(f"load csv {path} has non-numeric demand values")
    if (demand <= 0).any():
        raise ConfigError(f"load csv {path} has non-positive demand values")
    frame["demand_mw"] = demand.astype(float)
    logger.debug("loads.read_csv path=%s rows=%d", str(path), len(frame))
    return frame[["timestamp", "demand_mw"]]


def demand_multipliers(demand: np.ndarray | pd.Series) -> np.ndarray:
    values = np.asarray(demand, dtype=float)
    if values.size == 0:
        raise ConfigError("empty demand series")
    return values / values.mean()


def synthetic_profile(
    hours: int,
    rng: np.random.Generator,
    *,
    daily_amplitude: float = 0.12,
    weekly_amplitude: float = 0.05,
    seasonal_amplitude: float = 0.10,
    noise_sigma: float = 0.015,
    ar_coeff: float = 0.9,
) -> np.ndarray:
    """Hourly load multipliers with daily, weekly and seasonal cycles.

    AR(1) noise gives hour-to-hour correlation. The result has mean 1 and is
    clipped to PROFILE_CLIP.
    """

    if hours <= 0:
        raise ConfigError("synthetic profile needs a positive number of hours")
    t = np.arange(hours, dtype=float)
    daily = -daily_amplitude * np.cos(2.0 * np.pi * (t - 4.0) / 24.0)
    weekend = ((t // 24) % 7) >= 5
    weekly = np.where(weekend, -weekly_amplitude, 0.0)
    seasonal = seasonal_amplitude * np.cos(2.0 * np.pi * t / HOURS_PER_YEAR)

    shocks = rng.normal(0.0, noise_sigma, size=hours)
    noise = np.empty(hours)
    level = 0.0
    for h in range(hours):
        level = ar_coeff * level + shocks[h]
        noise[h] = level

    profile = 1.0 + daily + weekly + seasonal + noise
    profile = profile / profile.mean()
    return np.clip(profile, *PROFILE_CLIP)


def build_scenarios(
    multipliers: np.ndarray,
    n_bus: int,
    rng: np.random.Generator,
    *,
    jitter: float = 0.02,
    start_hour: int = 0,
) -> List[LoadScenario]:
    """System-wide multiplier per hour times a per-bus uniform jitter."""

    if not 0.0 <= jitter < 1.0:
        raise ConfigError("jitter must lie in [0, 1)")
    multipliers = np.asarray(multipliers, dtype=float)
    per_bus = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(multipliers.size, n_bus))
    scales = multipliers[:, None] * per_bus
    return [
        LoadScenario(timestamp=start_hour + h, scale_p=scales[h])
        for h in range(multipliers.size)
    ]
