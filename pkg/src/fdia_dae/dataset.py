"""Windowed training corpus.

Each sample holds `w` consecutive states: the first w-1 rows are normal
(optionally AWGN-perturbed) and the last row is attacked. Targets are the
clean states.

Container layout (little-endian)::

    header  "<8sHIIIII"  magic b"FDIAWIN1", version, w, n_states,
                         n_train, n_val, n_test
    then for train, val, test in order:
        inputs   float64 (count, w, n_states)
        targets  float64 (count, w, n_states)
        masks    uint8   (count, n_states)
        hours    int64   (count,)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .attack import AttackRecord, StateAttacker
from .errors import AttackRejectedError, ConfigError, DimensionError, ModelFileError, ModelVersionError
from .grid import StateVector
from .log import get_logger

logger = get_logger("dataset")

DATASET_MAGIC = b"FDIAWIN1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sHIIIII")
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)
STD_FLOOR = 1e-12

Json = Dict[str, Any]


@dataclass(eq=False)
class WindowSample:
    inputs: np.ndarray
    target: np.ndarray
    attack_mask: np.ndarray
    hour: int


@dataclass(eq=False)
class WindowSet:
    """Array-backed list of windows; `hours` is the hour of each last row."""

    inputs: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    hours: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        self.masks = np.asarray(self.masks, dtype=bool)
        self.hours = np.asarray(self.hours, dtype=np.int64)
        if self.inputs.ndim != 3 or self.inputs.shape != self.targets.shape:
            raise DimensionError(
                f"inputs {self.inputs.shape} and targets {self.targets.shape} must be equal (N, w, n)"
            )
        count, _, n_states = self.inputs.shape
        if self.masks.shape != (count, n_states) or self.hours.shape != (count,):
            raise DimensionError("masks/hours do not match the number of windows")

    @classmethod
    def empty(cls, w: int, n_states: int) -> "WindowSet":
        return cls(
            inputs=np.zeros((0, w, n_states)),
            targets=np.zeros((0, w, n_states)),
            masks=np.zeros((0, n_states), dtype=bool),
            hours=np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample], w: int, n_states: int) -> "WindowSet":
        if not samples:
            return cls.empty(w, n_states)
        return cls(
            inputs=np.stack([s.inputs for s in samples]),
            targets=np.stack([s.target for s in samples]),
            masks=np.stack([s.attack_mask for s in samples]),
            hours=np.array([s.hour for s in samples], dtype=np.int64),
        )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def __getitem__(self, index: int) -> WindowSample:
        return WindowSample(
            inputs=self.inputs[index],
            target=self.targets[index],
            attack_mask=self.masks[index],
            hour=int(self.hours[index]),
        )

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def w(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def n_states(self) -> int:
        return int(self.inputs.shape[2])

    def take(self, index: np.ndarray) -> "WindowSet":
        index = np.asarray(index, dtype=int)
        return WindowSet(
            inputs=self.inputs[index],
            targets=self.targets[index],
            masks=self.masks[index],
            hours=self.hours[index],
        )


@dataclass(eq=False)
class DatasetSplit:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    fractions: Tuple[float, float, float] = DEFAULT_FRACTIONS

    @property
    def counts(self) -> Tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    @property
    def w(self) -> int:
        return self.train.w

    @property
    def n_states(self) -> int:
        return self.train.n_states


@dataclass(eq=False)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.std = np.asarray(self.std, dtype=float).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise DimensionError("normalizer mean and std lengths differ")
        if np.any(self.std <= 0.0):
            raise ValueError("normalizer std must be positive")

    @property
    def n_states(self) -> int:
        return int(self.mean.size)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.std + self.mean

    def apply_set(self, windows: WindowSet) -> WindowSet:
        return WindowSet(
            inputs=self.apply(windows.inputs),
            targets=self.apply(windows.targets),
            masks=windows.masks,
            hours=windows.hours,
        )

    def to_json(self) -> Json:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def coordinate_scale(states: np.ndarray) -> np.ndarray:
    """Per-coordinate std of a (T, n) state block; constant coordinates get 0."""

    states = np.atleast_2d(np.asarray(states, dtype=float))
    scale = states.std(axis=0)
    scale[scale < STD_FLOOR] = 0.0
    return scale


def build_windows(
    states: Sequence[StateVector],
    w: int,
    attacker: Optional[StateAttacker],
    awgn_sigma: float,
    rng: np.random.Generator,
    *,
    hours: Optional[Sequence[int]] = None,
    stride: int = 1,
    noise_scale: Optional[np.ndarray] = None,
    attack_fraction: float = 1.0,
    audit_fraction: float = 1.0,
    limit: Optional[int] = None,
    starts: Optional[Sequence[int]] = None,
    on_record: Optional[Callable[[int, AttackRecord], None]] = None,
) -> WindowSet:
    """Slide a window of `w` states over a trajectory.

    `awgn_sigma` is in normalized units: row noise is
    `awgn_sigma * noise_scale * N(0, 1)` with `noise_scale` the per-coordinate
    std of `states` unless given. The attacked last row is `x_true + c`; for
    an `audit_fraction` share of windows the attack is also pushed through
    noisy measurements, AC estimation and the chi-square check by the
    attacker, otherwise it is only sampled. Windows whose hours are not
    contiguous are not formed. `on_record` receives every audited attack.

    `starts` lists explicit first-row positions (see `spread_starts`) and
    replaces the `stride` walk.
    """

    if w < 2:
        raise ConfigError("window size must be at least 2")
    if awgn_sigma < 0.0:
        raise ConfigError("awgn_sigma must be non-negative")
    if stride < 1:
        raise ConfigError("stride must be at least 1")
    if not 0.0 <= attack_fraction <= 1.0 or not 0.0 <= audit_fraction <= 1.0:
        raise ConfigError("attack_fraction and audit_fraction must lie in [0, 1]")
    if len(states) < w:
        raise ConfigError(f"need at least {w} states for a window, got {len(states)}")
    if attacker is None and attack_fraction > 0.0:
        raise ConfigError("an attacker is required when attack_fraction > 0")

    block = np.stack([x.as_array() for x in states])
    n_states = block.shape[1]
    hour_index = np.arange(len(states)) if hours is None else np.asarray(hours, dtype=np.int64)
    if hour_index.shape != (len(states),):
        raise DimensionError("hours must have one entry per state")
    scale = coordinate_scale(block) if noise_scale is None else np.asarray(noise_scale, dtype=float)
    if scale.shape != (n_states,):
        raise DimensionError(f"noise_scale must have {n_states} entries")

    if starts is None:
        positions: Sequence[int] = range(0, len(states) - w + 1, stride)
    else:
        positions = [int(s) for s in starts]
        if any(s < 0 or s > len(states) - w for s in positions):
            raise ConfigError(f"window starts must lie in [0, {len(states) - w}]")

    samples: List[WindowSample] = []
    skipped = 0
    for start in positions:
        end = start + w - 1
        if hour_index[end] - hour_index[start] != w - 1:
            continue
        target = block[start : end + 1].copy()
        inputs = target.copy()
        if awgn_sigma > 0.0:
            inputs[: w - 1] += awgn_sigma * scale * rng.normal(0.0, 1.0, size=(w - 1, n_states))

        mask = np.zeros(n_states, dtype=bool)
        if attacker is not None and rng.random() < attack_fraction:
            try:
                if rng.random() < audit_fraction:
                    record = attacker.attack(states[end], rng)
                    spec = record.spec
                    if on_record is not None:
                        on_record(int(hour_index[end]), record)
                else:
                    spec = attacker.sample(rng)
            except AttackRejectedError as exc:
                skipped += 1
                logger.warning(
                    "dataset.window skipped hour=%d reason=%s", int(hour_index[end]), exc
                )
                continue
            inputs[w - 1] = target[w - 1] + spec.c
            mask = spec.c != 0.0

        samples.append(
            WindowSample(inputs=inputs, target=target, attack_mask=mask, hour=int(hour_index[end]))
        )
        if limit is not None and len(samples) >= limit:
            break

    logger.info("dataset.build windows=%d skipped=%d w=%d", len(samples), skipped, w)
    return WindowSet.from_samples(samples, w, n_states)


def spread_starts(n_positions: int, w: int, count: int) -> np.ndarray:
    """`count` window starts spread evenly over a trajectory of `n_positions` states.

    Starts are rounded to whole positions and deduplicated, so fewer than
    `count` come back when the trajectory is too short to hold them apart.
    """

    if w < 2:
        raise ConfigError("window size must be at least 2")
    if count < 1:
        raise ConfigError("count must be at least 1")
    last = n_positions - w
    if last < 0:
        raise ConfigError(f"need at least {w} states for a window, got {n_positions}")
    if count == 1:
        return np.zeros(1, dtype=np.int64)
    return np.unique(np.linspace(0, last, count).round().astype(np.int64))


def spread_gap(starts: Sequence[int], w: int) -> int:
    """Windows that can straddle one boundary when starts are at least min(diff) apart."""

    diffs = np.diff(np.sort(np.asarray(starts, dtype=np.int64)))
    spacing = int(diffs[diffs > 0].min()) if np.any(diffs > 0) else 1
    return math.ceil((w - 1) / spacing)


def thin(windows: WindowSet, count: int) -> WindowSet:
    """Keep `count` windows evenly spaced in hour order."""

    if count >= len(windows):
        return windows
    order = np.argsort(windows.hours, kind="stable")
    keep = np.linspace(0, len(windows) - 1, count).round().astype(int)
    return windows.take(order[keep])


def boundary_gap(windows: WindowSet) -> int:
    """Windows that straddle one temporal boundary: ceil((w - 1) / stride)."""

    if len(windows) < 2:
        return windows.w - 1
    diffs = np.diff(np.sort(windows.hours))
    positive = diffs[diffs > 0]
    stride = int(positive.min()) if positive.size else 1
    return math.ceil((windows.w - 1) / stride)


def _split_counts(n: int, fractions: Tuple[float, float, float]) -> Tuple[int, int, int]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


def split(
    samples: WindowSet,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    boundary_mode: str = "temporal",
    *,
    gap: Optional[int] = None,
) -> DatasetSplit:
    """Ordered train/val/test split by hour.

    `temporal` drops the windows whose hours overlap the previous block, so
    the requested fractions apply to `N - 2 * gap` windows, with `gap` taken
    from `boundary_gap` unless the caller knows a tighter bound.
    `blocked` cuts contiguous blocks with no purge.
    """

    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be three positive values summing to 1, got {fr}")
    if boundary_mode not in ("temporal", "blocked"):
        raise ConfigError(f"unknown boundary mode {boundary_mode!r}")

    order = np.argsort(samples.hours, kind="stable")
    if boundary_mode == "blocked":
        gap = 0
    elif gap is None:
        gap = boundary_gap(samples)
    elif gap < 0:
        raise ConfigError("gap must be non-negative")
    usable = len(samples) - 2 * gap
    counts = _split_counts(max(usable, 0), fr)  # type: ignore[arg-type]
    if min(counts) <= 0:
        raise ConfigError(
            f"too few samples ({len(samples)}) for fractions {fr} in {boundary_mode} mode"
        )

    blocks: List[np.ndarray] = []
    pos = 0
    for block_index, count in enumerate(counts):
        if block_index and boundary_mode == "temporal":
            last_hour = samples.hours[blocks[-1][-1]]
            while pos < len(order) and samples.hours[order[pos]] - (samples.w - 1) <= last_hour:
                pos += 1
        chosen = order[pos : pos + count]
        if chosen.size < count:
            raise ConfigError("too few samples left after purging boundary windows")
        blocks.append(chosen)
        pos += count

    out = DatasetSplit(
        train=samples.take(blocks[0]),
        val=samples.take(blocks[1]),
        test=samples.take(blocks[2]),
        fractions=fr,  # type: ignore[arg-type]
    )
    logger.info(
        "dataset.split mode=%s train=%d val=%d test=%d", boundary_mode, *out.counts
    )
    return out


def fit_normalizer(train: WindowSet | np.ndarray) -> Normalizer:
    """Z-score statistics of the training inputs, per state coordinate."""

    values = train.inputs if isinstance(train, WindowSet) else np.asarray(train, dtype=float)
    if values.size == 0:
        raise ConfigError("cannot fit a normalizer on an empty training set")
    flat = values.reshape(-1, values.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    constant = std < STD_FLOOR
    if np.any(constant):
        logger.warning(
            "dataset.normalizer constant coordinates=%s std clamped to 1",
            np.flatnonzero(constant).tolist(),
        )
        std = np.where(constant, 1.0, std)
    return Normalizer(mean=mean, std=std)


def save_dataset(path: str | Path, data: DatasetSplit) -> None:
    path = Path(path)
    parts = [
        _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, data.w, data.n_states, *data.counts)
    ]
    for windows in (data.train, data.val, data.test):
        parts.append(windows.inputs.astype("<f8").tobytes())
        parts.append(windows.targets.astype("<f8").tobytes())
        parts.append(windows.masks.astype("u1").tobytes())
        parts.append(windows.hours.astype("<i8").tobytes())
    path.write_bytes(b"".join(parts))


def load_dataset(path: str | Path) -> DatasetSplit:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ModelFileError(f"dataset {path} is truncated")
    magic, version, w, n_states, *counts = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ModelFileError(f"{path} is not a window dataset")
    if version != DATASET_VERSION:
        raise ModelVersionError(f"dataset version {version}, expected {DATASET_VERSION}")

    offset = _HEADER.size
    sets: List[WindowSet] = []
    for count in counts:
        arrays = []
        for dtype, shape in (
            ("<f8", (count, w, n_states)),
            ("<f8", (count, w, n_states)),
            ("u1", (count, n_states)),
            ("<i8", (count,)),
        ):
            size = int(np.prod(shape)) * np.dtype(dtype).itemsize
            if offset + size > len(raw):
                raise ModelFileError(f"dataset {path} is truncated")
            flat = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=offset)
            arrays.append(flat.reshape(shape))
            offset += size
        sets.append(WindowSet(inputs=arrays[0], targets=arrays[1], masks=arrays[2], hours=arrays[3]))
    if offset != len(raw):
        raise ModelFileError(f"dataset {path} has {len(raw) - offset} trailing bytes")
    return DatasetSplit(train=sets[0], val=sets[1], test=sets[2])


def write_manifest(path: str | Path, manifest: Json) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Json:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def write_trajectory_csv(
    path: str | Path, states: Sequence[StateVector], hours: Sequence[int], labels: Sequence[str]
) -> None:
    frame = pd.DataFrame(np.stack([x.as_array() for x in states]), columns=list(labels))
    frame.insert(0, "hour", list(hours))
    frame.to_csv(path, index=False)
