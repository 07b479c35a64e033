from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Deque, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, QueueNotReadyError
from .grid import StateVector
from .log import get_logger

logger = get_logger("pipeline")

DEFAULT_THETA_THRESH = 0.01
DEFAULT_V_THRESH = 0.01

Json = Dict[str, Any]


class Reconstructor(Protocol):
    """Anything that maps physical (B, w, n) windows to reconstructed windows."""

    w: int

    @property
    def n_states(self) -> int: ...

    def reconstruct(self, windows: np.ndarray) -> np.ndarray: ...


class StateQueue:
    """The last w-1 trusted states, oldest first."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ConfigError("queue capacity must be at least 1")
        self.capacity = capacity
        self._items: Deque[StateVector] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def is_full(self) -> bool:
        return len(self._items) == self.capacity

    @property
    def newest(self) -> Optional[StateVector]:
        return self._items[-1] if self._items else None

    def push(self, x: StateVector) -> None:
        self._items.append(x)

    def clear(self) -> None:
        self._items.clear()

    def states(self) -> List[StateVector]:
        return list(self._items)

    def as_array(self) -> np.ndarray:
        return np.stack([x.as_array() for x in self._items])


@dataclass(frozen=True)
class IdentificationThresholds:
    theta_thresh: float = DEFAULT_THETA_THRESH
    v_thresh: float = DEFAULT_V_THRESH

    def __post_init__(self) -> None:
        if not (self.theta_thresh > 0.0 and self.v_thresh > 0.0):
            raise ConfigError("identification thresholds must be positive")

    def per_state(self, n_bus: int) -> np.ndarray:
        return np.concatenate([np.full(n_bus, self.theta_thresh), np.full(n_bus, self.v_thresh)])

    def scaled(self, factor: float) -> "IdentificationThresholds":
        return IdentificationThresholds(self.theta_thresh * factor, self.v_thresh * factor)


@dataclass(eq=False)
class CorrectionOutcome:
    corrected: StateVector
    flagged: Tuple[int, ...]
    deltas: np.ndarray
    timestep: Optional[int] = None

    def to_json(self) -> Json:
        return {
            "timestep": self.timestep,
            "corrected": self.corrected.to_json(),
            "flagged": list(self.flagged),
            "deltas": self.deltas.tolist(),
        }


def identify(
    attacked: StateVector, corrected: StateVector, thresholds: IdentificationThresholds
) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Flag every coordinate whose |attacked - corrected| exceeds its threshold."""

    if attacked.n_bus != corrected.n_bus:
        raise DimensionError("attacked and corrected states differ in size")
    deltas = np.abs(attacked.as_array() - corrected.as_array())
    flagged = np.flatnonzero(deltas > thresholds.per_state(attacked.n_bus))
    return tuple(int(k) for k in flagged), deltas


def warm_up(queue: StateQueue, states: Sequence[StateVector]) -> StateQueue:
    if len(states) < queue.capacity:
        raise QueueNotReadyError(
            f"warm-up needs {queue.capacity} trusted states, got {len(states)}"
        )
    queue.clear()
    for x in states[-queue.capacity :]:
        queue.push(x)
    return queue


def correct(
    model: Reconstructor,
    queue: StateQueue,
    attacked: StateVector,
    thresholds: IdentificationThresholds,
    *,
    slack_index: int = 0,
    timestep: Optional[int] = None,
) -> CorrectionOutcome:
    """Reconstruct the attacked state from [queue, attacked] and feed it back."""

    if not queue.is_full:
        raise QueueNotReadyError(
            f"queue holds {len(queue)} of {queue.capacity} states; warm up with trusted states first"
        )
    if queue.capacity != model.w - 1:
        raise DimensionError(f"queue capacity {queue.capacity} does not match window {model.w}")
    row = attacked.as_array()
    if row.size != model.n_states:
        raise DimensionError(f"state has {row.size} entries, model expects {model.n_states}")

    window = np.vstack([queue.as_array(), row])[None]
    out = np.array(model.reconstruct(window)[0, -1], dtype=float)
    out[slack_index] = 0.0
    try:
        corrected = StateVector.from_array(out)
    except ValueError as exc:
        raise NumericalError(f"model produced a non-physical state: {exc}") from exc

    flagged, deltas = identify(attacked, corrected, thresholds)
    queue.push(corrected)
    if flagged:
        logger.debug("pipeline.correct timestep=%s flagged=%s", timestep, list(flagged))
    return CorrectionOutcome(corrected=corrected, flagged=flagged, deltas=deltas, timestep=timestep)


class OnlineCorrector:
    """Sequential correction loop owning its queue."""

    def __init__(
        self,
        model: Reconstructor,
        thresholds: Optional[IdentificationThresholds] = None,
        *,
        slack_index: int = 0,
    ) -> None:
        self.model = model
        self.thresholds = thresholds or IdentificationThresholds()
        self.slack_index = slack_index
        self.queue = StateQueue(model.w - 1)
        self.steps = 0

    @property
    def ready(self) -> bool:
        return self.queue.is_full

    def push_trusted(self, x: StateVector) -> None:
        if x.as_array().size != self.model.n_states:
            raise DimensionError(
                f"state has {x.as_array().size} entries, model expects {self.model.n_states}"
            )
        self.queue.push(x)
        self.steps += 1

    def warm_up(self, states: Sequence[StateVector]) -> None:
        warm_up(self.queue, states)

    def correct(self, attacked: StateVector, timestep: Optional[int] = None) -> CorrectionOutcome:
        outcome = correct(
            self.model,
            self.queue,
            attacked,
            self.thresholds,
            slack_index=self.slack_index,
            timestep=self.steps if timestep is None else timestep,
        )
        self.steps += 1
        return outcome

    def reset(self) -> None:
        self.queue.clear()
        self.steps = 0
