from __future__ import annotations

import json

import numpy as np
import pytest

from fdia_dae.errors import DimensionError
from fdia_dae.streaming import (
    iter_outcome_lines,
    iter_state_events,
    run_correction_stream,
    state_from_event,
)


class HoldLastModel:
    def __init__(self, w: int, n_states: int) -> None:
        self.w = w
        self._n = n_states

    @property
    def n_states(self) -> int:
        return self._n

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        out = np.array(windows, copy=True)
        out[:, -1] = out[:, -2]
        return out


def _line(**event) -> str:
    return json.dumps(event) + "\n"


def test_iter_state_events_skips_bad_lines() -> None:
    lines = ['{"state": [0, 1]}\n', "\n", "not json\n", "[1, 2]\n", '{"kind": "normal"}\n']
    events = list(iter_state_events(lines))
    assert events == [{"state": [0, 1]}, {"kind": "normal"}]


def test_state_from_event_forms() -> None:
    ts, kind, x = state_from_event({"timestep": 3, "kind": "attacked", "theta": [0.0, -0.1], "v": [1.0, 0.98]}, 2)
    assert (ts, kind) == (3, "attacked")
    assert x.v.tolist() == [1.0, 0.98]
    _, kind, x = state_from_event({"state": [0.0, -0.1, 1.0, 0.98]}, 2)
    assert kind is None
    assert x.theta.tolist() == [0.0, -0.1]


@pytest.mark.parametrize(
    "event, error",
    [
        ({"kind": "weird", "state": [0.0, 1.0]}, ValueError),
        ({"timestep": "3", "state": [0.0, 1.0]}, ValueError),
        ({"theta": [0.0]}, ValueError),
        ({"state": [0.0, 0.0, 1.0, 1.0]}, DimensionError),
    ],
)
def test_state_from_event_rejects(event, error) -> None:
    with pytest.raises(error):
        state_from_event(event, 1)


def test_stream_with_kinds() -> None:
    lines = [
        _line(timestep=0, kind="normal", state=[0.0, -0.01, 1.0, 1.0]),
        _line(timestep=1, kind="normal", state=[0.0, -0.02, 1.0, 1.0]),
        "garbage\n",
        _line(timestep=2, kind="attacked", state=[0.0, 0.03, 1.0, 1.0]),
        _line(timestep=3, kind="attacked", state=[0.0, -0.02, 1.0, 1.5, 9.9]),
        _line(timestep=4, kind="attacked", state=[0.0, -0.02, 1.0, 1.0]),
    ]
    outcomes = list(run_correction_stream(HoldLastModel(3, 4), lines))
    assert [o.timestep for o in outcomes] == [2, 4]
    assert outcomes[0].flagged == (1,)
    assert outcomes[0].corrected.theta.tolist() == [0.0, -0.02]
    assert outcomes[1].flagged == ()


def test_stream_without_kinds_warms_up_first() -> None:
    lines = [_line(state=[0.0, -0.01 * k, 1.0, 1.0]) for k in range(5)]
    outcomes = list(run_correction_stream(HoldLastModel(3, 4), lines))
    assert len(outcomes) == 3
    out = list(iter_outcome_lines(outcomes))
    assert all(line.endswith("\n") for line in out)
    payload = json.loads(out[0])
    assert set(payload) == {"timestep", "corrected", "flagged", "deltas"}
