"""JSON-lines codec for the online correction loop.

Input: one JSON object per line::

    {"timestep": 17, "kind": "attacked", "theta": [...], "v": [...]}
    {"state": [theta..., v...]}

`kind` is `normal` (trusted state fed to the queue) or `attacked`
(corrected by the model). When `kind` is missing, states fill the queue
until it is warm and are corrected afterwards.

Output: one JSON object per corrected state with `timestep`, `corrected`,
`flagged` and `deltas`.
"""

from __future__ import annotations

import json
from typing import Any, Dict, Iterable, Iterator, Optional, Tuple

from .errors import DimensionError, FdiaError
from .grid import StateVector
from .log import get_logger, log_json
from .pipeline import CorrectionOutcome, IdentificationThresholds, OnlineCorrector, Reconstructor

logger = get_logger("streaming")

Json = Dict[str, Any]

_KINDS = ("normal", "attacked")


def iter_state_events(lines: Iterable[str]) -> Iterator[Json]:
    """Decode JSON-lines; blank lines are ignored, malformed ones logged and skipped."""

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            ev = json.loads(line)
        except json.JSONDecodeError as exc:
            logger.warning("streaming.input malformed line=%d error=%s", lineno, exc.msg)
            continue
        if not isinstance(ev, dict):
            logger.warning("streaming.input line=%d is not an object", lineno)
            continue
        yield ev


def state_from_event(event: Json, n_bus: int) -> Tuple[Optional[int], Optional[str], StateVector]:
    kind = event.get("kind")
    if kind is not None and kind not in _KINDS:
        raise ValueError(f"unknown state kind {kind!r}")
    timestep = event.get("timestep")
    if timestep is not None and (isinstance(timestep, bool) or not isinstance(timestep, int)):
        raise ValueError("timestep must be an integer")

    if "state" in event:
        x = StateVector.from_array(event["state"])
    elif "theta" in event and "v" in event:
        x = StateVector(theta=event["theta"], v=event["v"])
    else:
        raise ValueError("event needs `state` or both `theta` and `v`")
    if x.n_bus != n_bus:
        raise DimensionError(f"state has {x.n_bus} buses, expected {n_bus}")
    return timestep, kind, x


def iter_outcome_lines(outcomes: Iterable[CorrectionOutcome]) -> Iterator[str]:
    for outcome in outcomes:
        yield json.dumps(outcome.to_json(), ensure_ascii=True) + "\n"


def run_correction_stream(
    model: Reconstructor,
    lines: Iterable[str],
    thresholds: Optional[IdentificationThresholds] = None,
    *,
    slack_index: int = 0,
) -> Iterator[CorrectionOutcome]:
    """Feed decoded events through an OnlineCorrector, yielding each correction."""

    corrector = OnlineCorrector(model, thresholds, slack_index=slack_index)
    n_bus = model.n_states // 2
    for ev in iter_state_events(lines):
        log_json(logger, "streaming.event", ev)
        try:
            timestep, kind, x = state_from_event(ev, n_bus)
        except (ValueError, TypeError) as exc:
            logger.warning("streaming.input rejected event=%s", exc)
            continue
        if kind == "normal" or (kind is None and not corrector.ready):
            corrector.push_trusted(x)
            continue
        try:
            outcome = corrector.correct(x, timestep)
        except FdiaError as exc:
            logger.warning("streaming.correct skipped timestep=%s reason=%s", timestep, exc)
            continue
        log_json(logger, "streaming.outcome", outcome.to_json())
        yield outcome
