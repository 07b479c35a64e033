from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .dataset import WindowSet
from .errors import DimensionError
from .log import get_logger
from .pipeline import IdentificationThresholds, Reconstructor

logger = get_logger("reports")

DEFAULT_BINS = 50
# Wide enough for attack-sized errors (|c| <= 0.05) to stay in range.
DEFAULT_RANGE = (0.0, 0.05)
ROC_FACTORS = np.geomspace(0.01, 10.0, 31)

Json = Dict[str, Any]


@dataclass
class Identification:
    accuracy: float
    tp: List[int]
    fp: List[int]
    fn: List[int]
    tn: List[int]
    tpr: float
    fpr: float


@dataclass
class EvalReport:
    overall_rmse: float
    per_state_rmse: List[float]
    mae: float
    mse: float
    attacked_rmse: float
    corrected_rmse: float
    error_reduction: float
    max_abs_error: float
    histogram_edges: List[float]
    histogram_counts: List[int]
    histogram_overflow: int
    identification: Identification
    n_windows: int
    thresholds: Json = field(default_factory=dict)

    def to_json(self) -> Json:
        return asdict(self)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if diff.size == 0:
        raise DimensionError("empty arrays")
    return math.sqrt(float(np.mean(diff * diff)))


def histogram(
    errors: np.ndarray, bins: int = DEFAULT_BINS, value_range: Tuple[float, float] = DEFAULT_RANGE
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Counts of |error| in fixed bins; values above the range land in the last bin.

    Returns (edges, counts, overflow) where overflow is how many values were
    clipped, so counts always sum to errors.size.
    """

    low, high = value_range
    if bins < 1 or not high > low:
        raise ValueError("histogram needs bins >= 1 and a non-empty range")
    values = np.abs(np.asarray(errors, dtype=float).reshape(-1))
    overflow = int(np.count_nonzero(values > high))
    counts, edges = np.histogram(np.clip(values, low, high), bins=bins, range=(low, high))
    return edges, counts, overflow


def confusion(
    flagged: np.ndarray, masks: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-state TP/FP/FN/TN counts over windows; both inputs are (N, n) booleans."""

    flagged = np.asarray(flagged, dtype=bool)
    masks = np.asarray(masks, dtype=bool)
    tp = np.sum(flagged & masks, axis=0)
    fp = np.sum(flagged & ~masks, axis=0)
    fn = np.sum(~flagged & masks, axis=0)
    tn = np.sum(~flagged & ~masks, axis=0)
    return tp, fp, fn, tn


def _rate(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def identification(
    attacked_rows: np.ndarray,
    corrected_rows: np.ndarray,
    masks: np.ndarray,
    thresholds: IdentificationThresholds,
) -> Identification:
    n_bus = attacked_rows.shape[1] // 2
    flagged = np.abs(attacked_rows - corrected_rows) > thresholds.per_state(n_bus)
    tp, fp, fn, tn = confusion(flagged, masks)
    exact = np.all(flagged == np.asarray(masks, dtype=bool), axis=1)
    return Identification(
        accuracy=float(exact.mean()) if exact.size else 0.0,
        tp=tp.tolist(),
        fp=fp.tolist(),
        fn=fn.tolist(),
        tn=tn.tolist(),
        tpr=_rate(tp.sum(), tp.sum() + fn.sum()),
        fpr=_rate(fp.sum(), fp.sum() + tn.sum()),
    )


def roc_sweep(
    attacked_rows: np.ndarray,
    corrected_rows: np.ndarray,
    masks: np.ndarray,
    base: IdentificationThresholds,
    factors: Sequence[float] = tuple(ROC_FACTORS),
) -> pd.DataFrame:
    """TPR/FPR for thresholds scaled from `base`."""

    rows = []
    for factor in factors:
        thresholds = base.scaled(float(factor))
        ident = identification(attacked_rows, corrected_rows, masks, thresholds)
        rows.append(
            {
                "factor": float(factor),
                "theta_thresh": thresholds.theta_thresh,
                "v_thresh": thresholds.v_thresh,
                "tpr": ident.tpr,
                "fpr": ident.fpr,
                "accuracy": ident.accuracy,
            }
        )
    return pd.DataFrame(rows)


def evaluate(
    model: Reconstructor,
    test: WindowSet,
    thresholds: IdentificationThresholds,
    *,
    bins: int = DEFAULT_BINS,
    value_range: Tuple[float, float] = DEFAULT_RANGE,
    slack_index: int = 0,
) -> Tuple[EvalReport, np.ndarray]:
    """Score reconstructions of the test windows in physical units.

    RMSE, MAE and the histogram cover every element of every window; the
    attacked/corrected RMSE and identification look at the last row only.
    Returns the report and the (N, w, n) predictions.
    """

    if len(test) == 0:
        raise DimensionError("test split is empty")
    if test.w != model.w or test.n_states != model.n_states:
        raise DimensionError(
            f"test windows ({test.w}, {test.n_states}) do not match model ({model.w}, {model.n_states})"
        )
    predictions = np.array(model.reconstruct(test.inputs), dtype=float)
    predictions[:, :, slack_index] = test.targets[:, :, slack_index]
    actual = test.targets
    diff = predictions - actual

    per_state = np.sqrt(np.mean(diff * diff, axis=(0, 1)))
    edges, counts, overflow = histogram(diff, bins, value_range)
    attacked_rmse = rmse(test.inputs[:, -1], actual[:, -1])
    corrected_rmse = rmse(predictions[:, -1], actual[:, -1])
    ident = identification(test.inputs[:, -1], predictions[:, -1], test.masks, thresholds)

    report = EvalReport(
        overall_rmse=rmse(predictions, actual),
        per_state_rmse=per_state.tolist(),
        mae=float(np.mean(np.abs(diff))),
        mse=float(np.mean(diff * diff)),
        attacked_rmse=attacked_rmse,
        corrected_rmse=corrected_rmse,
        error_reduction=_rate(attacked_rmse, corrected_rmse) if corrected_rmse else float("inf"),
        max_abs_error=float(np.max(np.abs(diff))),
        histogram_edges=edges.tolist(),
        histogram_counts=counts.tolist(),
        histogram_overflow=overflow,
        identification=ident,
        n_windows=len(test),
        thresholds={"theta_thresh": thresholds.theta_thresh, "v_thresh": thresholds.v_thresh},
    )
    logger.info(
        "reports.evaluate windows=%d overall_rmse=%.6f attacked_rmse=%.6f corrected_rmse=%.6f accuracy=%.4f",
        len(test),
        report.overall_rmse,
        attacked_rmse,
        corrected_rmse,
        ident.accuracy,
    )
    return report, predictions


def write_report_json(report: EvalReport, path: str | Path) -> None:
    text = json.dumps(report.to_json(), indent=2, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def write_histogram_csv(report: EvalReport, path: str | Path) -> None:
    edges = report.histogram_edges
    frame = pd.DataFrame(
        {"bin_low": edges[:-1], "bin_high": edges[1:], "count": report.histogram_counts}
    )
    frame.to_csv(path, index=False)


def write_per_state_csv(
    report: EvalReport, path: str | Path, labels: Optional[Sequence[str]] = None
) -> None:
    ident = report.identification
    frame = pd.DataFrame(
        {
            "state_index": range(len(report.per_state_rmse)),
            "rmse": report.per_state_rmse,
            "tp": ident.tp,
            "fp": ident.fp,
            "fn": ident.fn,
            "tn": ident.tn,
        }
    )
    if labels is not None:
        frame.insert(1, "label", list(labels))
    frame.to_csv(path, index=False)


def write_predictions(path: str | Path, actual: np.ndarray, corrected: np.ndarray) -> None:
    np.savez(path, actual=actual, corrected=corrected)
