from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from fdia_dae.dataset import WindowSet
from fdia_dae.errors import DimensionError
from fdia_dae.pipeline import IdentificationThresholds
from fdia_dae.reports import (
    DEFAULT_RANGE,
    evaluate,
    histogram,
    identification,
    rmse,
    roc_sweep,
    write_histogram_csv,
    write_per_state_csv,
    write_predictions,
    write_report_json,
)


class LookupModel:
    """Returns stored outputs for a known input batch."""

    def __init__(self, outputs: np.ndarray) -> None:
        self.outputs = outputs
        self.w = outputs.shape[1]

    @property
    def n_states(self) -> int:
        return int(self.outputs.shape[2])

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        assert windows.shape == self.outputs.shape
        return self.outputs.copy()


def _test_set(count: int = 40, w: int = 4, n_bus: int = 3, seed: int = 0) -> WindowSet:
    rng = np.random.default_rng(seed)
    n = 2 * n_bus
    targets = np.concatenate(
        [rng.normal(0, 0.05, (count, w, n_bus)), rng.uniform(0.97, 1.03, (count, w, n_bus))], axis=2
    )
    targets[:, :, 0] = 0.0
    inputs = targets.copy()
    masks = np.zeros((count, n), dtype=bool)
    for k in range(count):
        chosen = rng.choice(np.arange(1, n), size=2, replace=False)
        masks[k, chosen] = True
        inputs[k, -1, chosen] += rng.choice([-0.03, 0.03], size=2)
    return WindowSet(inputs=inputs, targets=targets, masks=masks, hours=np.arange(count))


def test_perfect_model_scores_zero() -> None:
    test = _test_set()
    report, predictions = evaluate(LookupModel(test.targets), test, IdentificationThresholds())
    assert report.overall_rmse == 0.0
    assert report.corrected_rmse == 0.0
    assert report.attacked_rmse > 0.0
    assert report.histogram_counts[0] == test.inputs.size
    assert sum(report.histogram_counts) == test.inputs.size
    assert report.histogram_overflow == 0
    assert report.identification.accuracy == 1.0
    assert report.identification.tpr == 1.0
    assert report.identification.fpr == 0.0
    assert np.array_equal(predictions, test.targets)


def test_identity_model_flags_nothing() -> None:
    test = _test_set()
    report, _ = evaluate(LookupModel(test.inputs), test, IdentificationThresholds())
    assert report.corrected_rmse == pytest.approx(report.attacked_rmse)
    assert report.identification.tpr == 0.0
    assert report.identification.accuracy == 0.0
    assert sum(report.identification.fn) == int(test.masks.sum())


def test_report_recomputes_from_predictions() -> None:
    test = _test_set(seed=3)
    rng = np.random.default_rng(9)
    outputs = test.targets + rng.normal(0, 0.002, test.targets.shape)
    report, predictions = evaluate(LookupModel(outputs), test, IdentificationThresholds())
    assert report.overall_rmse == pytest.approx(rmse(predictions, test.targets))
    assert sum(report.histogram_counts) == test.inputs.size
    diff = predictions - test.targets
    assert report.histogram_overflow == int(np.count_nonzero(np.abs(diff) > DEFAULT_RANGE[1]))
    assert report.per_state_rmse[0] == 0.0
    assert report.n_windows == 40


def test_evaluate_rejects_mismatched_or_empty_sets() -> None:
    test = _test_set()
    with pytest.raises(DimensionError):
        evaluate(LookupModel(test.targets[:, :3]), test, IdentificationThresholds())
    with pytest.raises(DimensionError):
        evaluate(LookupModel(test.targets), WindowSet.empty(4, 6), IdentificationThresholds())


def test_histogram_examples() -> None:
    edges, counts, overflow = histogram(np.array([0.0015, -0.0049, 0.01]), bins=5, value_range=(0.0, 0.005))
    assert len(edges) == 6
    assert counts.tolist() == [0, 1, 0, 0, 2]
    assert overflow == 1
    with pytest.raises(ValueError):
        histogram(np.zeros(3), bins=0)


def test_default_histogram_range_holds_attack_sized_errors() -> None:
    test = _test_set()
    report, _ = evaluate(LookupModel(test.inputs), test, IdentificationThresholds())
    assert report.histogram_edges[-1] == pytest.approx(0.05)
    assert report.histogram_overflow == 0
    # Every uncorrected 0.03 offset lands away from the zero bin.
    assert sum(report.histogram_counts[1:]) == int(test.masks.sum())
    assert sum(report.histogram_counts) == test.inputs.size


def test_identification_accuracy_is_exact_match() -> None:
    attacked = np.array([[0.0, 0.05, 1.0, 1.0], [0.0, 0.0, 1.0, 1.05]])
    corrected = np.array([[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]])
    masks = np.array([[False, True, False, False], [False, True, False, True]])
    ident = identification(attacked, corrected, masks, IdentificationThresholds())
    assert ident.accuracy == 0.5
    assert ident.tp == [0, 1, 0, 1]
    assert ident.fn == [0, 1, 0, 0]
    assert ident.tpr == pytest.approx(2 / 3)


def test_roc_sweep_is_monotone() -> None:
    test = _test_set()
    rng = np.random.default_rng(2)
    corrected = test.targets[:, -1] + rng.normal(0, 0.01, test.targets[:, -1].shape)
    frame = roc_sweep(test.inputs[:, -1], corrected, test.masks, IdentificationThresholds())
    assert list(frame.columns) == ["factor", "theta_thresh", "v_thresh", "tpr", "fpr", "accuracy"]
    assert np.all(np.diff(frame["tpr"]) <= 0)
    assert np.all(np.diff(frame["fpr"]) <= 0)


def test_writers(tmp_path: Path) -> None:
    test = _test_set()
    report, predictions = evaluate(LookupModel(test.targets), test, IdentificationThresholds())
    write_report_json(report, tmp_path / "eval_report.json")
    write_histogram_csv(report, tmp_path / "histogram.csv")
    write_per_state_csv(report, tmp_path / "per_state.csv", labels=[f"s{k}" for k in range(6)])
    write_predictions(tmp_path / "predictions.npz", test.targets, predictions)

    payload = json.loads((tmp_path / "eval_report.json").read_text(encoding="utf-8"))
    assert payload["identification"]["accuracy"] == 1.0
    assert payload["thresholds"] == {"theta_thresh": 0.01, "v_thresh": 0.01}
    hist = pd.read_csv(tmp_path / "histogram.csv")
    assert hist["count"].sum() == test.inputs.size
    per_state = pd.read_csv(tmp_path / "per_state.csv")
    assert list(per_state.columns[:3]) == ["state_index", "label", "rmse"]
    with np.load(tmp_path / "predictions.npz") as arrays:
        assert np.array_equal(arrays["corrected"], predictions)
