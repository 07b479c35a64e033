from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from fdia_dae.errors import ConfigError, DimensionError, ObservabilityError
from fdia_dae.estimation import (
    EstimationResult,
    MeasurementVector,
    ac_estimate,
    bdd_check,
    dc_estimate,
    dc_jacobian,
    noise_sigmas,
    objective,
    synthesize,
    write_trace_csv,
)
from fdia_dae.grid import MeasurementType, StateVector, measure
from fdia_dae.powerflow import LoadScenario, solve


@pytest.fixture(scope="module")
def ieee30_state(ieee30) -> StateVector:
    return solve(ieee30, LoadScenario.uniform(0, 30, 1.05)).state


def _observable(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    while True:
        h = rng.normal(size=(m, n))
        if np.linalg.matrix_rank(h) == n:
            return h


def test_dc_identity_and_mean() -> None:
    z = np.array([0.3, -1.2, 4.0])
    res = dc_estimate(np.eye(3), MeasurementVector(z, np.ones(3)))
    assert np.allclose(res.x_est, z)
    res = dc_estimate(np.array([[1.0], [1.0]]), MeasurementVector([0.0, 2.0], [1.0, 1.0]))
    assert res.x_est == pytest.approx([1.0])


def test_dc_matches_pseudo_inverse_oracle() -> None:
    rng = np.random.default_rng(11)
    h = _observable(rng, 6, 3)
    w = rng.uniform(0.5, 4.0, 6)
    z = rng.normal(size=6)
    res = dc_estimate(h, MeasurementVector(z, w))
    sw = np.sqrt(w)
    oracle = np.linalg.pinv(h * sw[:, None]) @ (z * sw)
    assert np.allclose(res.x_est, oracle, atol=1e-10)
    # Residual is W-orthogonal to range(H).
    assert np.allclose(h.T @ (w * res.residual), 0.0, atol=1e-10)


def test_dc_exact_on_noise_free_data() -> None:
    rng = np.random.default_rng(5)
    for _ in range(100):
        h = _observable(rng, 12, 5)
        x = rng.normal(size=5)
        res = dc_estimate(h, MeasurementVector(h @ x, rng.uniform(0.5, 2.0, 12)))
        assert np.max(np.abs(res.x_est - x)) < 1e-10


def test_dc_singular_gain() -> None:
    h = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(ObservabilityError):
        dc_estimate(h, MeasurementVector(np.ones(3), np.ones(3)))


def test_dc_weight_scaling_invariance() -> None:
    rng = np.random.default_rng(2)
    h = _observable(rng, 8, 3)
    z = rng.normal(size=8)
    w = rng.uniform(1.0, 3.0, 8)
    a = dc_estimate(h, MeasurementVector(z, w))
    b = dc_estimate(h, MeasurementVector(z, 7.5 * w))
    assert np.allclose(a.x_est, b.x_est, atol=1e-10)


def test_measurement_vector_validation() -> None:
    with pytest.raises(DimensionError):
        MeasurementVector([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        MeasurementVector([1.0], [0.0])


def test_objective_examples(three_bus) -> None:
    x = StateVector.flat(3)
    h = measure(three_bus, x)
    m = three_bus.n_measurements
    assert objective(three_bus, MeasurementVector(h, np.ones(m)), x) == 0.0
    z = h.copy()
    z[0] += 3.0
    z[1] += 4.0
    assert objective(three_bus, MeasurementVector(z, np.ones(m)), x) == pytest.approx(25.0)
    assert objective(three_bus, MeasurementVector(z, 2 * np.ones(m)), x) == pytest.approx(50.0)
    with pytest.raises(DimensionError):
        objective(three_bus, MeasurementVector(z[:-1], np.ones(m - 1)), x)


def test_ac_noise_free_recovers_power_flow_state(ieee30, ieee30_state) -> None:
    sig = noise_sigmas(ieee30.measurement_plan)
    meas = MeasurementVector.from_sigmas(measure(ieee30, ieee30_state), sig)
    res = ac_estimate(ieee30, meas)
    assert res.converged
    assert np.max(np.abs(res.x_est.as_array() - ieee30_state.as_array())) < 1e-6
    assert res.objective < 1e-10


def test_ac_flat_start_already_optimal(three_bus) -> None:
    flat = StateVector.flat(3)
    meas = MeasurementVector(measure(three_bus, flat), np.ones(three_bus.n_measurements))
    res = ac_estimate(three_bus, meas, x0=flat)
    assert res.iterations == 1
    assert res.objective == 0.0


def test_ac_objective_non_increasing_and_noise_envelope(ieee30, ieee30_state) -> None:
    rng = np.random.default_rng(21)
    meas = synthesize(ieee30, ieee30_state, rng)
    res = ac_estimate(ieee30, meas)
    values = [obj for _, obj, _ in res.trace]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(values, values[1:]))
    # Generous 3-sigma style envelope on the state error.
    assert np.max(np.abs(res.x_est.as_array() - ieee30_state.as_array())) < 3 * 0.01
    # Gradient H^T W r vanishes at the optimum.
    from fdia_dae.grid import jacobian

    h = jacobian(ieee30, res.x_est)
    grad = h.T @ (meas.weights * res.residual)
    assert np.max(np.abs(grad)) < 1e-3 * np.max(meas.weights)


def test_ac_weight_scaling_invariance(ieee30, ieee30_state) -> None:
    rng = np.random.default_rng(4)
    meas = synthesize(ieee30, ieee30_state, rng)
    a = ac_estimate(ieee30, meas)
    b = ac_estimate(ieee30, MeasurementVector(meas.z, 10.0 * meas.weights))
    assert np.allclose(a.x_est.as_array(), b.x_est.as_array(), atol=1e-7)


def test_bdd_threshold_and_verdicts() -> None:
    res = EstimationResult(
        x_est=np.zeros(1), objective=0.0, residual=np.zeros(3), iterations=1, converged=True, n_states=1
    )
    meas = MeasurementVector(np.zeros(3), np.ones(3))
    verdict = bdd_check(res, meas, 0.05)
    assert verdict.dof == 2
    assert verdict.threshold == pytest.approx(5.991, abs=1e-3)
    assert verdict.passed
    for alpha in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigError):
            bdd_check(res, meas, alpha)


def test_bdd_gross_error_detected(ieee30, ieee30_state) -> None:
    rng = np.random.default_rng(9)
    meas = synthesize(ieee30, ieee30_state, rng)
    sig = noise_sigmas(ieee30.measurement_plan)
    row = next(i for i, m in enumerate(ieee30.measurement_plan) if m.kind is MeasurementType.P_FLOW)
    z = meas.z.copy()
    z[row] += 50 * sig[row]
    bad = meas.with_z(z)
    assert not bdd_check(ac_estimate(ieee30, bad), bad).passed


def test_bdd_false_alarm_rate_dc(ieee30) -> None:
    h = dc_jacobian(ieee30)
    rng = np.random.default_rng(1234)
    sigma = 0.01
    x = rng.normal(0.0, 0.1, h.shape[1])
    rejections = 0
    trials = 2000
    for _ in range(trials):
        z = h @ x + rng.normal(0.0, sigma, h.shape[0])
        meas = MeasurementVector.from_sigmas(z, np.full(h.shape[0], sigma))
        if not bdd_check(dc_estimate(h, meas), meas, 0.05).passed:
            rejections += 1
    assert 0.03 <= rejections / trials <= 0.07


def test_dc_jacobian_shape(ieee30) -> None:
    h = dc_jacobian(ieee30)
    assert h.shape == (30 + 41, 29)


def test_write_trace_csv(tmp_path: Path, three_bus) -> None:
    flat = StateVector.flat(3)
    truth = StateVector(theta=[0.0, -0.02, -0.05], v=[1.02, 1.01, 0.98])
    meas = MeasurementVector(measure(three_bus, truth), np.ones(three_bus.n_measurements))
    res = ac_estimate(three_bus, meas, x0=flat)
    path = tmp_path / "trace.csv"
    write_trace_csv(res, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["iteration", "objective", "step_norm"]
    assert len(frame) == len(res.trace)
