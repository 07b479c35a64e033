from __future__ import annotations

import numpy as np
import pytest

from fdia_dae.casefile import load_case
from fdia_dae.errors import CaseFormatError, DimensionError, NetworkValidationError
from fdia_dae.grid import (
    Branch,
    Bus,
    BusKind,
    MeasurementKind,
    MeasurementType,
    NetworkModel,
    StateVector,
    build_ybus,
    jacobian,
    measure,
)
from fdia_dae.powerflow import LoadScenario, solve


def _two_bus(r: float = 0.0, x: float = 0.1) -> NetworkModel:
    return NetworkModel(
        [Bus(1, BusKind.SLACK), Bus(2, BusKind.PQ)],
        [Branch(0, 1, r, x)],
    )


def _random_state(model: NetworkModel, rng: np.random.Generator) -> StateVector:
    theta = rng.uniform(-0.3, 0.3, model.n_bus)
    theta[model.slack_index] = 0.0
    return StateVector(theta=theta, v=rng.uniform(0.92, 1.08, model.n_bus))


def test_bundled_ieee30_shape(ieee30) -> None:
    assert ieee30.n_bus == 30
    assert ieee30.n_branch == 41
    assert ieee30.n_states == 60
    assert ieee30.n_measurements == 172
    assert ieee30.buses[ieee30.slack_index].id == 1


def test_minimal_two_bus_case() -> None:
    model = load_case("bus 1 slack\nbus 2 pq 0.5\nbranch 1 2 0 0.1\n")
    assert model.n_bus == 2
    assert model.n_branch == 1


def test_ybus_zero_branches_is_zero() -> None:
    model = NetworkModel([Bus(1, BusKind.SLACK)], [])
    assert np.array_equal(build_ybus(model), np.zeros((1, 1), dtype=complex))


def test_ybus_two_bus_by_hand() -> None:
    expected = np.array([[-10j, 10j], [10j, -10j]])
    assert np.allclose(_two_bus().y_bus, expected, atol=1e-12)


def test_ybus_ieee30_symmetric(ieee30) -> None:
    y = ieee30.y_bus
    assert np.max(np.abs(y - y.T)) == 0.0


def test_flat_start_lossless_measurements() -> None:
    model = _two_bus()
    z = measure(model, StateVector.flat(2))
    v_rows = [i for i, m in enumerate(model.measurement_plan) if m.kind is MeasurementType.V_MAGNITUDE]
    other = [i for i in range(model.n_measurements) if i not in v_rows]
    assert np.allclose(z[v_rows], 1.0)
    assert np.allclose(z[other], 0.0, atol=1e-12)


def test_single_line_active_flow() -> None:
    model = _two_bus()
    z = measure(model, StateVector(theta=[0.0, -0.1], v=[1.0, 1.0]))
    row = model.measurement_plan.index(MeasurementKind(MeasurementType.P_FLOW, 0))
    assert z[row] == pytest.approx(10.0 * np.sin(0.1), abs=1e-12)


def test_measure_matches_power_flow_balance(ieee30) -> None:
    sol = solve(ieee30, LoadScenario.uniform(0, ieee30.n_bus))
    z = measure(ieee30, sol.state)
    p_rows = [i for i, m in enumerate(ieee30.measurement_plan) if m.kind is MeasurementType.P_INJECTION]
    load = np.array([b.base_load_p for b in ieee30.buses])
    gen = np.array([b.gen_p for b in ieee30.buses])
    pv_pq = [i for i, b in enumerate(ieee30.buses) if b.kind is not BusKind.SLACK]
    assert np.max(np.abs(z[p_rows][pv_pq] - (gen - load)[pv_pq])) < 1e-6


def test_jacobian_matches_finite_differences(ieee30) -> None:
    rng = np.random.default_rng(7)
    step = 1e-6
    for _ in range(100):
        x = _random_state(ieee30, rng)
        h = jacobian(ieee30, x, full=True)
        base = x.as_array()
        numeric = np.empty_like(h)
        for k in range(base.size):
            up, down = base.copy(), base.copy()
            up[k] += step
            down[k] -= step
            numeric[:, k] = (
                measure(ieee30, StateVector.from_array(up)) - measure(ieee30, StateVector.from_array(down))
            ) / (2 * step)
        # Per entry; the floor sits at the roundoff of a 1e-6 central difference.
        assert np.all(np.abs(h - numeric) <= 1e-5 * np.abs(h) + 1e-7)


def test_jacobian_voltage_rows_are_unit(ieee30) -> None:
    h = jacobian(ieee30, StateVector.flat(30), full=True)
    for row, meas in enumerate(ieee30.measurement_plan):
        if meas.kind is MeasurementType.V_MAGNITUDE:
            expected = np.zeros(60)
            expected[30 + meas.location] = 1.0
            assert np.array_equal(h[row], expected)


def test_jacobian_dc_view_matches_b_matrix(three_bus) -> None:
    # Tap-free, shunt-free copy so the flat-start P-theta block is the classic B.
    model = NetworkModel(
        [Bus(b.id, b.kind) for b in three_bus.buses],
        [Branch(br.from_bus, br.to_bus, br.r, br.x) for br in three_bus.branches],
    )
    h = jacobian(model, StateVector.flat(3), full=True)
    p_rows = [i for i, m in enumerate(model.measurement_plan) if m.kind is MeasurementType.P_INJECTION]
    b_matrix = np.zeros((3, 3))
    for br in model.branches:
        b = br.x / (br.r**2 + br.x**2)
        b_matrix[br.from_bus, br.to_bus] -= b
        b_matrix[br.to_bus, br.from_bus] -= b
        b_matrix[br.from_bus, br.from_bus] += b
        b_matrix[br.to_bus, br.to_bus] += b
    assert np.allclose(h[p_rows][:, :3], b_matrix, atol=1e-12)


def test_estimation_view_drops_slack_angle(ieee30) -> None:
    h = jacobian(ieee30, StateVector.flat(30))
    assert h.shape == (172, 59)
    x = _random_state(ieee30, np.random.default_rng(1))
    back = ieee30.from_estimation_vector(ieee30.to_estimation_vector(x))
    assert np.array_equal(back.as_array(), x.as_array())


def test_state_vector_validation() -> None:
    with pytest.raises(DimensionError):
        StateVector(theta=[0.0, 0.0], v=[1.0])
    with pytest.raises(ValueError):
        StateVector(theta=[0.0], v=[0.0])
    with pytest.raises(ValueError):
        StateVector(theta=[np.nan], v=[1.0])


@pytest.mark.parametrize(
    "text",
    [
        "bus 1 pq\nbus 2 pq\nbranch 1 2 0 0.1\n",
        "bus 1 slack\nbus 2 slack\nbranch 1 2 0 0.1\n",
        "bus 1 slack\nbus 2 pq\nbranch 1 2 0 0\n",
        "bus 1 slack\nbus 2 pq\nbranch 1 1 0 0.1\n",
        "bus 1 slack\nbus 2 pq\nbranch 1 2 0 0.1\nbranch 2 1 0 0.2\n",
    ],
)
def test_invalid_networks_rejected(text: str) -> None:
    with pytest.raises(NetworkValidationError):
        load_case(text)


def test_unobservable_plan_rejected() -> None:
    text = "bus 1 slack\nbus 2 pq\nbranch 1 2 0 0.1\nmeasure v_magnitude 1\nmeasure v_magnitude 2\nmeasure q_injection 2\n"
    with pytest.raises(NetworkValidationError, match="unobservable"):
        load_case(text)


def test_case_errors_carry_line_numbers() -> None:
    with pytest.raises(CaseFormatError, match="line 2"):
        load_case("bus 1 slack\nbus 2 nope\n")
    with pytest.raises(CaseFormatError, match="unknown bus 9"):
        load_case("bus 1 slack\nbus 2 pq\nbranch 1 9 0 0.1\n")


def test_simple_format_measure_lines() -> None:
    text = (
        "bus 1 slack\nbus 2 pq 0.5\nbranch 1 2 0.01 0.1\n"
        "measure p_flow 1 from\nmeasure q_flow 1 to\nmeasure v_magnitude 1\nmeasure v_magnitude 2\n"
    )
    model = load_case(text)
    assert model.n_measurements == 4
    assert model.measurement_plan[1] == MeasurementKind(MeasurementType.Q_FLOW, 0, "to")
