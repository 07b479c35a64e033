from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NetworkValidationError


class BusKind(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class MeasurementType(str, Enum):
    P_INJECTION = "p_injection"
    Q_INJECTION = "q_injection"
    P_FLOW = "p_flow"
    Q_FLOW = "q_flow"
    V_MAGNITUDE = "v_magnitude"


_FLOW_TYPES = {MeasurementType.P_FLOW, MeasurementType.Q_FLOW}
_DIRECTIONS = ("from", "to")


@dataclass(frozen=True)
class Bus:
    """Bus data in per-unit. `id` is the external bus number of the case file."""

    id: int
    kind: BusKind
    base_load_p: float = 0.0
    base_load_q: float = 0.0
    gen_p: float = 0.0
    voltage_setpoint: float = 1.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    name: str = ""


@dataclass(frozen=True)
class Branch:
    """Pi-model branch between internal bus indices; tap sits on the from side."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0


@dataclass(frozen=True)
class MeasurementKind:
    kind: MeasurementType
    location: int
    direction: str = "from"

    def label(self) -> str:
        if self.kind in _FLOW_TYPES:
            return f"{self.kind.value}@{self.location}:{self.direction}"
        return f"{self.kind.value}@{self.location}"


@dataclass(eq=False)
class StateVector:
    """Per-bus voltage angles (rad) and magnitudes (p.u.).

    The flat array view is `[theta..., v...]`, so an n-bus network exposes
    2n values; the slack angle is kept in the vector but pinned at 0.
    """

    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.array(self.theta, dtype=float).reshape(-1)
        self.v = np.array(self.v, dtype=float).reshape(-1)
        if self.theta.shape != self.v.shape:
            raise DimensionError(
                f"theta and v lengths differ: {self.theta.size} != {self.v.size}"
            )
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.v))):
            raise ValueError("state contains non-finite values")
        if np.any(self.v <= 0.0):
            raise ValueError("voltage magnitudes must be positive")

    @property
    def n_bus(self) -> int:
        return int(self.theta.size)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.theta, self.v])

    @classmethod
    def from_array(cls, values: Sequence[float] | np.ndarray) -> "StateVector":
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.size % 2:
            raise DimensionError(f"state array must have even length, got {arr.size}")
        half = arr.size // 2
        return cls(theta=arr[:half], v=arr[half:])

    @classmethod
    def flat(cls, n_bus: int) -> "StateVector":
        return cls(theta=np.zeros(n_bus), v=np.ones(n_bus))

    def copy(self) -> "StateVector":
        return StateVector(theta=self.theta.copy(), v=self.v.copy())

    def to_json(self) -> Dict[str, List[float]]:
        return {"theta": self.theta.tolist(), "v": self.v.tolist()}


def default_plan(n_bus: int, n_branch: int) -> List[MeasurementKind]:
    """All P/Q injections, from-end P/Q flows and all voltage magnitudes."""

    plan: List[MeasurementKind] = []
    plan += [MeasurementKind(MeasurementType.P_INJECTION, i) for i in range(n_bus)]
    plan += [MeasurementKind(MeasurementType.Q_INJECTION, i) for i in range(n_bus)]
    plan += [MeasurementKind(MeasurementType.P_FLOW, k) for k in range(n_branch)]
    plan += [MeasurementKind(MeasurementType.Q_FLOW, k) for k in range(n_branch)]
    plan += [MeasurementKind(MeasurementType.V_MAGNITUDE, i) for i in range(n_bus)]
    return plan


class NetworkModel:
    """Buses, branches and measurement plan of a transmission grid.

    Treated as immutable once built: admittance data is computed lazily and
    cached, so the same instance can be shared across workers.
    """

    def __init__(
        self,
        buses: Iterable[Bus],
        branches: Iterable[Branch],
        measurement_plan: Optional[Iterable[MeasurementKind]] = None,
        *,
        name: str = "",
    ) -> None:
        self.buses: Tuple[Bus, ...] = tuple(buses)
        self.branches: Tuple[Branch, ...] = tuple(branches)
        self.name = name
        self.slack_index = _validate_topology(self.buses, self.branches)
        if measurement_plan is None:
            measurement_plan = default_plan(len(self.buses), len(self.branches))
        self.measurement_plan: Tuple[MeasurementKind, ...] = tuple(measurement_plan)
        _validate_plan(self)

    def __repr__(self) -> str:
        return (
            f"NetworkModel(name={self.name!r}, buses={self.n_bus}, "
            f"branches={self.n_branch}, measurements={self.n_measurements})"
        )

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_measurements(self) -> int:
        return len(self.measurement_plan)

    @property
    def n_states(self) -> int:
        return 2 * self.n_bus

    @property
    def n_estimated(self) -> int:
        return 2 * self.n_bus - 1

    def bus_indices(self, *kinds: BusKind) -> np.ndarray:
        return np.array(
            [i for i, bus in enumerate(self.buses) if bus.kind in kinds], dtype=int
        )

    @cached_property
    def y_bus(self) -> np.ndarray:
        y = build_ybus(self)
        y.setflags(write=False)
        return y

    @cached_property
    def estimation_columns(self) -> np.ndarray:
        cols = np.arange(self.n_states)
        cols = cols[cols != self.slack_index]
        cols.setflags(write=False)
        return cols

    @cached_property
    def _branch_matrices(self) -> Dict[str, np.ndarray]:
        n, nbr = self.n_bus, self.n_branch
        yff, yft, ytf, ytt = branch_admittances(self.branches)
        f = np.array([br.from_bus for br in self.branches], dtype=int)
        t = np.array([br.to_bus for br in self.branches], dtype=int)
        rows = np.arange(nbr)
        yf = np.zeros((nbr, n), dtype=complex)
        yt = np.zeros((nbr, n), dtype=complex)
        cf = np.zeros((nbr, n))
        ct = np.zeros((nbr, n))
        yf[rows, f] += yff
        yf[rows, t] += yft
        yt[rows, f] += ytf
        yt[rows, t] += ytt
        cf[rows, f] = 1.0
        ct[rows, t] = 1.0
        return {"f": f, "t": t, "yf": yf, "yt": yt, "cf": cf, "ct": ct}

    @cached_property
    def _plan_layout(self) -> Dict[Tuple[MeasurementType, str], Tuple[np.ndarray, np.ndarray]]:
        groups: Dict[Tuple[MeasurementType, str], Tuple[List[int], List[int]]] = {}
        for row, meas in enumerate(self.measurement_plan):
            direction = meas.direction if meas.kind in _FLOW_TYPES else ""
            rows, locs = groups.setdefault((meas.kind, direction), ([], []))
            rows.append(row)
            locs.append(meas.location)
        return {
            key: (np.array(rows, dtype=int), np.array(locs, dtype=int))
            for key, (rows, locs) in groups.items()
        }

    def check_state(self, x: StateVector) -> None:
        if x.n_bus != self.n_bus:
            raise DimensionError(
                f"state has {x.n_bus} buses, network has {self.n_bus}"
            )

    def to_estimation_vector(self, x: StateVector) -> np.ndarray:
        self.check_state(x)
        return x.as_array()[self.estimation_columns]

    def from_estimation_vector(self, values: np.ndarray) -> StateVector:
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != self.n_estimated:
            raise DimensionError(
                f"estimation vector has {values.size} entries, expected {self.n_estimated}"
            )
        full = np.zeros(self.n_states)
        full[self.estimation_columns] = values
        return StateVector.from_array(full)

    def state_labels(self) -> List[str]:
        return [f"theta_{bus.id}" for bus in self.buses] + [
            f"v_{bus.id}" for bus in self.buses
        ]


def branch_admittances(
    branches: Sequence[Branch],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return the (yff, yft, ytf, ytt) pi-model terms of every branch."""

    r = np.array([br.r for br in branches], dtype=float)
    x = np.array([br.x for br in branches], dtype=float)
    b = np.array([br.b_charging for br in branches], dtype=float)
    tap = np.array([br.tap_ratio for br in branches], dtype=float)
    ys = 1.0 / (r + 1j * x)
    charging = 1j * b / 2.0
    yff = (ys + charging) / (tap * tap)
    yft = -ys / tap
    ytf = -ys / tap
    ytt = ys + charging
    return yff, yft, ytf, ytt


def build_ybus(model: NetworkModel) -> np.ndarray:
    """Assemble the dense bus admittance matrix G + jB."""

    n = model.n_bus
    y = np.zeros((n, n), dtype=complex)
    if model.n_branch:
        yff, yft, ytf, ytt = branch_admittances(model.branches)
        # Fixed accumulation order keeps Y bitwise symmetric for symmetric branches.
        for k, br in enumerate(model.branches):
            f, t = br.from_bus, br.to_bus
            y[f, f] += yff[k]
            y[f, t] += yft[k]
            y[t, f] += ytf[k]
            y[t, t] += ytt[k]
    for i, bus in enumerate(model.buses):
        y[i, i] += complex(bus.shunt_g, bus.shunt_b)
    return y


def complex_voltage(x: StateVector) -> np.ndarray:
    return x.v * np.exp(1j * x.theta)


def injection_derivatives(
    y_bus: np.ndarray, voltage: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """dS/dtheta and dS/d|V| of the complex bus injections."""

    ibus = y_bus @ voltage
    vnorm = voltage / np.abs(voltage)
    ds_dth = 1j * voltage[:, None] * np.conj(np.diag(ibus) - y_bus * voltage[None, :])
    ds_dvm = voltage[:, None] * np.conj(y_bus * vnorm[None, :]) + np.diag(
        np.conj(ibus) * vnorm
    )
    return ds_dth, ds_dvm


def bus_injections(model: NetworkModel, x: StateVector) -> np.ndarray:
    voltage = complex_voltage(x)
    return voltage * np.conj(model.y_bus @ voltage)


def measure(model: NetworkModel, x: StateVector) -> np.ndarray:
    """Evaluate h(x) in measurement-plan order (noise free)."""

    model.check_state(x)
    voltage = complex_voltage(x)
    s_bus = bus_injections(model, x)
    mats = model._branch_matrices
    flows = {
        "from": voltage[mats["f"]] * np.conj(mats["yf"] @ voltage),
        "to": voltage[mats["t"]] * np.conj(mats["yt"] @ voltage),
    }

    out = np.empty(model.n_measurements)
    for (kind, direction), (rows, locs) in model._plan_layout.items():
        if kind is MeasurementType.P_INJECTION:
            out[rows] = s_bus.real[locs]
        elif kind is MeasurementType.Q_INJECTION:
            out[rows] = s_bus.imag[locs]
        elif kind is MeasurementType.P_FLOW:
            out[rows] = flows[direction].real[locs]
        elif kind is MeasurementType.Q_FLOW:
            out[rows] = flows[direction].imag[locs]
        else:
            out[rows] = x.v[locs]
    return out


def jacobian(model: NetworkModel, x: StateVector, *, full: bool = False) -> np.ndarray:
    """Analytic Jacobian of h at x.

    Columns follow the flat state layout `[theta..., v...]`. Unless `full` is
    set, the pinned slack-angle column is dropped (estimation view).
    """

    model.check_state(x)
    n = model.n_bus
    voltage = complex_voltage(x)
    ds_dth, ds_dvm = injection_derivatives(model.y_bus, voltage)

    mats = model._branch_matrices
    vnorm = voltage / np.abs(voltage)
    dv_dth = 1j * voltage
    flow_derivs = {}
    for direction, ykey, ckey, ends in (
        ("from", "yf", "cf", mats["f"]),
        ("to", "yt", "ct", mats["t"]),
    ):
        ybr, cbr = mats[ykey], mats[ckey]
        current = ybr @ voltage
        v_end = voltage[ends]
        d_th = np.conj(current)[:, None] * cbr * dv_dth[None, :] + v_end[:, None] * np.conj(
            ybr * dv_dth[None, :]
        )
        d_vm = np.conj(current)[:, None] * cbr * vnorm[None, :] + v_end[:, None] * np.conj(
            ybr * vnorm[None, :]
        )
        flow_derivs[direction] = (d_th, d_vm)

    h = np.zeros((model.n_measurements, 2 * n))
    for (kind, direction), (rows, locs) in model._plan_layout.items():
        if kind is MeasurementType.V_MAGNITUDE:
            h[rows, n + locs] = 1.0
            continue
        if kind in (MeasurementType.P_INJECTION, MeasurementType.Q_INJECTION):
            d_th, d_vm = ds_dth, ds_dvm
        else:
            d_th, d_vm = flow_derivs[direction]
        part = np.real if kind in (MeasurementType.P_INJECTION, MeasurementType.P_FLOW) else np.imag
        h[rows, :n] = part(d_th[locs])
        h[rows, n:] = part(d_vm[locs])

    if full:
        return h
    return h[:, model.estimation_columns]


def _validate_topology(buses: Sequence[Bus], branches: Sequence[Branch]) -> int:
    if not buses:
        raise NetworkValidationError("network has no buses")
    ids = [bus.id for bus in buses]
    if len(set(ids)) != len(ids):
        raise NetworkValidationError("duplicate bus ids")

    slack = [i for i, bus in enumerate(buses) if bus.kind is BusKind.SLACK]
    if len(slack) != 1:
        raise NetworkValidationError(
            f"network needs exactly one slack bus, found {len(slack)}"
        )

    for bus in buses:
        values = (
            bus.base_load_p,
            bus.base_load_q,
            bus.gen_p,
            bus.voltage_setpoint,
            bus.shunt_g,
            bus.shunt_b,
        )
        if not all(math.isfinite(v) for v in values):
            raise NetworkValidationError(f"bus {bus.id} has non-finite data")
        if bus.kind in (BusKind.SLACK, BusKind.PV) and bus.voltage_setpoint <= 0:
            raise NetworkValidationError(
                f"bus {bus.id} needs a positive voltage setpoint"
            )

    seen = set()
    n = len(buses)
    for k, br in enumerate(branches):
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise NetworkValidationError(f"branch {k} references an unknown bus")
        if br.from_bus == br.to_bus:
            raise NetworkValidationError(f"branch {k} connects bus {br.from_bus} to itself")
        if br.r == 0.0 and br.x == 0.0:
            raise NetworkValidationError(f"branch {k} has zero impedance")
        if not br.tap_ratio > 0:
            raise NetworkValidationError(f"branch {k} has non-positive tap ratio")
        if not all(math.isfinite(v) for v in (br.r, br.x, br.b_charging, br.tap_ratio)):
            raise NetworkValidationError(f"branch {k} has non-finite data")
        key = (min(br.from_bus, br.to_bus), max(br.from_bus, br.to_bus))
        if key in seen:
            raise NetworkValidationError(
                f"duplicate branch between buses {buses[key[0]].id} and {buses[key[1]].id}"
            )
        seen.add(key)

    return slack[0]


def _validate_plan(model: NetworkModel) -> None:
    for meas in model.measurement_plan:
        limit = model.n_branch if meas.kind in _FLOW_TYPES else model.n_bus
        if not 0 <= meas.location < limit:
            raise NetworkValidationError(f"measurement {meas.label()} has invalid location")
        if meas.kind in _FLOW_TYPES and meas.direction not in _DIRECTIONS:
            raise NetworkValidationError(f"measurement {meas.label()} has invalid direction")
    if model.n_measurements < model.n_estimated:
        raise NetworkValidationError(
            f"measurement plan has {model.n_measurements} channels for "
            f"{model.n_estimated} states"
        )
    h_flat = jacobian(model, StateVector.flat(model.n_bus))
    if np.linalg.matrix_rank(h_flat) < model.n_estimated:
        raise NetworkValidationError("measurement plan leaves the network unobservable")
