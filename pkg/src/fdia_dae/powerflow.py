from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConvergenceError, DimensionError, SingularJacobianError
from .grid import BusKind, NetworkModel, StateVector, injection_derivatives
from .log import get_logger

logger = get_logger("powerflow")

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20
MAX_SCALE = 3.0


@dataclass(frozen=True, eq=False)
class LoadScenario:
    """Per-bus load multipliers for one hour.

    `scale_q` defaults to `scale_p` (constant power factor).
    """

    timestamp: int
    scale_p: np.ndarray
    scale_q: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        scale_p = np.array(self.scale_p, dtype=float).reshape(-1)
        object.__setattr__(self, "scale_p", scale_p)
        if self.scale_q is not None:
            scale_q = np.array(self.scale_q, dtype=float).reshape(-1)
            if scale_q.shape != scale_p.shape:
                raise DimensionError("scale_p and scale_q lengths differ")
            object.__setattr__(self, "scale_q", scale_q)
        for name in ("scale_p", "scale_q"):
            values = getattr(self, name)
            if values is None:
                continue
            if not np.all(np.isfinite(values)):
                raise ValueError(f"{name} has non-finite entries")
            if np.any(values < 0.0) or np.any(values > MAX_SCALE):
                raise ValueError(f"{name} must lie in [0, {MAX_SCALE}]")

    @classmethod
    def uniform(cls, timestamp: int, n_bus: int, factor: float = 1.0) -> "LoadScenario":
        return cls(timestamp=timestamp, scale_p=np.full(n_bus, factor))

    @property
    def q_scale(self) -> np.ndarray:
        return self.scale_p if self.scale_q is None else self.scale_q


@dataclass
class PowerFlowSolution:
    state: StateVector
    iterations: int
    max_mismatch: float
    mismatch_history: List[float] = field(default_factory=list)


@dataclass
class Trajectory:
    """Solved hours in input order; failed hours are skipped and listed."""

    states: List[StateVector]
    timestamps: List[int]
    failures: List[Tuple[int, int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def failure_rate(self) -> float:
        total = len(self.states) + len(self.failures)
        return len(self.failures) / total if total else 0.0

    def as_array(self) -> np.ndarray:
        if not self.states:
            return np.zeros((0, 0))
        return np.stack([x.as_array() for x in self.states])


def scheduled_injections(
    model: NetworkModel, scenario: LoadScenario
) -> Tuple[np.ndarray, np.ndarray]:
    if scenario.scale_p.size != model.n_bus:
        raise DimensionError(
            f"scenario has {scenario.scale_p.size} multipliers, network has {model.n_bus} buses"
        )
    load_p = np.array([bus.base_load_p for bus in model.buses])
    load_q = np.array([bus.base_load_q for bus in model.buses])
    gen_p = np.array([bus.gen_p for bus in model.buses])
    return gen_p - load_p * scenario.scale_p, -load_q * scenario.q_scale


def _start_point(model: NetworkModel, x0: Optional[StateVector]) -> Tuple[np.ndarray, np.ndarray]:
    if x0 is None:
        theta, v = np.zeros(model.n_bus), np.ones(model.n_bus)
    else:
        model.check_state(x0)
        theta, v = x0.theta.copy(), x0.v.copy()
    for i, bus in enumerate(model.buses):
        if bus.kind is not BusKind.PQ:
            v[i] = bus.voltage_setpoint
    theta[model.slack_index] = 0.0
    return theta, v


def solve(
    model: NetworkModel,
    scenario: LoadScenario,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    *,
    x0: Optional[StateVector] = None,
) -> PowerFlowSolution:
    """Newton-Raphson AC power flow in polar coordinates.

    Unknowns are the angles of pv/pq buses and the magnitudes of pq buses.
    The slack angle stays at 0 and pv magnitudes stay at their setpoints.
    """

    if not tol > 0:
        raise ValueError("tol must be positive")
    p_sched, q_sched = scheduled_injections(model, scenario)
    pv = model.bus_indices(BusKind.PV)
    pq = model.bus_indices(BusKind.PQ)
    pvpq = np.sort(np.concatenate([pv, pq]))
    n_ang = pvpq.size

    theta, v = _start_point(model, x0)
    history: List[float] = []
    for iteration in range(max_iter + 1):
        voltage = v * np.exp(1j * theta)
        s_bus = voltage * np.conj(model.y_bus @ voltage)
        mismatch = np.concatenate(
            [s_bus.real[pvpq] - p_sched[pvpq], s_bus.imag[pq] - q_sched[pq]]
        )
        max_mismatch = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        history.append(max_mismatch)
        if not np.isfinite(max_mismatch):
            raise ConvergenceError(
                f"power flow diverged at hour {scenario.timestamp}",
                iterations=iteration,
                last_mismatch=max_mismatch,
            )
        if max_mismatch <= tol:
            logger.debug(
                "powerflow.solve converged hour=%d iterations=%d mismatch=%.3e",
                scenario.timestamp,
                iteration,
                max_mismatch,
            )
            return PowerFlowSolution(
                state=StateVector(theta=theta, v=v),
                iterations=iteration,
                max_mismatch=max_mismatch,
                mismatch_history=history,
            )
        if iteration == max_iter:
            break

        ds_dth, ds_dvm = injection_derivatives(model.y_bus, voltage)
        jac = np.block(
            [
                [ds_dth.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
                [ds_dth.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
            ]
        )
        try:
            step = np.linalg.solve(jac, -mismatch)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(
                f"singular power-flow Jacobian at hour {scenario.timestamp}; scenario infeasible"
            ) from exc
        theta[pvpq] += step[:n_ang]
        v[pq] += step[n_ang:]
        if np.any(v <= 0.0):
            raise ConvergenceError(
                f"voltage collapse at hour {scenario.timestamp}",
                iterations=iteration + 1,
                last_mismatch=max_mismatch,
            )

    raise ConvergenceError(
        f"power flow did not converge at hour {scenario.timestamp}",
        iterations=max_iter,
        last_mismatch=history[-1],
    )


def trajectory(
    model: NetworkModel,
    scenarios: Sequence[LoadScenario],
    *,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    warm_start: bool = True,
) -> Trajectory:
    """Solve every scenario in order, warm-starting from the previous hour."""

    out = Trajectory(states=[], timestamps=[])
    previous: Optional[StateVector] = None
    for index, scenario in enumerate(scenarios):
        try:
            sol = solve(
                model,
                scenario,
                tol,
                max_iter,
                x0=previous if warm_start else None,
            )
        except (ConvergenceError, SingularJacobianError) as exc:
            logger.warning(
                "powerflow.trajectory skipped index=%d hour=%d reason=%s",
                index,
                scenario.timestamp,
                exc,
            )
            out.failures.append((index, scenario.timestamp, str(exc)))
            continue
        out.states.append(sol.state)
        out.timestamps.append(scenario.timestamp)
        previous = sol.state
    if out.failures:
        logger.info(
            "powerflow.trajectory solved=%d failed=%d",
            len(out.states),
            len(out.failures),
        )
    return out
