from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from .errors import ConfigError, ConvergenceError, DimensionError, ObservabilityError
from .grid import (
    MeasurementKind,
    MeasurementType,
    NetworkModel,
    StateVector,
    jacobian,
    measure,
)
from .log import get_logger

logger = get_logger("estimation")

DEFAULT_POWER_SIGMA = 0.01
DEFAULT_VOLTAGE_SIGMA = 0.004
DEFAULT_ALPHA = 0.05
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30
MIN_STEP = 1.0 / 1024.0

_ACTIVE = (MeasurementType.P_INJECTION, MeasurementType.P_FLOW)


@dataclass(eq=False)
class MeasurementVector:
    """Readings z with the diagonal of W (1/sigma^2 per channel)."""

    z: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        self.z = np.array(self.z, dtype=float).reshape(-1)
        self.weights = np.array(self.weights, dtype=float).reshape(-1)
        if self.z.shape != self.weights.shape:
            raise DimensionError(
                f"z has {self.z.size} entries but {self.weights.size} weights"
            )
        if not np.all(np.isfinite(self.z)):
            raise ValueError("measurements contain non-finite values")
        if not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0.0)):
            raise ValueError("measurement weights must be positive and finite")

    @property
    def m(self) -> int:
        return int(self.z.size)

    @classmethod
    def from_sigmas(cls, z: np.ndarray, sigmas: np.ndarray) -> "MeasurementVector":
        sigmas = np.asarray(sigmas, dtype=float)
        return cls(z=z, weights=1.0 / (sigmas * sigmas))

    def with_z(self, z: np.ndarray) -> "MeasurementVector":
        return MeasurementVector(z=z, weights=self.weights)


@dataclass
class EstimationResult:
    """WLS solution.

    For the AC estimator `x_est` is a StateVector; the DC estimator works on a
    bare H and returns the state as a plain vector. `n_states` is the number
    of estimated unknowns (slack angle excluded).
    """

    x_est: Union[StateVector, np.ndarray]
    objective: float
    residual: np.ndarray
    iterations: int
    converged: bool
    n_states: int
    trace: List[Tuple[int, float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class BddVerdict:
    statistic: float
    threshold: float
    passed: bool
    dof: int
    alpha: float


def noise_sigmas(
    plan: Sequence[MeasurementKind],
    power_sigma: float = DEFAULT_POWER_SIGMA,
    voltage_sigma: float = DEFAULT_VOLTAGE_SIGMA,
) -> np.ndarray:
    return np.array(
        [
            voltage_sigma if meas.kind is MeasurementType.V_MAGNITUDE else power_sigma
            for meas in plan
        ]
    )


def synthesize(
    model: NetworkModel,
    x: StateVector,
    rng: np.random.Generator,
    sigmas: Optional[np.ndarray] = None,
) -> MeasurementVector:
    """Noisy readings z = h(x) + e with e ~ N(0, sigma^2)."""

    if sigmas is None:
        sigmas = noise_sigmas(model.measurement_plan)
    z = measure(model, x) + rng.normal(0.0, 1.0, size=model.n_measurements) * sigmas
    return MeasurementVector.from_sigmas(z, sigmas)


def dc_jacobian(model: NetworkModel) -> np.ndarray:
    """Linear model of the active-power channels w.r.t. non-slack angles at flat start."""

    rows = [i for i, meas in enumerate(model.measurement_plan) if meas.kind in _ACTIVE]
    full = jacobian(model, StateVector.flat(model.n_bus), full=True)
    cols = [i for i in range(model.n_bus) if i != model.slack_index]
    return full[np.ix_(rows, cols)]


def _solve_gain(gain: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        factor = cho_factor(gain, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise ObservabilityError(
            "gain matrix is not positive definite; measurement set is unobservable"
        ) from exc
    return cho_solve(factor, rhs)


def dc_estimate(h: np.ndarray, meas: MeasurementVector) -> EstimationResult:
    """Closed-form WLS: x = (H^T W H)^-1 H^T W z."""

    h = np.atleast_2d(np.asarray(h, dtype=float))
    if h.shape[0] != meas.m:
        raise DimensionError(f"H has {h.shape[0]} rows for {meas.m} measurements")
    weighted = h * meas.weights[:, None]
    x = _solve_gain(h.T @ weighted, weighted.T @ meas.z)
    residual = meas.z - h @ x
    return EstimationResult(
        x_est=x,
        objective=float(residual @ (meas.weights * residual)),
        residual=residual,
        iterations=1,
        converged=True,
        n_states=h.shape[1],
    )


def objective(model: NetworkModel, meas: MeasurementVector, x: StateVector) -> float:
    """F(x) = (z - h(x))^T W (z - h(x))."""

    if meas.m != model.n_measurements:
        raise DimensionError(
            f"{meas.m} measurements for a plan of {model.n_measurements}"
        )
    residual = meas.z - measure(model, x)
    return float(residual @ (meas.weights * residual))


def ac_estimate(
    model: NetworkModel,
    meas: MeasurementVector,
    x0: Optional[StateVector] = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> EstimationResult:
    """Gauss-Newton WLS with a halving line search on F.

    Converges when the full Gauss-Newton step satisfies ||dx||_inf <= tol.
    """

    if meas.m != model.n_measurements:
        raise DimensionError(
            f"{meas.m} measurements for a plan of {model.n_measurements}"
        )
    z, w = meas.z, meas.weights
    if x0 is None:
        x0 = StateVector.flat(model.n_bus)
    vec = model.to_estimation_vector(x0)
    state = model.from_estimation_vector(vec)
    residual = z - measure(model, state)
    value = float(residual @ (w * residual))
    trace: List[Tuple[int, float, float]] = [(0, value, 0.0)]

    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        h = jacobian(model, state)
        weighted = h * w[:, None]
        dx = _solve_gain(h.T @ weighted, weighted.T @ residual)
        step_norm = float(np.max(np.abs(dx)))
        if step_norm <= tol:
            converged = True
            trace.append((iterations, value, 0.0))
            break

        step = 1.0
        accepted = False
        while step >= MIN_STEP:
            trial_vec = vec + step * dx
            try:
                trial_state = model.from_estimation_vector(trial_vec)
            except ValueError:
                step /= 2.0
                continue
            trial_residual = z - measure(model, trial_state)
            trial_value = float(trial_residual @ (w * trial_residual))
            # Rounding slack so a converged iterate is not rejected on noise.
            if trial_value <= value * (1.0 + 1e-12) + 1e-15:
                accepted = True
                break
            step /= 2.0
        if not accepted:
            logger.warning(
                "estimation.ac stagnated iteration=%d objective=%.6e step_norm=%.3e",
                iterations,
                value,
                step_norm,
            )
            break
        vec, state, residual, value = trial_vec, trial_state, trial_residual, trial_value
        trace.append((iterations, value, step * step_norm))

    if not converged:
        raise ConvergenceError(
            "AC state estimation did not converge",
            iterations=iterations,
            last_mismatch=trace[-1][2],
        )
    logger.debug(
        "estimation.ac converged iterations=%d objective=%.6e", iterations, value
    )
    return EstimationResult(
        x_est=state,
        objective=value,
        residual=residual,
        iterations=iterations,
        converged=True,
        n_states=model.n_estimated,
        trace=trace,
    )


def chi_square_threshold(dof: int, alpha: float = DEFAULT_ALPHA) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if dof <= 0:
        raise ConfigError(f"chi-square test needs positive degrees of freedom, got {dof}")
    return float(chi2.ppf(1.0 - alpha, dof))


def bdd_check(
    result: EstimationResult, meas: MeasurementVector, alpha: float = DEFAULT_ALPHA
) -> BddVerdict:
    """Chi-square test of the WLS objective with m - n degrees of freedom."""

    dof = meas.m - result.n_states
    threshold = chi_square_threshold(dof, alpha)
    statistic = float(result.objective)
    return BddVerdict(
        statistic=statistic,
        threshold=threshold,
        passed=statistic <= threshold,
        dof=dof,
        alpha=alpha,
    )


def write_trace_csv(result: EstimationResult, path: str | Path) -> None:
    frame = pd.DataFrame(result.trace, columns=["iteration", "objective", "step_norm"])
    frame.to_csv(path, index=False)
