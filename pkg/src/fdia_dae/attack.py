from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    AttackInfeasibleError,
    AttackRejectedError,
    AttackSpecError,
    ConvergenceError,
    DimensionError,
    ObservabilityError,
)
from .estimation import (
    DEFAULT_ALPHA,
    BddVerdict,
    MeasurementVector,
    ac_estimate,
    bdd_check,
    synthesize,
)
from .grid import NetworkModel, StateVector, measure
from .log import get_logger

logger = get_logger("attack")

DEFAULT_MAGNITUDE = 0.05
DEFAULT_MAX_RETRIES = 10

Json = Dict[str, Any]


class AttackMode(str, Enum):
    RANDOM = "random"
    TARGETED = "targeted"


@dataclass(frozen=True, eq=False)
class AttackSpec:
    """State perturbation c over the full `[theta..., v...]` state."""

    mode: AttackMode
    c: np.ndarray
    magnitude: float
    target_states: Tuple[int, ...] = ()
    slack_index: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AttackMode(self.mode))
        c = np.array(self.c, dtype=float).reshape(-1)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "target_states", tuple(int(k) for k in self.target_states))
        if not (np.isfinite(self.magnitude) and self.magnitude > 0.0):
            raise AttackSpecError(f"attack magnitude must be positive, got {self.magnitude}")
        if not np.all(np.isfinite(c)):
            raise AttackSpecError("attack vector has non-finite entries")
        if not 0 <= self.slack_index < c.size:
            raise AttackSpecError(f"slack index {self.slack_index} outside the state")
        if c[self.slack_index] != 0.0:
            raise AttackSpecError("attacks must not perturb the slack angle")
        if self.mode is AttackMode.TARGETED:
            if not self.target_states:
                raise AttackSpecError("targeted attack needs at least one target state")
            outside = np.ones(c.size, dtype=bool)
            outside[list(self.target_states)] = False
            if np.any(c[outside] != 0.0):
                raise AttackSpecError("targeted attack perturbs states outside its targets")

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.c)

    def to_json(self) -> Json:
        return {
            "mode": self.mode.value,
            "magnitude": self.magnitude,
            "target_states": list(self.target_states),
            "c": self.c.tolist(),
        }


@dataclass(eq=False)
class AttackRecord:
    spec: AttackSpec
    a: np.ndarray
    z_attacked: MeasurementVector
    x_attacked_est: StateVector
    stealth_margin: float
    x_clean_est: Optional[StateVector] = None
    clean_verdict: Optional[BddVerdict] = None
    attacked_verdict: Optional[BddVerdict] = None
    attempts: int = 1
    meta: Json = field(default_factory=dict)

    def to_json(self) -> Json:
        out: Json = {
            "spec": self.spec.to_json(),
            "a": self.a.tolist(),
            "stealth_margin": self.stealth_margin,
            "attempts": self.attempts,
        }
        if self.clean_verdict is not None and self.attacked_verdict is not None:
            out["statistic_clean"] = self.clean_verdict.statistic
            out["statistic_attacked"] = self.attacked_verdict.statistic
            out["threshold"] = self.attacked_verdict.threshold
        out.update(self.meta)
        return out


def craft_dc(h: np.ndarray, c: np.ndarray) -> np.ndarray:
    """a = H c; z + a is fitted by x_est + c with the same residual."""

    h = np.atleast_2d(np.asarray(h, dtype=float))
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.size != h.shape[1]:
        raise DimensionError(f"c has {c.size} entries, H has {h.shape[1]} columns")
    return h @ c


def perturb(x: StateVector, c: np.ndarray) -> StateVector:
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.size != 2 * x.n_bus:
        raise DimensionError(f"c has {c.size} entries, state has {2 * x.n_bus}")
    try:
        return StateVector.from_array(x.as_array() + c)
    except ValueError as exc:
        raise AttackInfeasibleError(f"perturbed state is not physical: {exc}") from exc


def craft_ac(model: NetworkModel, x_est: StateVector, c: np.ndarray) -> np.ndarray:
    """a = h(x_est + c) - h(x_est)."""

    model.check_state(x_est)
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.size != model.n_states:
        raise DimensionError(f"c has {c.size} entries, network has {model.n_states} states")
    if c[model.slack_index] != 0.0:
        raise AttackSpecError("attacks must not perturb the slack angle")
    x_att = perturb(x_est, c)
    return measure(model, x_att) - measure(model, x_est)


def sample_attack(
    rng: np.random.Generator,
    mode: AttackMode | str,
    n_states: int,
    magnitude: float = DEFAULT_MAGNITUDE,
    targets: Optional[Sequence[int]] = None,
    *,
    min_magnitude: float = 0.0,
    slack_index: int = 0,
) -> AttackSpec:
    """Draw an attack vector.

    Random mode picks a uniform subset of non-slack coordinates (size uniform
    in [1, n_states // 4]). Each perturbed entry has |c| uniform in
    [min_magnitude, magnitude] and a random sign; with min_magnitude 0 this is
    uniform in [-magnitude, magnitude].
    """

    mode = AttackMode(mode)
    if not (np.isfinite(magnitude) and magnitude > 0.0):
        raise AttackSpecError(f"attack magnitude must be positive, got {magnitude}")
    if not 0.0 <= min_magnitude <= magnitude:
        raise AttackSpecError("min_magnitude must lie in [0, magnitude]")
    if n_states < 2:
        raise AttackSpecError("state too small to attack")

    if mode is AttackMode.TARGETED:
        if not targets:
            raise AttackSpecError("targeted attack needs at least one target state")
        chosen = np.array(sorted(set(int(k) for k in targets)), dtype=int)
        if chosen.min() < 0 or chosen.max() >= n_states:
            raise AttackSpecError(f"target states out of range [0, {n_states})")
        if slack_index in chosen:
            raise AttackSpecError("the slack angle cannot be targeted")
    else:
        candidates = np.array([k for k in range(n_states) if k != slack_index])
        size = int(rng.integers(1, max(1, n_states // 4) + 1))
        chosen = np.sort(rng.choice(candidates, size=size, replace=False))

    values = rng.uniform(min_magnitude, magnitude, size=chosen.size)
    signs = rng.choice(np.array([-1.0, 1.0]), size=chosen.size)
    c = np.zeros(n_states)
    c[chosen] = signs * values
    return AttackSpec(
        mode=mode,
        c=c,
        magnitude=magnitude,
        target_states=tuple(chosen.tolist()) if mode is AttackMode.TARGETED else (),
        slack_index=slack_index,
    )


class StateAttacker:
    """Complete-knowledge attacker against noisy AC state estimation.

    Each attempt synthesizes noisy measurements for the true state, estimates,
    crafts a = h(x_est + c) - h(x_est), re-estimates on z + a and keeps the
    attack only when the chi-square check still passes.
    """

    def __init__(
        self,
        model: NetworkModel,
        *,
        mode: AttackMode | str = AttackMode.RANDOM,
        magnitude: float = DEFAULT_MAGNITUDE,
        min_magnitude: float = 0.0,
        targets: Optional[Sequence[int]] = None,
        alpha: float = DEFAULT_ALPHA,
        max_retries: int = DEFAULT_MAX_RETRIES,
        sigmas: Optional[np.ndarray] = None,
    ) -> None:
        if max_retries < 1:
            raise AttackSpecError("max_retries must be at least 1")
        self.model = model
        self.mode = AttackMode(mode)
        self.magnitude = magnitude
        self.min_magnitude = min_magnitude
        self.targets = tuple(targets) if targets else None
        self.alpha = alpha
        self.max_retries = max_retries
        self.sigmas = sigmas

    def sample(self, rng: np.random.Generator) -> AttackSpec:
        return sample_attack(
            rng,
            self.mode,
            self.model.n_states,
            self.magnitude,
            self.targets,
            min_magnitude=self.min_magnitude,
            slack_index=self.model.slack_index,
        )

    def attack(
        self,
        x_true: StateVector,
        rng: np.random.Generator,
        spec: Optional[AttackSpec] = None,
    ) -> AttackRecord:
        model = self.model
        last_reason = "no attempt made"
        for attempt in range(1, self.max_retries + 1):
            meas = synthesize(model, x_true, rng, self.sigmas)
            try:
                clean = ac_estimate(model, meas, x0=x_true)
            except (ConvergenceError, ObservabilityError) as exc:
                last_reason = f"clean estimation failed: {exc}"
                continue
            clean_verdict = bdd_check(clean, meas, self.alpha)
            if not clean_verdict.passed:
                last_reason = "clean measurements already flagged by bad-data detection"
                continue

            candidate = spec if spec is not None else self.sample(rng)
            try:
                a = craft_ac(model, clean.x_est, candidate.c)
            except AttackInfeasibleError as exc:
                last_reason = str(exc)
                continue
            z_att = meas.with_z(meas.z + a)
            try:
                attacked = ac_estimate(
                    model, z_att, x0=perturb(clean.x_est, candidate.c)
                )
            except (ConvergenceError, ObservabilityError) as exc:
                last_reason = f"attacked estimation failed: {exc}"
                continue
            verdict = bdd_check(attacked, z_att, self.alpha)
            if not verdict.passed:
                last_reason = (
                    f"attack detected statistic={verdict.statistic:.3f} "
                    f"threshold={verdict.threshold:.3f}"
                )
                continue

            logger.debug(
                "attack.accepted attempt=%d support=%d margin=%.3f",
                attempt,
                candidate.support.size,
                verdict.threshold - verdict.statistic,
            )
            return AttackRecord(
                spec=candidate,
                a=a,
                z_attacked=z_att,
                x_attacked_est=attacked.x_est,
                stealth_margin=verdict.threshold - verdict.statistic,
                x_clean_est=clean.x_est,
                clean_verdict=clean_verdict,
                attacked_verdict=verdict,
                attempts=attempt,
            )

        logger.warning(
            "attack.rejected attempts=%d reason=%s", self.max_retries, last_reason
        )
        raise AttackRejectedError(
            f"no stealthy attack after {self.max_retries} attempts: {last_reason}"
        )
