from __future__ import annotations

from typing import Optional


class FdiaError(Exception):
    """Root of every error raised by fdia_dae."""

    exit_code = 1


class ConfigError(FdiaError):
    exit_code = 2


class CaseFormatError(ConfigError):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NetworkValidationError(ConfigError):
    pass


class AttackSpecError(ConfigError):
    pass


class DimensionError(FdiaError, ValueError):
    exit_code = 2


class NumericalError(FdiaError):
    exit_code = 3


class ObservabilityError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(
        self, message: str, *, iterations: int = 0, last_mismatch: float = float("nan")
    ) -> None:
        self.iterations = iterations
        self.last_mismatch = last_mismatch
        super().__init__(
            f"{message} (iterations={iterations} last_mismatch={last_mismatch:.3e})"
        )


class SingularJacobianError(NumericalError):
    pass


class AttackInfeasibleError(NumericalError):
    pass


class AttackRejectedError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    def __init__(self, message: str, *, epoch: int, batch: int) -> None:
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch} batch={batch})")


class ModelFileError(FdiaError):
    exit_code = 2


class ChecksumError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


class QueueNotReadyError(FdiaError):
    exit_code = 2
