"""Exception hierarchy shared by every urgate module."""


class UrgateError(Exception):
    """Base class for all errors raised by urgate."""


class ShapeError(UrgateError, ValueError):
    """Array shapes do not conform."""


class ConfigError(UrgateError, ValueError):
    """An experiment or gate configuration is invalid."""


class DivergenceError(UrgateError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class FormatError(UrgateError, ValueError):
    """A binary file (IDX, checkpoint, batch cache) is malformed."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GradcheckError(UrgateError):
    """Analytic gradients disagree with finite differences."""

    def __init__(self, failures: dict[str, float], tolerance: float) -> None:
        listed = ", ".join(f"{k}={v:.3e}" for k, v in sorted(failures.items()))
        super().__init__(f"gradient check failed (tol {tolerance:g}): {listed}")
        self.failures = failures
        self.tolerance = tolerance
