"""Exception hierarchy shared by every dualbatch module."""

from __future__ import annotations


class DualBatchError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateInput(DualBatchError, ValueError):
    """Regression input has no spread in the explanatory variable."""


class NonPositiveSlope(DualBatchError, ValueError):
    """A fitted per-sample cost came out <= 0, so the profile is unusable."""


class BenchmarkFailure(DualBatchError, RuntimeError):
    def __init__(self, batch_size: int, cause: BaseException | None = None):
        self.batch_size = batch_size
        self.cause = cause
        super().__init__(f"benchmark failed at batch size {batch_size}: {cause!r}")


class BudgetTooSmall(DualBatchError, ValueError):
    """Memory budget does not even cover the fixed (parameter) cost."""


class NoWorkers(DualBatchError, ValueError):
    pass


class InfeasibleSmallBatch(DualBatchError, ValueError):
    """No positive small batch size meets the time budget for this split."""


class ScheduleError(DualBatchError, ValueError):
    pass


class InconsistentArity(ScheduleError):
    pass


class InfeasibleSchedule(ScheduleError):
    pass


class OutOfRange(ScheduleError, IndexError):
    pass


class BadResolution(DualBatchError, ValueError):
    pass


class NonFiniteActivation(DualBatchError, FloatingPointError):
    pass


class NonFiniteGradient(DualBatchError, FloatingPointError):
    pass


class PlanExceedsData(DualBatchError, ValueError):
    pass


class UnknownWorker(DualBatchError, KeyError):
    pass


class DimensionMismatch(DualBatchError, ValueError):
    pass


class MissingSnapshot(DualBatchError, RuntimeError):
    pass


class DeadlockError(DualBatchError, RuntimeError):
    """A barrier or SSP wait did not resolve within the deadlock timeout."""


class RunAborted(DualBatchError, RuntimeError):
    """A worker failed; ``metrics`` holds the epochs completed before the failure."""

    def __init__(self, message: str, metrics=None):
        super().__init__(message)
        self.metrics = metrics


class ConfigError(DualBatchError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
