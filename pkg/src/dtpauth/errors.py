"""Exception hierarchy shared by every pipeline stage."""


class DtpAuthError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DtpAuthError, ValueError):
    """A parameter or configuration value is outside its allowed domain."""


class InputError(DtpAuthError, ValueError):
    """Input data does not satisfy an operation's preconditions."""


class DegenerateInputError(InputError):
    """Input is empty, all-zero or otherwise carries no information."""


class ContractViolationError(InputError):
    """Input violates a documented contract (e.g. AWGN on a non-normalized frame)."""


class DetectionFailedError(DtpAuthError):
    """No burst could be located in a captured frame."""


class EstimationFailedError(DtpAuthError):
    """A synchronization estimator could not produce a reliable estimate."""


class ConvergenceError(DtpAuthError):
    """A tracking loop diverged."""


class NumericError(DtpAuthError, FloatingPointError):
    """A non-finite value appeared during computation."""


class TrainingError(DtpAuthError):
    """Training diverged; carries the epoch where it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class StageError(DtpAuthError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause, capture_id=None):
        where = f"stage '{stage}'"
        if capture_id is not None:
            where += f" (capture {capture_id})"
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.cause = cause
        self.capture_id = capture_id
