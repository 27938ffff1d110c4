"""Exception hierarchy shared by the estimator, simulator, harness and CLI."""


class DKPCAError(Exception):
    """Base class for all package errors."""


class InvalidDimensionError(DKPCAError, ValueError):
    pass


class DegenerateIterateError(DKPCAError, ValueError):
    """Raised when an operation receives the zero vector as an iterate."""


class InvalidBatchError(DKPCAError, ValueError):
    pass


class NumericOverflowError(DKPCAError, ArithmeticError):
    pass


class UnsupportedRegimeError(DKPCAError, ValueError):
    """Raised for step constants with c0 <= 2, where no speed-up result exists."""


class ModelInconsistencyError(DKPCAError, ValueError):
    pass


class IndexRangeError(DKPCAError, IndexError):
    pass


class DimensionMismatchError(DKPCAError, ValueError):
    pass


class SampleCountError(DKPCAError, ValueError):
    pass


class NonConvergenceError(DKPCAError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(DKPCAError, ValueError):
    pass


class DataError(DKPCAError, OSError):
    pass


class InsufficientPointsError(DKPCAError, ValueError):
    pass


class EndOfStream(DKPCAError):
    """Signals that the stream ran dry in the middle of a (B + mu) block.

    Carries the partial accounting so the caller can record a final point.
    """

    def __init__(self, received, processed, discarded):
        super().__init__(
            f"stream exhausted: received={received} processed={processed} "
            f"discarded={discarded}"
        )
        self.received = received
        self.processed = processed
        self.discarded = discarded
