"""Exception types shared across the engine.

Every failure mode that callers are expected to branch on gets its own
class; plain ValueError is reserved for programming errors (bad arguments
that no caller should ever pass).
"""


class FedsiError(Exception):
    """Base class for all engine errors."""


class DimensionMismatch(FedsiError):
    """Operand shapes are incompatible."""


class NotPositiveDefinite(FedsiError):
    """A symmetric factorization hit a non-positive pivot.

    `pivot` is the zero-based index of the failing pivot.
    """

    def __init__(self, pivot: int, message: str = ""):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (pivot {pivot})")


class NonFiniteLoss(FedsiError):
    """Training loss became NaN or infinite; the client round is abandoned."""


class IndexOutOfRange(FedsiError):
    """A parameter index set is invalid (out of bounds, unsorted, or duplicated)."""


class SizeTooLarge(FedsiError):
    """Requested subnetwork size exceeds the number of candidate parameters."""


class EmptyUpdateSet(FedsiError):
    """Server aggregation received no client updates."""


class EmptyRecords(FedsiError):
    """A metric was requested over zero prediction records."""


class BadMagic(FedsiError):
    """IDX payload does not start with a recognized magic number."""


class TruncatedPayload(FedsiError):
    """IDX payload is shorter than its header declares."""


class DimensionOverflow(FedsiError):
    """IDX header declares dimensions that are negative or absurdly large."""


class InsufficientExamples(FedsiError):
    """A dataset split or subset request needs more examples than available."""


class ConfigError(FedsiError):
    """Experiment configuration failed validation; message names the field."""
