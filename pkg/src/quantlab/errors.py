"""Exception types raised across the toolkit."""


class QuantLabError(Exception):
    """Base class for all toolkit errors."""


class IoFailure(QuantLabError, OSError):
    """A file could not be read or written."""


class MalformedHeader(QuantLabError):
    """A tensor dump does not start with a valid header."""


class ShapeMismatch(QuantLabError):
    """A tensor dump payload does not match its declared shape."""


class NonFiniteValue(QuantLabError, ValueError):
    """A tensor contains NaN or +/-Inf.

    ``index`` is the (row, col) position of the first offending value.
    """

    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(f"non-finite value {value!r} at index {index}")


class DegenerateScale(QuantLabError, ValueError):
    """A calibration statistic is zero, so no positive scale exists."""


class InvalidK(QuantLabError, ValueError):
    """Group count outside [1, channels]."""


class PolicyLengthMismatch(QuantLabError, ValueError):
    """A precision policy does not have one directive per layer."""


class InsufficientRows(QuantLabError, ValueError):
    """Too few rows for a per-channel statistic."""


class ZeroVariance(QuantLabError, ValueError):
    """A standardized moment was requested for a constant tensor."""


class SingularProbe(QuantLabError):
    """The probe's least-squares system is rank-deficient."""
