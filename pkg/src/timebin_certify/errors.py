"""Exception types shared across the pipeline."""


class TimebinError(Exception):
    """Base class for all errors raised by this package."""


class MalformedHeader(TimebinError):
    """Stream header is missing, carries a bad magic, or an unsupported version."""


class TruncatedRecord(TimebinError):
    """Stream payload ends mid-record or disagrees with the header record count."""


class NonMonotonicTimestamp(TimebinError):
    """Timestamps decrease somewhere in a stream (equal timestamps are allowed)."""


class NoPeak(TimebinError):
    """No statistically significant correlation peak in the offset search range."""


class OutOfRange(TimebinError):
    """A click references a time frame before the start of the stream."""


class EmptySetting(TimebinError):
    """A required measurement setting has zero recorded coincidences."""


class Infeasible(TimebinError):
    """Density-element bounds are mutually inconsistent beyond numerical tolerance."""
