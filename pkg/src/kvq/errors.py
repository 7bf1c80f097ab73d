"""Exception hierarchy shared across the toolkit.

CLI exit-code mapping: UsageError -> 2, DataFormatError -> 3, NumericError -> 4.
"""


class KvqError(Exception):
    """Base class for all toolkit errors."""


class UsageError(KvqError):
    """Bad arguments or configuration supplied by the caller."""


class DimensionError(KvqError):
    """Tensor shape mismatch; message names both shapes."""


class NumericError(KvqError):
    """Non-finite values or other numeric failures, tagged with the op name."""


class DegenerateScaleError(NumericError):
    """A divisor or smoothing scale fell below the 1e-12 / 1e-6 floor."""


class CapacityError(KvqError):
    """Sequence exceeds max_seq_len or the KV cache is full."""


class DataFormatError(KvqError):
    """Malformed checkpoint/corpus; message carries the byte position if known."""


class AccountingError(KvqError):
    """Analyzer and runtime byte counts disagree; message lists both values."""
