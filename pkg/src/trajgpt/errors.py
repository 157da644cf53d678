"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ContractViolation -> 1,
DataFormatError -> 2, NumericFailure -> 3.
"""


class TrajGPTError(Exception):
    """Base class for all library errors."""


class ContractViolation(TrajGPTError):
    """An operation was called outside its documented precondition."""


class DataFormatError(TrajGPTError):
    """A file or stream does not conform to its declared format."""


class NumericFailure(TrajGPTError):
    """A computation produced non-finite values (NaN/Inf abort)."""


class CheckpointError(DataFormatError):
    """Base class for checkpoint read failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ended in the middle of a declared record."""


class CheckpointShapeError(CheckpointError):
    """A tensor record's declared shape disagrees with its payload."""


class CheckpointPrecisionError(CheckpointError):
    """Checkpoint precision does not match the requested run precision."""
