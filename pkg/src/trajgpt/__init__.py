"""TrajGPT: selective recurrent attention over irregularly-sampled sequences."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ContractViolation,
    DataFormatError,
    NumericFailure,
    TrajGPTError,
)
