"""Exception hierarchy shared across the toolkit.

The CLI maps these onto distinct exit codes, so keep the split between
configuration problems, bad data, and contract violations.
"""


class ToolkitError(Exception):
    """Base class for every error raised by bubblekd."""


class ShapeError(ToolkitError):
    """Tensor or image extents do not fit the requested operation."""


class ParameterError(ToolkitError):
    """A hyperparameter is outside its valid range (e.g. temperature <= 0)."""


class ContractError(ToolkitError):
    """An API precondition was violated by the caller."""


class LabelError(ContractError):
    """Labels are not the expected binary / one-hot encoding."""


class ConfigError(ToolkitError):
    """A config file or model configuration is malformed."""


class DataError(ToolkitError):
    """Input data is missing, inconsistent, or unusable."""


class DegenerateInputError(DataError):
    """Input admits no meaningful answer (e.g. constant image for Otsu)."""


class CheckpointError(ToolkitError):
    """Base class for weight-container load failures."""


class BadMagicError(CheckpointError):
    """File does not start with the weight-container magic."""


class BadVersionError(CheckpointError):
    """Weight container declares an unsupported format version."""


class TruncatedPayloadError(CheckpointError):
    """Weight container ends before all declared bytes were read."""


class ChecksumMismatchError(CheckpointError):
    """Stored payload checksum does not match the recomputed one."""


class TensorMismatchError(CheckpointError):
    """Stored tensors do not match the target model's parameters."""
