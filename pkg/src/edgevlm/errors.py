"""Exception hierarchy shared across the package."""


class EdgeVLMError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EdgeVLMError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(EdgeVLMError, FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


class ConfigError(EdgeVLMError, ValueError):
    """A configuration value violates its constraints."""


class ContractError(EdgeVLMError, ValueError):
    """A caller broke an operation's precondition."""


class InputError(EdgeVLMError, ValueError):
    """Malformed user-supplied data (images, dimensions, records)."""


class DecodeError(EdgeVLMError, ValueError):
    """A token id cannot be mapped back to text."""


class ContextOverflowError(EdgeVLMError):
    """A sequence does not fit in the model's context window."""


class DatasetError(EdgeVLMError):
    """A dataset yielded no usable records."""


class TrainingError(EdgeVLMError):
    """Training diverged or was started with inconsistent inputs."""


class CheckpointError(EdgeVLMError):
    """A checkpoint cannot be written, read or matched to a config."""


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class TensorSetError(CheckpointError):
    """Stored tensor names or shapes disagree with the config."""
