"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameters or configuration values."""


class InvariantError(ValueError):
    """An input violates a shape or value contract."""


class DatasetError(RuntimeError):
    """The dataset on disk is incomplete or malformed."""


class SamplingError(RuntimeError):
    """Reverse diffusion produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ProtocolError(RuntimeError):
    """The evaluation protocol cannot be applied to the given data."""


class CheckpointError(RuntimeError):
    """A checkpoint archive cannot be loaded."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss."""
