"""Exception types shared across the package.

The CLI maps these onto process exit codes, so keep the hierarchy flat.
"""


class DegenerateInputError(ValueError):
    """Input is well-formed but a metric or transform is undefined for it."""


class ConfigError(ValueError):
    """Invalid configuration values (model, filter, split or CLI config)."""


class FormatError(ValueError):
    """A record or manifest file could not be parsed."""


class DataError(ValueError):
    """A record parsed fine but carries unusable samples (NaN/Inf)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or written by an incompatible version."""


class TrainingFault(RuntimeError):
    """Training diverged (non-finite loss or gradients)."""

    def __init__(self, message, last_good_path=None):
        super().__init__(message)
        self.last_good_path = last_good_path
