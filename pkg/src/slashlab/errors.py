"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config errors -> 1,
data/dataset errors -> 2, numeric aborts -> 3.
"""


class SlashlabError(Exception):
    pass


class ShapeError(SlashlabError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(SlashlabError, ValueError):
    """Invalid configuration value (bad temperature, even kernel size, ...)."""


class UsageError(SlashlabError, RuntimeError):
    """API misuse: non-scalar loss, consumed tape, gt points at inference, ..."""


class DataError(SlashlabError, RuntimeError):
    """Dataset on disk is missing, corrupt, or of an incompatible version."""


class GenerationError(SlashlabError, RuntimeError):
    """Procedural scene generation could not satisfy its constraints."""


class NumericError(SlashlabError, RuntimeError):
    """Non-finite loss or a failed numeric check; aborts the run."""


class CheckpointError(SlashlabError, RuntimeError):
    """Checkpoint file is unreadable or from an incompatible version."""
