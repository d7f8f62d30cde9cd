"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2, numeric/runtime failures exit 3.
"""


class SharkNetError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(SharkNetError, ValueError):
    exit_code = 1


class DataError(SharkNetError):
    exit_code = 2


class ShapeError(SharkNetError, ValueError):
    exit_code = 3


class TrainingError(SharkNetError, RuntimeError):
    exit_code = 3


class CheckpointError(DataError):
    """Raised when a checkpoint cannot be loaded.

    ``kind`` is one of ``"checksum"``, ``"version"``, ``"truncated"`` or
    ``"format"``.
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
