"""SharkNet-X: a from-scratch CNN toolkit for fossil shark-tooth classification."""

__version__ = "0.1.0"

from .errors import CheckpointError, ConfigError, DataError, ShapeError, SharkNetError, TrainingError  # noqa: E402,F401
