"""Exception types shared across the package."""


class StrokeScreenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(StrokeScreenError):
    """Invalid configuration or incompatible shapes detected at build time."""


class DataError(StrokeScreenError):
    """Malformed or inconsistent input data."""


class UnsupportedFormatError(DataError):
    """A media file is not in a format this package reads."""


class PoseEstimationError(StrokeScreenError):
    """Head pose could not be recovered from the given correspondences."""


class StaleGradientError(StrokeScreenError):
    """An optimizer step was attempted before gradients were populated."""


class TrainingDivergedError(StrokeScreenError):
    """A loss became non-finite during training."""
