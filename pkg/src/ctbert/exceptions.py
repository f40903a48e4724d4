"""Exception types raised across the pipeline."""


class ConfigurationError(ValueError):
    """Invalid or missing configuration (paths, config values)."""


class CorruptInputError(ValueError):
    """An input file or raster cannot be used (unreadable, zero-sized, wrong dims)."""


class UnsegmentableVolumeError(ValueError):
    """No slice of a volume produced a usable segmentation."""


class MissingArtifactError(RuntimeError):
    """A pipeline stage was run before the stage that produces its inputs."""

    def __init__(self, message, required_stage=None):
        super().__init__(message)
        self.required_stage = required_stage


class NotFittedError(ValueError, AttributeError):
    """Estimator used before ``fit``."""
