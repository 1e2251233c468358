"""Exception hierarchy shared across the package.

Every error raised on purpose derives from JsfusionError so callers can
catch package problems without swallowing genuine bugs.
"""


class JsfusionError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(JsfusionError):
    """Tensor or array dimensions do not line up."""


class InputError(JsfusionError):
    """User-supplied data is invalid (bad tokens, bad features, bad counts)."""


class ConfigError(JsfusionError):
    """A configuration value or combination of values is invalid."""


class FormatError(JsfusionError):
    """A file does not conform to its on-disk format."""


class UsageError(JsfusionError):
    """The API was called in an unsupported way."""


class TrainingDiverged(JsfusionError):
    """The training loss became non-finite."""
