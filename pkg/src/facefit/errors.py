"""Exception hierarchy shared across the package."""


class FaceFitError(Exception):
    """Base class for every error raised by this package."""


class FormatError(FaceFitError):
    """A binary or text input does not conform to its file format.

    Messages include the byte offset (for binary containers) or the
    line/record (for text formats) where parsing failed.
    """


class ValidationError(FaceFitError):
    """A value violates a documented invariant; the message names the field."""


class DegenerateModelError(FaceFitError):
    """Model geometry does not support the requested operation (zero extent, empty mesh)."""


class DegeneratePoseError(FaceFitError):
    """Point configuration does not determine a pose (collinear or coincident points)."""


class ConfigError(FaceFitError):
    """A pipeline configuration file or value is invalid."""
