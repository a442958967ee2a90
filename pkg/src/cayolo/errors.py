"""Exception hierarchy shared by every cayolo module."""


class CayoloError(Exception):
    """Base class for toolkit errors."""


class ShapeError(CayoloError, ValueError):
    """Array extents do not satisfy an operation's contract."""


class GeometryError(ShapeError):
    """An operation would produce an empty spatial result."""


class ParameterError(CayoloError, ValueError):
    """A scalar hyper-parameter or parameter vector is invalid."""


class ConfigError(CayoloError, ValueError):
    """A configuration file or config object is invalid."""


class DomainError(CayoloError, ValueError):
    """A box or extent lies outside the domain of a geometric function."""


class InsufficientDataError(CayoloError, ValueError):
    """Fewer samples than the algorithm needs."""


class AnnotationError(CayoloError, ValueError):
    """Base for VOC annotation problems."""


class AnnotationParseError(AnnotationError):
    """Malformed XML. ``offset`` is the byte offset of the failure."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class SchemaError(AnnotationError):
    """A required element is missing; ``field`` names it."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class InvariantError(AnnotationError):
    """A parsed box violates the corner-ordering or bounds invariants."""
