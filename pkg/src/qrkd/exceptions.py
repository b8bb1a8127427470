"""Exception hierarchy shared by every qrkd module."""


class QRKDError(Exception):
    """Base class for library errors."""


class ValidationError(QRKDError, ValueError):
    """An argument or configuration value is outside its allowed domain."""


class CapacityError(ValidationError):
    """Input does not fit the requested circuit or simulator budget."""


class ShapeError(QRKDError, ValueError):
    """Array dimensions are incompatible."""


class FormatError(QRKDError, ValueError):
    """A file does not follow the expected binary layout."""


class GraphError(QRKDError, RuntimeError):
    """Backward pass requested on something that is not part of a graph."""
