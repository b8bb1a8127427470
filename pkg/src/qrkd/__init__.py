"""Relational knowledge distillation with quantum-kernel similarity terms."""
from .exceptions import (CapacityError, FormatError, GraphError, QRKDError, ShapeError,
                         ValidationError)

__version__ = "0.1.0"

__all__ = ["CapacityError", "FormatError", "GraphError", "QRKDError", "ShapeError",
           "ValidationError", "__version__"]
