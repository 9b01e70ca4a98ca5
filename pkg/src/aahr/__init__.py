"""Desk-scale image-text matching: multi-granularity encoding, prototype
alignment with entropic transport, momentum memory-bank contrast, batch-graph
neighborhood interaction, and a multi-positive retrieval evaluation suite."""

__version__ = "0.1.0"

from . import encoder, metrics, momentum, neighborhood, prototype, tensorio, trainer
from .errors import AahrError

__all__ = [
    "AahrError",
    "encoder",
    "metrics",
    "momentum",
    "neighborhood",
    "prototype",
    "tensorio",
    "trainer",
    "__version__",
]
