"""Deformable referring-segmentation kit: numpy kernels, losses and a toy benchmark."""

from .errors import (
    DrkError,
    FormatError,
    GenerationError,
    NumericError,
    ShapeError,
    TrainingError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DrkError",
    "FormatError",
    "GenerationError",
    "NumericError",
    "ShapeError",
    "TrainingError",
    "ValidationError",
]
