"""Desk-scale 3D scene stylization toolkit.

Pipeline: procedural scene synthesis -> conditional radiance field ->
toy style-based generator + inversion -> differentiable latent-basis
decomposition -> pose adjustor (in-domain guides) -> hidden-feature
mapper (out-of-domain guides) -> masked finetuning of the field.
"""

__version__ = "0.1.0"

from stylefield.errors import (
    ConvergenceError,
    DatasetFormatError,
    DatasetIntegrityError,
    DegenerateSpectrumError,
    DivergenceError,
    NumericalError,
    ValidationError,
)

__all__ = [
    "ConvergenceError",
    "DatasetFormatError",
    "DatasetIntegrityError",
    "DegenerateSpectrumError",
    "DivergenceError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
