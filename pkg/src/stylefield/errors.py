"""Exception hierarchy. Validation errors map to CLI exit code 2, numerical
failures to exit code 3."""


class ValidationError(ValueError):
    """Bad inputs, ranges, shapes, or preconditions."""


class DatasetFormatError(ValidationError):
    """On-disk dataset layout is missing pieces or inconsistent."""


class DatasetIntegrityError(DatasetFormatError):
    """A specific stored artifact is corrupt; carries the offending path."""

    def __init__(self, message: str, path=None, frame=None):
        super().__init__(message)
        self.path = path
        self.frame = frame


class NumericalError(RuntimeError):
    """Base for runtime numerical failures."""


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its budget; carries the residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class DegenerateSpectrumError(NumericalError):
    """Eigenvalue gap fell below the differentiability threshold."""

    def __init__(self, message: str, gap: float | None = None):
        super().__init__(message)
        self.gap = gap


class DivergenceError(NumericalError):
    """A training loop produced a non-finite loss or collapsed."""

    def __init__(self, message: str, iteration: int | None = None, lr: float | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.lr = lr
