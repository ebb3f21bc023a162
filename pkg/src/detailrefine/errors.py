"""Exception hierarchy shared across the package."""


class RefineError(Exception):
    """Base class for all errors raised by detailrefine."""


class BoundaryError(RefineError, ValueError):
    """A rectangle or window falls outside the image it refers to."""


class ShapeError(RefineError, ValueError):
    pass


class EmptyRegionError(RefineError, ValueError):
    pass


class ImageFormatError(RefineError, ValueError):
    """Unreadable file or an unsupported pixel format / bit depth."""


class SpecError(RefineError, ValueError):
    """Invalid scene, degradation or model configuration."""


class SelectionError(RefineError, RuntimeError):
    pass


class DegradationError(RefineError, RuntimeError):
    """Degenerate parameters, or no visible change after all retries."""


class VocabularyError(RefineError, KeyError):
    pass


class NumericalError(RefineError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class DegenerateDensityError(RefineError, ValueError):
    pass


class CheckpointError(RefineError, ValueError):
    pass
