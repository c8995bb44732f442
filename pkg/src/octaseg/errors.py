"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad argument values: non-binary masks, invalid sizes, negative scales."""


class ShapeError(ValidationError):
    """Tensor/array shape or divisibility violation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names the first bad tensor."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, unreadable, or incompatible with the requested run."""


class DataLoadError(RuntimeError):
    """Dataset directory malformed; message names the offending sample id."""
