"""Exception types raised across the package.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``FormatError`` -> 3,
anything else derived from ``IronError`` -> 4.
"""


class IronError(Exception):
    """Base class for all package errors."""


class ConfigError(IronError, ValueError):
    """A configuration value violates its invariant."""


class FormatError(IronError):
    """A binary file has the wrong magic, version or layout."""


class DegenerateGeometryError(IronError):
    """A pose cannot be turned into a usable ground-plane homography."""


class ProjectiveDegeneracyError(IronError):
    """A point maps onto (or too close to) the line at infinity."""

    def __init__(self, index, w):
        super().__init__(f"point {index} maps to the plane at infinity (w={w:.3e})")
        self.index = index
        self.w = w


class SingularMatrixError(IronError):
    """A matrix is too ill-conditioned to invert."""


class EmptyInputError(IronError, ValueError):
    """An operation received an empty point set or dataset."""


class BoundaryError(IronError, IndexError):
    """A grid index lies too close to the tensor boundary."""

    def __init__(self, axis, index, lo, hi):
        super().__init__(f"center index {index} on axis {axis} outside admissible range [{lo}, {hi}]")
        self.axis = axis
        self.index = index


class ShapeError(IronError, ValueError):
    """Array shapes do not match what an operation expects."""


class CacheError(IronError):
    """A forward cache does not belong to the model/pass it is used with."""


class DivergenceError(IronError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class NonFiniteScoreError(IronError, FloatingPointError):
    """An objective returned NaN or inf during optimization."""

    def __init__(self, point, value):
        super().__init__(f"objective returned {value} at {list(point)}")
        self.point = point
        self.value = value


class GenerationError(IronError):
    """A synthetic scene violated a ground-truth invariant."""
