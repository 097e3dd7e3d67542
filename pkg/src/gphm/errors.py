"""Exception types raised across the package."""

import numpy as np


class DomainError(ValueError):
    """Input outside the domain an operation is defined on."""


class UnsupportedOrderError(ValueError):
    """Derivative order above what the closed-form kernels provide (max 2)."""


class UnsupportedKindError(ValueError):
    """Operation not defined for the requested kernel kind."""


class DimensionError(ValueError):
    """Shape mismatch between a tensor and the operator applied to it."""


class NonPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failed for every jitter on the ladder."""

    def __init__(self, dim, jitters):
        self.dim = dim
        self.jitters = list(jitters)
        ladder = ", ".join(f"{j:.1e}" for j in self.jitters)
        super().__init__(
            f"Gram matrix of dimension {dim} is not positive definite "
            f"after jitter ladder [{ladder}]"
        )


class QuadratureRangeError(RuntimeError):
    """Quadrature window leaves too much spectral mass outside."""


class GradientError(FloatingPointError):
    """A non-finite value showed up while computing a gradient."""

    def __init__(self, op, stage="forward"):
        self.op = op
        self.stage = stage
        super().__init__(f"non-finite {stage} value produced by operation '{op}'")


class ObjectiveError(FloatingPointError):
    """The training objective evaluated to a non-finite number."""

    def __init__(self, term):
        self.term = term
        super().__init__(f"objective term '{term}' is not finite")


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration, trace=None, param=None):
        self.iteration = iteration
        self.trace = trace
        self.param = param
        super().__init__(message)


class ConfigError(ValueError):
    """Invalid run configuration file."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
