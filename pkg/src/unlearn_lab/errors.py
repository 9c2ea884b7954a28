"""Exception hierarchy.

Every error raised on purpose by the package derives from ``UnlearnLabError``
so callers (and the CLI) can separate domain failures from bugs.
"""


class UnlearnLabError(Exception):
    """Base class for all package errors."""


# numerics

class NonFiniteLoss(UnlearnLabError, ArithmeticError):
    def __init__(self, stage, value=None):
        self.stage = stage
        self.value = value
        super().__init__(f"non-finite value in {stage}" + ("" if value is None else f": {value!r}"))


class EmptyBatch(UnlearnLabError, ValueError):
    pass


class DimensionMismatch(UnlearnLabError, ValueError):
    def __init__(self, expected, got, what="vector"):
        self.expected = expected
        self.got = got
        super().__init__(f"{what}: expected dimension {expected}, got {got}")


class NoConvergence(UnlearnLabError, RuntimeError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"no convergence after {iterations} iterations (residual {residual:.3e})")


class NotPositiveDefinite(UnlearnLabError, ArithmeticError):
    def __init__(self, curvature, iteration):
        self.curvature = curvature
        self.iteration = iteration
        super().__init__(f"non-positive curvature {curvature:.3e} at CG iteration {iteration}")


# models / datasets

class BadLabel(UnlearnLabError, ValueError):
    pass


class InvariantViolation(UnlearnLabError, ValueError):
    pass


class UnsupportedVersion(UnlearnLabError, ValueError):
    pass


class ParseError(UnlearnLabError, ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class EmptyDataset(UnlearnLabError, ValueError):
    pass


class CountMismatch(UnlearnLabError, ValueError):
    pass


class BadRatio(UnlearnLabError, ValueError):
    pass


# training / unlearning / evaluation

class Diverged(UnlearnLabError, RuntimeError):
    def __init__(self, epoch, loss=None):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")


class EmptyForgetSet(UnlearnLabError, ValueError):
    pass


class NonFiniteUpdate(UnlearnLabError, ArithmeticError):
    pass


class BadStep(UnlearnLabError, ValueError):
    pass


class PoolTooSmall(UnlearnLabError, ValueError):
    pass


class SpecMismatch(UnlearnLabError, ValueError):
    pass


class ConfigError(UnlearnLabError, ValueError):
    """Configuration validation failure; ``field`` is a dotted path."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(prefix + message)
