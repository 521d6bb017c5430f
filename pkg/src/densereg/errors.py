class DenseRegError(Exception):
    """Base class for all package errors."""


class ContainerError(DenseRegError, ValueError):
    pass


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class InvariantError(DenseRegError, ValueError):
    pass


class DimensionError(DenseRegError, ValueError):
    pass


class SchemaError(DenseRegError, ValueError):
    pass


class SolverError(DenseRegError, ArithmeticError):
    pass


class OptimizationError(DenseRegError, ArithmeticError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration
