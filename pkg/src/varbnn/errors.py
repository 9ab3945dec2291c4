"""Exception hierarchy shared across the package."""


class BNNError(Exception):
    """Base class for all package errors."""


class ShapeError(BNNError, ValueError):
    """Operands have incompatible shapes."""


class ConfigurationError(BNNError, ValueError):
    """An option or declarative setting is invalid."""


class ContractError(BNNError, RuntimeError):
    """A call violated an API precondition."""


class DomainError(BNNError, ValueError):
    """An argument lies outside the domain of a density or transform."""


class NumericalError(BNNError, ArithmeticError):
    """A computation produced NaN or infinite values."""


class SamplingError(BNNError, RuntimeError):
    """A noise draw is degenerate and has to be redrawn."""


class BuildError(BNNError, ValueError):
    """A model specification cannot be instantiated."""


class DataError(BNNError, ValueError):
    """Input data failed validation."""


class TrainingDiverged(BNNError, RuntimeError):
    """Training was aborted because the loss blew up.

    The partial trace recorded up to the failure is kept on ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
