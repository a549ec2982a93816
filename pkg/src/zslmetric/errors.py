"""Exception types shared across the toolkit."""


class ZslMetricError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(ZslMetricError, ValueError):
    """Operand shapes do not conform."""


class DomainError(ZslMetricError, ArithmeticError):
    """Input outside the mathematical domain of an operation (log of 0, ...)."""


class NonFiniteError(ZslMetricError, FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


class ContractError(ZslMetricError, ValueError):
    """A caller violated an operation's precondition."""


class ParameterError(ZslMetricError, ValueError):
    """A hyperparameter is outside its admissible range."""


class ConfigError(ZslMetricError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ZslMetricError, ValueError):
    """Malformed file contents."""


class ProtocolError(ZslMetricError, ValueError):
    """The zero-shot evaluation protocol was violated (class overlap, empty side)."""


class IncompatibleCheckpointError(ZslMetricError, ValueError):
    """Checkpoint was written for a different configuration."""


class DivergenceError(ZslMetricError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
