"""Attention-based deep metric learning with adversarial regularization for zero-shot retrieval."""

from . import adversary, extractor, gradcore, losses, metrics, tuples
from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, DomainError,
                     FormatError, IncompatibleCheckpointError, NonFiniteError, ParameterError,
                     ProtocolError, ZslMetricError)
from .gradcore import Tape, Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "adversary", "extractor", "gradcore", "losses", "metrics", "tuples",
    "Tape", "Tensor", "backward", "grad_check", "no_grad",
    "ZslMetricError", "ConfigError", "ContractError", "DimensionError", "DivergenceError",
    "DomainError", "FormatError", "IncompatibleCheckpointError", "NonFiniteError",
    "ParameterError", "ProtocolError",
]
