"""Exponential-utility indifference pricing with delayed information in the Bachelier model."""
from .model_core import (
    ModelParams,
    PayoffSpec,
    QuadratureRule,
    SeededStream,
    butterfly,
    capped_call,
    constant_payoff,
    gauss_quadrature,
    two_plateau,
    validate_payoff,
)

__version__ = "0.1.0"

__all__ = [
    "ModelParams",
    "PayoffSpec",
    "QuadratureRule",
    "SeededStream",
    "butterfly",
    "capped_call",
    "constant_payoff",
    "gauss_quadrature",
    "two_plateau",
    "validate_payoff",
]
