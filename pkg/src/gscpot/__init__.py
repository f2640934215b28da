"""Potential-theory toolkit for spatially-coupled density-evolution systems."""

from .errors import BracketError, ConfigError, ConvergenceError, GSCError, NonFiniteError, SingularHessianError
from .model import (
    Chart,
    ProductModel,
    RegularBEC,
    SystemModel,
    VectorState,
    de_step,
    make_product_model,
    make_regular_bec,
    model_from_config,
    shipped_models,
)

__all__ = [
    "BracketError",
    "ConfigError",
    "ConvergenceError",
    "GSCError",
    "NonFiniteError",
    "SingularHessianError",
    "Chart",
    "ProductModel",
    "RegularBEC",
    "SystemModel",
    "VectorState",
    "de_step",
    "make_product_model",
    "make_regular_bec",
    "model_from_config",
    "shipped_models",
]
