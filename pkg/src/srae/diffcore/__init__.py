"""Differentiable-computation substrate for the SRAE operator set."""

from .gradcheck import GradCheckReport, finite_diff_check, numeric_grad, relative_error
from .graph import (
    ContractError,
    GraphError,
    NumericError,
    OpGraph,
    ShapeError,
    Trace,
    backward,
    evaluate,
)
from .ops import LEAKY_SLOPE, OPS

__all__ = [
    "ContractError",
    "GradCheckReport",
    "GraphError",
    "LEAKY_SLOPE",
    "NumericError",
    "OPS",
    "OpGraph",
    "ShapeError",
    "Trace",
    "backward",
    "evaluate",
    "finite_diff_check",
    "numeric_grad",
    "relative_error",
]
