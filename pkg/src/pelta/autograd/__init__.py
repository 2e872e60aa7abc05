"""Explicit computational graphs with reverse-mode differentiation."""

from .engine import BackwardResult, backprop, backward, finite_diff_grad, forward
from .errors import (
    CycleError,
    EdgeOrderError,
    GraphError,
    MissingParameterError,
    NoForwardPassError,
    NonScalarLossError,
    NumericalError,
    ShapeError,
)
from .graph import Graph, GraphBuilder, Node, build_graph, init_params, loads
from .ops import ALL_KINDS, OPS, sign, transposed_conv2d

__all__ = [
    "ALL_KINDS",
    "OPS",
    "BackwardResult",
    "CycleError",
    "EdgeOrderError",
    "Graph",
    "GraphBuilder",
    "GraphError",
    "MissingParameterError",
    "NoForwardPassError",
    "Node",
    "NonScalarLossError",
    "NumericalError",
    "ShapeError",
    "backprop",
    "backward",
    "build_graph",
    "finite_diff_grad",
    "forward",
    "init_params",
    "loads",
    "sign",
    "transposed_conv2d",
]
