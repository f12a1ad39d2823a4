"""Statically vectorized parallel-for over tensor dataflow graphs."""

from . import errors
from .apps import jacobian, map_fn, per_example_gradients, pfor
from .autodiff import gradient
from .builder import GraphBuilder
from .graph import Block, Graph, Node, Ref
from .interp import Executor, RngState, VariableStore, execute
from .serialize import dump, dumps, load, loads
from .tensor import DType, TensorValue, allclose, ones, scalar, tensor, zeros
from .vectorize import (
    Diagnostics,
    Policy,
    WrappedValue,
    default_registry,
    vectorize_body,
    vectorize_graph,
)

__version__ = "0.1.0"

__all__ = [
    "Block", "Diagnostics", "DType", "Executor", "Graph", "GraphBuilder",
    "Node", "Policy", "Ref", "RngState", "TensorValue", "VariableStore",
    "WrappedValue", "allclose", "default_registry", "dump", "dumps", "errors",
    "execute", "gradient", "jacobian", "load", "loads", "map_fn", "ones",
    "per_example_gradients", "pfor", "scalar", "tensor", "vectorize_body",
    "vectorize_graph", "zeros", "__version__",
]
