"""Bilevel graph learning with unrolled hypergradients and scarcity diagnostics."""

from .tensor import ContractError, DimensionError, Tape, Var, grad_check
from .graph import NodeSplit, SupportPattern, WeightedGraph

__all__ = [
    "ContractError",
    "DimensionError",
    "NodeSplit",
    "SupportPattern",
    "Tape",
    "Var",
    "WeightedGraph",
    "grad_check",
]
__version__ = "0.1.0"
