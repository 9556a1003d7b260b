"""Reverse-mode autodiff over numpy arrays with higher-order gradients."""

from .graph import Graph, Node, UnboundLeafError
from .ops import PUBLIC_KINDS, ShapeError, UnsupportedPrimitive

__all__ = ["Graph", "Node", "UnboundLeafError", "ShapeError", "UnsupportedPrimitive", "PUBLIC_KINDS"]
