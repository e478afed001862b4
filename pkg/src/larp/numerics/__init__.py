"""Dense tensors with reverse-mode autodiff, neural operators and gradient checking."""

from . import ops
from .gradcheck import GradCheckError, grad_check, grad_check_many
from .layers import Block, LayerNorm, Linear, Module, Transformer, sincos_1d, sincos_3d
from .ops import forward_op
from .rng import split, stream
from .tensor import ShapeError, Tensor, default_dtype, graph_nodes, no_grad, parameter, precision

__all__ = [
    "Block",
    "GradCheckError",
    "LayerNorm",
    "Linear",
    "Module",
    "ShapeError",
    "Tensor",
    "Transformer",
    "default_dtype",
    "forward_op",
    "grad_check",
    "grad_check_many",
    "graph_nodes",
    "no_grad",
    "ops",
    "parameter",
    "precision",
    "sincos_1d",
    "sincos_3d",
    "split",
    "stream",
]
