"""Differentiable numeric core: tape autodiff, layers, optimizer, gradient oracle."""

from . import autodiff
from .autodiff import Tensor, as_tensor, constant, no_grad, softmax
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import (
    WEEK_HOURS,
    LayerSpec,
    attention_weights,
    graph_conv,
    init_graph_conv,
    init_layer_norm,
    init_linear,
    init_mlp,
    init_transformer_block,
    init_transformer_stack,
    layer_norm,
    linear,
    mlp,
    mse_loss,
    normalize_adjacency,
    transformer_block,
    transformer_stack,
)
from .store import ParameterStore, adam_step, load_param_arrays, sgd_step

__all__ = [
    "Tensor", "as_tensor", "constant", "no_grad", "softmax", "autodiff",
    "GradCheckReport", "finite_diff_check",
    "WEEK_HOURS", "LayerSpec", "attention_weights", "graph_conv",
    "init_graph_conv", "init_layer_norm", "init_linear", "init_mlp",
    "init_transformer_block", "init_transformer_stack", "layer_norm", "linear",
    "mlp", "mse_loss", "normalize_adjacency", "transformer_block",
    "transformer_stack",
    "ParameterStore", "adam_step", "load_param_arrays", "sgd_step",
]
