"""Layers used by the pipeline: affine maps, pre-norm transformer blocks,
row-normalized graph convolution, small MLPs, and the masked MSE loss.

Each layer comes as an ``init_*`` function that registers parameters under a
path prefix and an apply function that reads them back. Apply functions take
Tensors (or arrays, promoted to constants) and are differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .store import ParameterStore

WEEK_HOURS = 168  # positional-embedding vocabulary: hour-of-week slots


@dataclass(frozen=True)
class LayerSpec:
    """Widths and depths shared by the encoder/decoder/transfer stacks."""

    d: int = 128
    d_q: int = 128
    heads: int = 4
    ff_width: int | None = None
    enc_depth: int = 2
    dec_depth: int = 1

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("model width must be divisible by head count")
        if min(self.d, self.d_q, self.heads, self.enc_depth, self.dec_depth) <= 0:
            raise ValueError("all layer sizes must be positive")

    @property
    def ff(self) -> int:
        return self.ff_width if self.ff_width is not None else 4 * self.d


def init_linear(store: ParameterStore, path: str, n_in: int, n_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    store.add(f"{path}/W", rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in)))
    if bias:
        store.add(f"{path}/b", np.zeros(n_out))


def linear(store: ParameterStore, path: str, x) -> Tensor:
    """y = x W^T + b for W of shape (out, in)."""
    x = as_tensor(x)
    W = store[f"{path}/W"]
    if x.shape[-1] != W.shape[-1]:
        raise ValueError(f"linear {path}: input width {x.shape[-1]} != {W.shape[-1]}")
    y = ad.matmul(x, ad.transpose2d(W))
    if f"{path}/b" in store:
        y = y + store[f"{path}/b"]
    return y


def init_layer_norm(store: ParameterStore, path: str, dim: int) -> None:
    store.add(f"{path}/g", np.ones(dim))
    store.add(f"{path}/b", np.zeros(dim))


def layer_norm(store: ParameterStore, path: str, x, eps: float = 1e-8) -> Tensor:
    x = as_tensor(x)
    mu = ad.tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.tmean(xc * xc, axis=-1, keepdims=True)
    y = xc * ad.power(var + eps, -0.5)
    return y * store[f"{path}/g"] + store[f"{path}/b"]


def init_transformer_block(store: ParameterStore, prefix: str, d: int, ff: int,
                           rng: np.random.Generator) -> None:
    init_layer_norm(store, f"{prefix}/ln1", d)
    for name in ("Wq", "Wk", "Wv", "Wo"):
        init_linear(store, f"{prefix}/attn/{name}", d, d, rng)
    init_layer_norm(store, f"{prefix}/ln2", d)
    init_linear(store, f"{prefix}/ff/l1", d, ff, rng)
    init_linear(store, f"{prefix}/ff/l2", ff, d, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    x = ad.reshape(x, (*lead, L, heads, d // heads))
    return ad.swapaxes(x, -2, -3)  # (..., heads, L, d_head)


def _merge_heads(x: Tensor) -> Tensor:
    x = ad.swapaxes(x, -2, -3)
    *lead, L, h, dh = x.shape
    return ad.reshape(x, (*lead, L, h * dh))


def attention_weights(store: ParameterStore, prefix: str, x, heads: int) -> Tensor:
    """Row-stochastic attention weights of the block's self-attention."""
    x = as_tensor(x)
    h = layer_norm(store, f"{prefix}/ln1", x)
    q = _split_heads(linear(store, f"{prefix}/attn/Wq", h), heads)
    k = _split_heads(linear(store, f"{prefix}/attn/Wk", h), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    return ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale, axis=-1)


def transformer_block(store: ParameterStore, prefix: str, x, heads: int) -> Tensor:
    """Pre-norm multi-head self-attention + feed-forward, both residual.

    ``x`` has shape (..., L, d); sequence length L >= 1.
    """
    x = as_tensor(x)
    if x.shape[-2] < 1:
        raise ValueError("transformer_block requires sequence length >= 1")
    h = layer_norm(store, f"{prefix}/ln1", x)
    q = _split_heads(linear(store, f"{prefix}/attn/Wq", h), heads)
    k = _split_heads(linear(store, f"{prefix}/attn/Wk", h), heads)
    v = _split_heads(linear(store, f"{prefix}/attn/Wv", h), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    w = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale, axis=-1)
    att = _merge_heads(ad.matmul(w, v))
    x = x + linear(store, f"{prefix}/attn/Wo", att)
    h2 = layer_norm(store, f"{prefix}/ln2", x)
    ff = linear(store, f"{prefix}/ff/l2", ad.relu(linear(store, f"{prefix}/ff/l1", h2)))
    return x + ff


def init_transformer_stack(store: ParameterStore, prefix: str, depth: int, d: int,
                           ff: int, rng: np.random.Generator) -> None:
    for i in range(depth):
        init_transformer_block(store, f"{prefix}/block{i}", d, ff, rng)


def transformer_stack(store: ParameterStore, prefix: str, x, depth: int,
                      heads: int) -> Tensor:
    for i in range(depth):
        x = transformer_block(store, f"{prefix}/block{i}", x, heads)
    return x


def normalize_adjacency(A) -> Tensor:
    """D^{-1}(A + I): add self-loops, then row-normalize."""
    A = as_tensor(A)
    n = A.shape[-1]
    with_loops = A + ad.constant(np.eye(n))
    return with_loops / ad.tsum(with_loops, axis=-1, keepdims=True)


def init_graph_conv(store: ParameterStore, path: str, d: int,
                    rng: np.random.Generator) -> None:
    store.add(f"{path}/W", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)))


def graph_conv(store: ParameterStore, path: str, H, A) -> Tensor:
    """H + ReLU(D^{-1}(A+I) H W) over the node axis (-2) of H.

    ``A`` is a nonnegative (N, N) matrix, constant or differentiable;
    ``H`` is (..., N, d) and leading axes broadcast against A.
    """
    H = as_tensor(H)
    A = as_tensor(A)
    if A.shape[-1] != H.shape[-2]:
        raise ValueError(f"graph_conv {path}: adjacency size {A.shape[-1]} "
                         f"!= node count {H.shape[-2]}")
    mixed = ad.matmul(normalize_adjacency(A), H)
    return H + ad.relu(ad.matmul(mixed, store[f"{path}/W"]))


def init_mlp(store: ParameterStore, prefix: str, widths: list[int],
             rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        init_linear(store, f"{prefix}/l{i}", a, b, rng)


def mlp(store: ParameterStore, prefix: str, x, n_layers: int) -> Tensor:
    """ReLU MLP; the final layer is affine."""
    for i in range(n_layers):
        x = linear(store, f"{prefix}/l{i}", x)
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def mse_loss(pred, truth, mask=None) -> Tensor:
    """Mean squared error over unmasked (or all) positions.

    The mask is a boolean array broadcastable to the prediction shape; an
    empty inclusion set yields a 0 loss with no gradient.
    """
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {truth.shape}")
    diff = pred - truth
    sq = diff * diff
    if mask is None:
        return ad.tmean(sq)
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), pred.shape)
    count = float(m.sum())
    if count == 0:
        return ad.constant(0.0)
    return ad.tsum(sq * ad.constant(m)) / count
