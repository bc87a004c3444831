"""Forecasting heads and the end-to-end transfer model.

The short-term path is a gated dilated temporal-convolution stack with graph
convolutions over the reconstructed adjacency and skip connections; the
long-term path is a single per-node affine map over the whole history; both
are fused with the queried meta-knowledge by an MLP that emits every future
step in one shot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aggregation as AG
from . import data as D
from .bank import PatternBank
from .nn import autodiff as ad
from .nn import layers as L
from .nn.store import ParameterStore
from .pretrain import DecoderState, EncoderState, encode_unmasked


def tcn_dilations(patch_len: int) -> list[int]:
    """Greedy doubling schedule whose receptive field is exactly patch_len."""
    if patch_len < 2:
        raise ValueError("short-term model needs patches of at least 2 steps")
    out = []
    remaining = patch_len - 1
    step = 1
    while remaining > 0:
        take = min(step, remaining)
        out.append(take)
        remaining -= take
        step = min(step * 2, max(remaining, 1))
    return out


def init_short_term(store: ParameterStore, d: int, channels: int, patch_len: int,
                    rng: np.random.Generator, prefix: str = "transfer/st") -> None:
    L.init_linear(store, f"{prefix}/in", channels, d, rng)
    for l, _ in enumerate(tcn_dilations(patch_len)):
        L.init_linear(store, f"{prefix}/block{l}/filter/tap0", d, d, rng)
        L.init_linear(store, f"{prefix}/block{l}/filter/tap1", d, d, rng, bias=False)
        L.init_linear(store, f"{prefix}/block{l}/gate/tap0", d, d, rng)
        L.init_linear(store, f"{prefix}/block{l}/gate/tap1", d, d, rng, bias=False)
        L.init_graph_conv(store, f"{prefix}/block{l}/gcn", d, rng)
        L.init_linear(store, f"{prefix}/block{l}/skip", d, d, rng)
    L.init_linear(store, f"{prefix}/out1", d, d, rng)
    L.init_linear(store, f"{prefix}/out2", d, d, rng)


def short_term_forward(store: ParameterStore, S_t, A_op,
                       patch_len: int, prefix: str = "transfer/st") -> ad.Tensor:
    """Short-term embedding R_s from the last patch and the graph operator.

    ``S_t`` is (N, P, C) in normalized units; ``A_op`` is the nonnegative
    row-normalized operator (constant or differentiable). Returns (N, d).
    """
    x = L.linear(store, f"{prefix}/in", ad.as_tensor(S_t))  # (N, P, d)
    skip = None
    for l, delta in enumerate(tcn_dilations(patch_len)):
        past = x[:, :x.shape[1] - delta, :]
        now = x[:, delta:, :]
        f = ad.tanh(L.linear(store, f"{prefix}/block{l}/filter/tap0", past) +
                    L.linear(store, f"{prefix}/block{l}/filter/tap1", now))
        g = ad.sigmoid(L.linear(store, f"{prefix}/block{l}/gate/tap0", past) +
                       L.linear(store, f"{prefix}/block{l}/gate/tap1", now))
        h = f * g
        h = ad.swapaxes(h, 0, 1)  # time-major for per-slot node mixing
        h = L.graph_conv(store, f"{prefix}/block{l}/gcn", h, A_op)
        h = ad.swapaxes(h, 0, 1)
        x = now + h
        s = L.linear(store, f"{prefix}/block{l}/skip", x[:, -1, :])
        skip = s if skip is None else skip + s
    return L.linear(store, f"{prefix}/out2",
                    ad.relu(L.linear(store, f"{prefix}/out1", ad.relu(skip))))


def init_long_term(store: ParameterStore, T0: int, channels: int, d: int,
                   rng: np.random.Generator, prefix: str = "transfer/lt") -> None:
    L.init_linear(store, f"{prefix}/map", T0 * channels, d, rng)


def long_term_forward(store: ParameterStore, X_hist, T0: int, channels: int,
                      prefix: str = "transfer/lt") -> ad.Tensor:
    """Per-node affine map of the flattened (N, T0, C) history to (N, d)."""
    X_hist = ad.as_tensor(X_hist)
    if X_hist.shape[-2] != T0:
        raise ValueError(f"history length {X_hist.shape[-2]} != {T0}")
    flat = ad.reshape(X_hist, (X_hist.shape[0], T0 * channels))
    return L.linear(store, f"{prefix}/map", flat)


def init_fusion_head(store: ParameterStore, d: int, horizon: int,
                     rng: np.random.Generator, prefix: str = "transfer/head") -> None:
    L.init_mlp(store, prefix, [3 * d, 2 * d, 2 * d, horizon], rng)


def fuse_and_forecast(store: ParameterStore, Z, R_s, R_l, horizon: int,
                      prefix: str = "transfer/head") -> ad.Tensor:
    """MLP over [Z || R_s || R_l]; returns (N, horizon, 1)."""
    for name, t in (("Z", Z), ("R_s", R_s), ("R_l", R_l)):
        if ad.as_tensor(t).shape[0] != ad.as_tensor(Z).shape[0]:
            raise ValueError(f"fusion input {name} has mismatched node count")
    x = ad.concat([ad.as_tensor(Z), ad.as_tensor(R_s), ad.as_tensor(R_l)], axis=-1)
    y = L.mlp(store, prefix, x, n_layers=3)
    return ad.reshape(y, (y.shape[0], horizon, 1))


def forecast_loss(pred, truth) -> ad.Tensor:
    """Plain MSE over nodes, horizon steps, and output channels."""
    return L.mse_loss(pred, truth)


@dataclass
class ForecastWindow:
    """One (history, future) training or evaluation slice of a city."""

    X_hist: np.ndarray   # (N, T0, C) native units
    Y: np.ndarray        # (N, T', 1) native units
    week_slot: np.ndarray  # (T0/P,) hour-of-week of each history patch
    origin: int


def make_window(city: D.CityDataset, origin: int, T0: int, P: int,
                horizon: int) -> ForecastWindow:
    if origin - T0 < 0 or origin + horizon > city.num_steps:
        raise ValueError(f"window at origin {origin} out of range")
    hist = city.speed[origin - T0:origin].transpose(1, 0, 2)
    fut = city.speed[origin:origin + horizon, :, 0:1].transpose(1, 0, 2)
    steps_per_hour = 60 // city.interval_minutes
    starts = city.start_offset + (origin - T0) + np.arange(T0 // P) * P
    week_slot = (starts // steps_per_hour) % L.WEEK_HOURS
    return ForecastWindow(X_hist=hist, Y=fut, week_slot=week_slot, origin=origin)


@dataclass
class AblationFlags:
    no_meta: bool = False
    no_st_decoder: bool = False
    short_only_patterns: bool = False
    no_reconstruction: bool = False


class TransferModel:
    """Everything trained during transfer: query, adjacency, heads.

    The pretrained encoder/decoder stay frozen; they contribute the
    normalization statistics, the bank, and (optionally) the query
    embeddings. All learnable parameters live under the "transfer/" subtree.
    """

    PREFIX = "transfer"

    def __init__(self, store: ParameterStore, spec: L.LayerSpec,
                 bank: PatternBank, encoder: EncoderState,
                 decoder: DecoderState, T0: int, P: int, horizon: int,
                 gamma: float, flags: AblationFlags | None = None,
                 softmax_scores: bool = True, query_with_embeddings: bool = False):
        self.store = store
        self.spec = spec
        self.bank = bank
        self.encoder = encoder
        self.decoder = decoder
        self.T0 = T0
        self.P = P
        self.horizon = horizon
        self.gamma = gamma
        self.flags = flags or AblationFlags()
        self.softmax_scores = softmax_scores
        self.query_with_embeddings = query_with_embeddings
        self.channels = encoder.channels
        self.qs: AG.QueryState | None = None

    def init_params(self, rng: np.random.Generator) -> None:
        d = self.spec.d
        query_dim = d if self.query_with_embeddings else self.P * self.channels
        self.qs = AG.init_query(self.store, self.bank, query_dim, self.spec.d_q,
                                self.spec.heads, self.spec.ff, rng,
                                softmax_scores=self.softmax_scores,
                                prefix=self.PREFIX)
        AG.init_adjacency(self.store, d, rng, prefix=self.PREFIX)
        init_short_term(self.store, d, self.channels, self.P, rng)
        init_long_term(self.store, self.T0, self.channels, d, rng)
        init_fusion_head(self.store, d, self.horizon, rng)

    def attach_query_state(self) -> None:
        """Rebuild the QueryState wrapper after loading parameters."""
        query_dim = self.spec.d if self.query_with_embeddings \
            else self.P * self.channels
        self.qs = AG.QueryState(self.store, self.bank, self.spec.d_q,
                                self.spec.heads, query_dim,
                                softmax_scores=self.softmax_scores,
                                prefix=self.PREFIX)

    def _query_vectors(self, patches_norm: np.ndarray,
                       week_slot: np.ndarray) -> np.ndarray:
        N, J, P, C = patches_norm.shape
        if not self.query_with_embeddings:
            return patches_norm.reshape(N, J, P * C)
        ps = D.PatchSet(patches_norm, P, J * P, week_slot)
        plan = D.MaskPlan(np.zeros((N, J), dtype=bool), 0.0)
        with ad.no_grad():
            H, _ = encode_unmasked(ps, plan, self.encoder)
        return H.data

    def forward(self, window: ForecastWindow,
                A_raw: np.ndarray) -> tuple[ad.Tensor, dict]:
        """Predict (N, horizon, 1) in native units; returns extras for dumps."""
        enc = self.encoder
        N = window.X_hist.shape[0]
        Xn = window.X_hist.copy()
        Xn[:, :, 0] = (Xn[:, :, 0] - enc.norm_mean) / enc.norm_std
        J = self.T0 // self.P
        patches_norm = Xn.reshape(N, J, self.P, self.channels)
        queries = self._query_vectors(patches_norm, window.week_slot)
        mk = AG.query_meta_knowledge(self.qs, queries)
        adj = AG.build_adjacency_set(self.store, mk.Z, A_raw, self.gamma,
                                     reconstruct=not self.flags.no_reconstruction,
                                     prefix=self.PREFIX)
        R_s = short_term_forward(self.store, patches_norm[:, -1], adj.operator,
                                 self.P)
        R_l = long_term_forward(self.store, Xn, self.T0, self.channels)
        z_slot = mk.Z * 0.0 if self.flags.no_meta else mk.Z
        out = fuse_and_forecast(self.store, z_slot, R_s, R_l, self.horizon)
        pred = out * enc.norm_std + enc.norm_mean
        return pred, {"Z": mk.Z, "adjacency": adj}

    def predict(self, window: ForecastWindow, A_raw: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            pred, _ = self.forward(window, A_raw)
        return pred.data

    def window_loss(self, window: ForecastWindow, A_raw: np.ndarray) -> ad.Tensor:
        """Training objective: the forecast MSE in standardized speed units.

        Scaling by 1/std^2 keeps gradient magnitudes unit-scale so the
        plain-SGD meta inner loop is stable; the minimizer is unchanged.
        """
        pred, _ = self.forward(window, A_raw)
        scale = 1.0 / (self.encoder.norm_std ** 2)
        return forecast_loss(pred, ad.constant(window.Y)) * scale
