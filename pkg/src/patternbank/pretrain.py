"""Masked patch pretraining: reconstruct heavily-masked day windows through a
patch encoder and a temporal/spatial/temporal decoder stack.

Speeds are standardized internally (mean/std of the source corpus, stored
with the encoder) so the optimizer sees unit-scale targets; reported
reconstruction errors are always in native speed units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .nn import autodiff as ad
from .nn import layers as L
from .nn.store import ParameterStore, adam_step

DECODER_VARIANTS = ("T", "T+S", "T+S+T")


@dataclass
class PretrainConfig:
    T0: int = 288
    P: int = 12
    mask_ratio: float = 0.75
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 50
    patience: int = 10
    decoder_variant: str = "T+S+T"
    seed: int = 0

    def __post_init__(self):
        if self.decoder_variant not in DECODER_VARIANTS:
            raise ValueError(f"decoder variant must be one of {DECODER_VARIANTS}")


@dataclass
class EncoderState:
    """Patch embedding + hour-of-week positional table + transformer stack."""

    store: ParameterStore
    spec: L.LayerSpec
    patch_len: int
    channels: int = 2
    norm_mean: float = 0.0
    norm_std: float = 1.0
    prefix: str = "encoder"


@dataclass
class DecoderState:
    """Mask token, T(+S(+T)) stack, and the patch-space output projection."""

    store: ParameterStore
    spec: L.LayerSpec
    patch_len: int
    channels: int = 2
    variant: str = "T+S+T"
    prefix: str = "decoder"


def init_encoder(store: ParameterStore, spec: L.LayerSpec, patch_len: int,
                 channels: int, rng: np.random.Generator,
                 prefix: str = "encoder") -> EncoderState:
    L.init_linear(store, f"{prefix}/embed", patch_len * channels, spec.d, rng)
    store.add(f"{prefix}/pe", rng.normal(0.0, 0.02, size=(L.WEEK_HOURS, spec.d)))
    L.init_transformer_stack(store, f"{prefix}/ts", spec.enc_depth, spec.d, spec.ff, rng)
    return EncoderState(store, spec, patch_len, channels, prefix=prefix)


def init_decoder(store: ParameterStore, spec: L.LayerSpec, patch_len: int,
                 channels: int, rng: np.random.Generator,
                 variant: str = "T+S+T", prefix: str = "decoder") -> DecoderState:
    store.add(f"{prefix}/mask_token", rng.normal(0.0, 0.02, size=spec.d))
    L.init_transformer_stack(store, f"{prefix}/t1", spec.dec_depth, spec.d, spec.ff, rng)
    L.init_graph_conv(store, f"{prefix}/gcn", spec.d, rng)
    L.init_transformer_stack(store, f"{prefix}/t2", spec.dec_depth, spec.d, spec.ff, rng)
    L.init_linear(store, f"{prefix}/out", spec.d, patch_len * channels, rng)
    return DecoderState(store, spec, patch_len, channels, variant, prefix)


def normalize_patches(patches: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Standardize the speed channel; the clock channel passes through."""
    out = patches.astype(np.float64).copy()
    out[..., 0] = (out[..., 0] - mean) / std
    return out


def speed_entry_mask(patch_len: int, channels: int) -> np.ndarray:
    """Boolean selector of speed entries inside a flattened (P*C,) patch."""
    sel = np.zeros(patch_len * channels, dtype=bool)
    sel[0::channels] = True
    return sel


def encode_unmasked(ps: D.PatchSet, plan: D.MaskPlan,
                    enc: EncoderState) -> tuple[ad.Tensor, np.ndarray]:
    """Embed and contextualize the unmasked patches of a (normalized) window.

    Returns the (N, U, d) encoder output and the (N, U) original slot
    indices of each embedding, in temporal order.
    """
    N, J, P, C = ps.patches.shape
    if plan.mask.shape != (N, J):
        raise ValueError(f"mask shape {plan.mask.shape} does not match patch "
                         f"grid ({N}, {J})")
    keep = ~plan.mask
    counts = keep.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("a node has zero unmasked patches")
    U = int(counts[0])
    idx = np.argsort(~keep, axis=1, kind="stable")[:, :U]  # per-node kept slots
    idx.sort(axis=1)
    rows = np.arange(N)[:, None]
    x = ps.patches[rows, idx].reshape(N, U, P * C)
    h = L.linear(enc.store, f"{enc.prefix}/embed", ad.constant(x))
    h = h + ad.take_rows(enc.store[f"{enc.prefix}/pe"], ps.week_slot[idx])
    h = L.transformer_stack(enc.store, f"{enc.prefix}/ts", h,
                            enc.spec.enc_depth, enc.spec.heads)
    return h, idx


def decode_and_reconstruct(H: ad.Tensor, unmasked_idx: np.ndarray,
                           plan: D.MaskPlan, A: np.ndarray,
                           dec: DecoderState) -> ad.Tensor:
    """Fill masked slots with the mask token and run the decoder stack.

    Output is (N, n_patches, P*C) in the same (normalized) units as the
    encoder input.
    """
    N, J = plan.mask.shape
    U = unmasked_idx.shape[1]
    if A.shape != (N, N):
        raise ValueError(f"adjacency shape {A.shape} does not match {N} nodes")
    d = dec.spec.d
    # constant one-hot placement matrix: (N, J, U) @ (N, U, d) -> (N, J, d)
    placer = np.zeros((N, J, U))
    rows = np.repeat(np.arange(N), U)
    placer[rows, unmasked_idx.reshape(-1), np.tile(np.arange(U), N)] = 1.0
    seq = ad.matmul(ad.constant(placer), H)
    mask_f = ad.constant(plan.mask.astype(np.float64)[:, :, None])
    seq = seq + mask_f * dec.store[f"{dec.prefix}/mask_token"]

    stages = dec.variant.split("+")
    seq = L.transformer_stack(dec.store, f"{dec.prefix}/t1", seq,
                              dec.spec.dec_depth, dec.spec.heads)
    if len(stages) >= 2:  # spatial mixing per time slot
        seq = ad.swapaxes(seq, 0, 1)  # (J, N, d)
        seq = L.graph_conv(dec.store, f"{dec.prefix}/gcn", seq, A)
        seq = ad.swapaxes(seq, 0, 1)
    if len(stages) >= 3:
        seq = L.transformer_stack(dec.store, f"{dec.prefix}/t2", seq,
                                  dec.spec.dec_depth, dec.spec.heads)
    return L.linear(dec.store, f"{dec.prefix}/out", seq)


def pretrain_loss(patches: np.ndarray, recon: ad.Tensor,
                  mask: np.ndarray, channels: int = 2) -> ad.Tensor:
    """MSE over masked positions, speed channel only.

    ``patches`` (N, J, P, C) must be in the same units as ``recon``
    (N, J, P*C); ``mask`` is the (N, J) boolean plan.
    """
    N, J, P, C = patches.shape
    target = patches.reshape(N, J, P * C)
    sel = mask[:, :, None] & speed_entry_mask(P, C)[None, None, :]
    return L.mse_loss(recon, ad.constant(target), sel)


def reconstruct_window(ps: D.PatchSet, plan: D.MaskPlan, A: np.ndarray,
                       enc: EncoderState, dec: DecoderState) -> ad.Tensor:
    """Normalize, encode the unmasked patches, and decode the full window."""
    normed = D.PatchSet(normalize_patches(ps.patches, enc.norm_mean, enc.norm_std),
                        ps.patch_len, ps.window_len, ps.week_slot)
    H, idx = encode_unmasked(normed, plan, enc)
    return decode_and_reconstruct(H, idx, plan, A, dec)


def masked_reconstruction_errors(ps: D.PatchSet, plan: D.MaskPlan, A: np.ndarray,
                                 enc: EncoderState,
                                 dec: DecoderState) -> dict[str, float]:
    """RMSE/MAE/MAPE of masked speed entries in native units."""
    with ad.no_grad():
        recon = reconstruct_window(ps, plan, A, enc, dec).data
    N, J, P, C = ps.patches.shape
    sel = plan.mask[:, :, None] & speed_entry_mask(P, C)[None, None, :]
    truth = ps.patches.reshape(N, J, P * C)[sel]
    pred = recon.reshape(N, J, P * C)[sel] * enc.norm_std + enc.norm_mean
    err = pred - truth
    nz = truth != 0
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "mae": float(np.mean(np.abs(err))),
        "mape": float(np.mean(np.abs(err[nz] / truth[nz])) * 100) if nz.any() else float("nan"),
    }


@dataclass
class PretrainResult:
    encoder: EncoderState
    decoder: DecoderState
    curve: list[dict] = field(default_factory=list)

    def write_curve(self, path: str | Path) -> None:
        cols = ["epoch", "train_loss", "heldout_rmse", "heldout_mae", "heldout_mape"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in self.curve:
                w.writerow({k: row[k] for k in cols})


def corpus_norm_stats(cities: list[D.CityDataset]) -> tuple[float, float]:
    values = np.concatenate([c.speed[:, :, 0].reshape(-1) for c in cities])
    return float(values.mean()), float(max(values.std(), 1e-9))


def pretrain(cities: list[D.CityDataset], cfg: PretrainConfig,
             spec: L.LayerSpec, store: ParameterStore | None = None,
             log=None) -> PretrainResult:
    """Train encoder+decoder on day windows of the source cities.

    The last day of each city is held out; its masked-reconstruction error
    (fixed evaluation masks) drives early stopping, and the best parameters
    are restored at the end.
    """
    if not cities:
        raise ValueError("pretraining needs at least one source city")
    rng = np.random.default_rng(cfg.seed)
    store = store if store is not None else ParameterStore()
    mean, std = corpus_norm_stats(cities)
    enc = init_encoder(store, spec, cfg.P, 2, rng)
    enc.norm_mean, enc.norm_std = mean, std
    dec = init_decoder(store, spec, cfg.P, 2, rng, variant=cfg.decoder_variant)

    train_items = []
    for ci, city in enumerate(cities):
        for start in D.day_window_starts(city, cfg.T0, exclude_last_day=True):
            train_items.append((ci, start))
    eval_sets = []
    n_patches = cfg.T0 // cfg.P
    for ci, city in enumerate(cities):
        start = city.num_steps - cfg.T0
        ps = D.make_patches(city, start, cfg.T0, cfg.P)
        plan = D.sample_mask(city.num_nodes, n_patches, cfg.mask_ratio,
                             np.random.default_rng(10_000 + ci))
        eval_sets.append((ps, plan, city.adjacency))

    def heldout_errors() -> dict[str, float]:
        if all(not plan.mask.any() for _, plan, _ in eval_sets):
            return {"rmse": 0.0, "mae": 0.0, "mape": 0.0}
        agg = {"rmse": [], "mae": [], "mape": []}
        for ps, plan, A in eval_sets:
            errs = masked_reconstruction_errors(ps, plan, A, enc, dec)
            for k in agg:
                agg[k].append(errs[k])
        return {k: float(np.mean(v)) for k, v in agg.items()}

    result = PretrainResult(enc, dec)
    e0 = heldout_errors()
    result.curve.append({"epoch": 0, "train_loss": float("nan"),
                         "heldout_rmse": e0["rmse"], "heldout_mae": e0["mae"],
                         "heldout_mape": e0["mape"]})
    best = (e0["rmse"], store.snapshot())
    stall = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_items))
        losses = []
        for k in order:
            ci, start = train_items[k]
            city = cities[ci]
            ps = D.make_patches(city, start, cfg.T0, cfg.P)
            plan = D.sample_mask(city.num_nodes, n_patches, cfg.mask_ratio, rng)
            if not plan.mask.any():
                continue
            step += 1
            recon = reconstruct_window(ps, plan, city.adjacency, enc, dec)
            normed = normalize_patches(ps.patches, mean, std)
            loss = pretrain_loss(normed, recon, plan.mask)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"pretraining diverged (non-finite loss) at "
                                   f"step {step}")
            store.zero_grad()
            loss.backward()
            adam_step(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
            losses.append(loss.item())
        ev = heldout_errors()
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else 0.0,
               "heldout_rmse": ev["rmse"], "heldout_mae": ev["mae"],
               "heldout_mape": ev["mape"]}
        result.curve.append(row)
        if log:
            log(f"pretrain epoch {epoch}: train {row['train_loss']:.4f} "
                f"heldout rmse {ev['rmse']:.4f}")
        if ev["rmse"] < best[0]:
            best = (ev["rmse"], store.snapshot())
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    store.restore(best[1])
    return result


def save_pretrained(result: PretrainResult, path: str | Path) -> None:
    enc, dec = result.encoder, result.decoder
    enc.store.save(path, extra_meta={
        "d": enc.spec.d, "d_q": enc.spec.d_q, "heads": enc.spec.heads,
        "ff_width": enc.spec.ff, "enc_depth": enc.spec.enc_depth,
        "dec_depth": enc.spec.dec_depth, "patch_len": enc.patch_len,
        "channels": enc.channels, "norm_mean": enc.norm_mean,
        "norm_std": enc.norm_std, "variant": dec.variant,
    })


def load_pretrained(path: str | Path) -> tuple[EncoderState, DecoderState]:
    store = ParameterStore()
    from .nn.store import load_param_arrays

    arrays, extra = load_param_arrays(path)
    for p, v in arrays.items():
        store.add(p, v)
    spec = L.LayerSpec(d=extra["d"], d_q=extra["d_q"], heads=extra["heads"],
                       ff_width=extra["ff_width"], enc_depth=extra["enc_depth"],
                       dec_depth=extra["dec_depth"])
    enc = EncoderState(store, spec, extra["patch_len"], extra["channels"],
                       extra["norm_mean"], extra["norm_std"])
    dec = DecoderState(store, spec, extra["patch_len"], extra["channels"],
                       extra["variant"])
    return enc, dec
