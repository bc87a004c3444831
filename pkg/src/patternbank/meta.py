"""First-order meta-learning of the transfer parameters on source-city
forecasting tasks, followed by few-shot fine-tuning on the target city.

Each meta step clones the transfer subtree, descends it on a support window
with plain gradient steps of size alpha, records the query-window gradient
after every inner step, and finally moves the real parameters by beta/k
times the accumulated query gradients. Only the "transfer/" subtree is ever
touched; the pretrain subtree hash is invariant across meta-training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import data as D
from .forecast import ForecastWindow, TransferModel, make_window
from .nn import autodiff as ad
from .nn.store import ParameterStore, adam_step, sgd_step


@dataclass
class MetaConfig:
    alpha: float = 5e-4
    beta: float = 5e-4
    update_step: int = 2
    meta_epochs: int = 20
    tasks_per_epoch: int = 2
    finetune_epochs: int = 200
    finetune_lr: float = 1e-3
    finetune_weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.update_step < 1:
            raise ValueError("update_step must be >= 1")
        if min(self.alpha, self.beta, self.finetune_lr) <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TaskBatch:
    city_name: str
    adjacency: np.ndarray
    support: ForecastWindow
    query: ForecastWindow


def sample_task(sources: Sequence[D.CityDataset], T0: int, P: int, horizon: int,
                rng: np.random.Generator) -> TaskBatch:
    """Pick a city uniformly, then two time-disjoint (history, future) windows."""
    span = T0 + horizon
    order = rng.permutation(len(sources))
    for ci in order:
        city = sources[ci]
        lo, hi = T0, city.num_steps - horizon
        if hi < lo:
            continue
        o1 = int(rng.integers(lo, hi + 1))
        left = np.arange(lo, min(o1 - span, hi) + 1)
        right = np.arange(max(o1 + span, lo), hi + 1)
        candidates = np.concatenate([left, right])
        if candidates.size == 0:
            continue
        o2 = int(rng.choice(candidates))
        return TaskBatch(city.name, city.adjacency,
                         make_window(city, o1, T0, P, horizon),
                         make_window(city, o2, T0, P, horizon))
    raise ValueError("insufficient data in every city for two disjoint windows")


def reptile_epoch(store: ParameterStore, prefix: str,
                  support_loss: Callable[[], ad.Tensor],
                  query_loss: Callable[[], ad.Tensor],
                  alpha: float, beta: float, update_step: int
                  ) -> tuple[list[float], list[float]]:
    """One task adaptation: inner descent on support, outer move by the
    averaged query gradients taken along the inner trajectory."""
    origin = store.snapshot(prefix)
    stored: list[dict[str, np.ndarray]] = []
    spt_losses, qry_losses = [], []
    for i in range(update_step):
        loss = support_loss()
        if not np.isfinite(loss.item()):
            raise RuntimeError(f"non-finite support loss at inner step {i}")
        spt_losses.append(loss.item())
        store.zero_grad(prefix)
        loss.backward()
        sgd_step(store, alpha, prefix)
        qloss = query_loss()
        if not np.isfinite(qloss.item()):
            raise RuntimeError(f"non-finite query loss at inner step {i}")
        qry_losses.append(qloss.item())
        store.zero_grad(prefix)
        qloss.backward()
        stored.append(store.grads(prefix))
    store.restore(origin)
    scale = beta / update_step
    for path in store.paths(prefix):
        total = np.zeros_like(store[path].data)
        for g in stored:
            total += g[path]
        store[path].data = store[path].data - scale * total
    return spt_losses, qry_losses


def meta_train(model: TransferModel, sources: Sequence[D.CityDataset],
               cfg: MetaConfig, log=None) -> list[dict]:
    """Reptile over source tasks; returns the per-epoch loss trace."""
    rng = np.random.default_rng(cfg.seed)
    trace = []
    pretrain_hash = model.store.subtree_hash("encoder/")
    for epoch in range(cfg.meta_epochs):
        epoch_q = []
        for _ in range(cfg.tasks_per_epoch):
            task = sample_task(sources, model.T0, model.P, model.horizon, rng)
            spt, qry = reptile_epoch(
                model.store, f"{model.PREFIX}/",
                lambda: model.window_loss(task.support, task.adjacency),
                lambda: model.window_loss(task.query, task.adjacency),
                cfg.alpha, cfg.beta, cfg.update_step)
            epoch_q.extend(qry)
        row = {"epoch": epoch + 1, "query_loss": float(np.mean(epoch_q))}
        trace.append(row)
        if log:
            log(f"meta epoch {row['epoch']}: query loss {row['query_loss']:.5f}")
    if model.store.subtree_hash("encoder/") != pretrain_hash:
        raise RuntimeError("meta-training touched the frozen pretrain subtree")
    return trace


def finetune(model: TransferModel, windows: Sequence[ForecastWindow],
             A_raw: np.ndarray, cfg: MetaConfig, log=None) -> list[dict]:
    """Adam over the few-shot windows of the target city."""
    if not windows:
        raise ValueError("few-shot window set is empty")
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.finetune_epochs):
        order = rng.permutation(len(windows))
        losses = []
        for k in order:
            loss = model.window_loss(windows[k], A_raw)
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"non-finite fine-tune loss in epoch {epoch + 1}")
            model.store.zero_grad(f"{model.PREFIX}/")
            loss.backward()
            adam_step(model.store, lr=cfg.finetune_lr,
                      weight_decay=cfg.finetune_weight_decay,
                      prefix=f"{model.PREFIX}/")
            losses.append(loss.item())
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses))}
        trace.append(row)
        if log and (epoch + 1) % 10 == 0:
            log(f"finetune epoch {row['epoch']}: loss {row['train_loss']:.5f}")
    return trace


def evaluation_loss(model: TransferModel, windows: Sequence[ForecastWindow],
                    A_raw: np.ndarray) -> float:
    """Mean forecast loss over a window set, forward-only."""
    vals = []
    for w in windows:
        pred = model.predict(w, A_raw)
        vals.append(float(np.mean((pred - w.Y) ** 2)))
    return float(np.mean(vals))


def forecast_windows(city: D.CityDataset, start: int, end: int, T0: int, P: int,
                     horizon: int, stride: int) -> list[ForecastWindow]:
    """Windows whose forecast targets lie inside [start, end)."""
    out = []
    origin = max(start, T0)
    while origin + horizon <= end:
        out.append(make_window(city, origin, T0, P, horizon))
        origin += stride
    return out
