"""Named parameter storage, the Adam optimizer, and the checkpoint container.

Every learnable array in the pipeline lives in one ParameterStore under a
slash-separated path ("encoder/block0/attn/Wq"). Training loops address
parameters by path prefix, which is how meta-learning snapshots and the
frozen-pretrain contract are enforced. A store is single-writer: one
training loop owns gradient accumulation and updates at a time.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .autodiff import Tensor

CHECKPOINT_FORMAT = "patternbank-params-v1"


class ParameterStore:
    """Flat map from path to parameter tensor, with Adam state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t: dict[str, int] = {}

    def add(self, path: str, value) -> Tensor:
        if path in self.params:
            raise ValueError(f"duplicate parameter path: {path}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self.params if p.startswith(prefix)]

    def n_parameters(self, prefix: str = "") -> int:
        return sum(self.params[p].size for p in self.paths(prefix))

    def zero_grad(self, prefix: str = "") -> None:
        for p in self.paths(prefix):
            self.params[p].grad = None

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Copy current values; restore() round-trips bit-exactly."""
        return {p: self.params[p].data.copy() for p in self.paths(prefix)}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for p, v in snap.items():
            self.params[p].data = v.copy()

    def grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for p in self.paths(prefix):
            g = self.params[p].grad
            out[p] = np.zeros_like(self.params[p].data) if g is None else g.copy()
        return out

    def subtree_hash(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for p in sorted(self.paths(prefix)):
            h.update(p.encode())
            h.update(self.params[p].data.tobytes())
        return h.hexdigest()

    def save(self, path, prefix: str = "", extra_meta: dict | None = None) -> None:
        """Write parameters under ``prefix`` to the versioned npz container."""
        meta = {"format": CHECKPOINT_FORMAT, "prefix": prefix,
                "extra": extra_meta or {}}
        arrays = {f"param::{p}": self.params[p].data for p in self.paths(prefix)}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)

    def load(self, path, strict: bool = True) -> dict:
        """Load a checkpoint into existing parameters; returns its extra metadata."""
        with np.load(path, allow_pickle=False) as npz:
            meta = json.loads(str(npz["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"unrecognized checkpoint format in {path}")
            for key in npz.files:
                if not key.startswith("param::"):
                    continue
                p = key[len("param::"):]
                if p not in self.params:
                    if strict:
                        raise ValueError(f"checkpoint parameter {p} missing from store")
                    self.add(p, npz[key])
                    continue
                if self.params[p].data.shape != npz[key].shape:
                    raise ValueError(f"shape mismatch for {p}: "
                                     f"{self.params[p].data.shape} vs {npz[key].shape}")
                self.params[p].data = npz[key].astype(np.float64)
        return meta.get("extra", {})


def load_param_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint file into plain arrays without needing a store."""
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format in {path}")
        arrays = {k[len("param::"):]: npz[k].astype(np.float64)
                  for k in npz.files if k.startswith("param::")}
    return arrays, meta.get("extra", {})


def sgd_step(store: ParameterStore, lr: float, prefix: str = "") -> None:
    """Plain in-place gradient descent over a subtree (meta inner loop)."""
    for p in store.paths(prefix):
        t = store.params[p]
        if t.grad is not None:
            t.data = t.data - lr * t.grad


def adam_step(store: ParameterStore, lr: float, weight_decay: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              prefix: str = "") -> None:
    """One Adam step with decoupled weight decay, applied in place.

    Parameters with no accumulated gradient are treated as having zero
    gradient. A NaN gradient aborts with the offending parameter path.
    """
    b1, b2 = betas
    for p in store.paths(prefix):
        par = store.params[p]
        g = par.grad
        if g is None:
            g = np.zeros_like(par.data)
        elif not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p}")
        if p not in store._adam_m:
            store._adam_m[p] = np.zeros_like(par.data)
            store._adam_v[p] = np.zeros_like(par.data)
            store._adam_t[p] = 0
        store._adam_t[p] += 1
        t = store._adam_t[p]
        m = store._adam_m[p]
        v = store._adam_v[p]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / (1.0 - b1 ** t)) / (np.sqrt(v / (1.0 - b2 ** t)) + eps)
        par.data = par.data - lr * update - lr * weight_decay * par.data
