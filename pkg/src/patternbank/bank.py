"""Multi-scale pattern bank: embed every source patch with the frozen
pretrained stack, segment the embedding sequences at several scales, cluster
each scale with cosine k-means, and keep the centroids.

Clustering operates on direction-normalized copies of the segments, so the
centroid update (mean of assigned points) is the exact minimizer of the
cosine inertia and the recorded inertia trace never increases.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .nn import autodiff as ad
from .nn import layers as L
from .pretrain import DecoderState, EncoderState, encode_unmasked, \
    normalize_patches

BANK_FORMAT = "patternbank-bank-v1"
DEFAULT_SCALES = (1, 3, 6, 12, 24)


@dataclass
class PatternBank:
    """Centroids per scale; a scale-c centroid is c concatenated d-vectors."""

    scales: tuple[int, ...]
    centroids: dict[int, np.ndarray]  # scale -> (K, c*d)
    K: int
    d: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for c in self.scales:
            got = self.centroids[c].shape
            if got != (self.K, c * self.d):
                raise ValueError(f"scale {c} centroids have shape {got}, "
                                 f"expected {(self.K, c * self.d)}")


@dataclass
class ScaleClusterStats:
    scale: int
    inertia_trace: list[float]
    n_iter: int
    cluster_sizes: list[int]
    silhouette: float


@dataclass
class ClusterReport:
    per_scale: dict[int, ScaleClusterStats] = field(default_factory=dict)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "n_iter", "final_inertia", "silhouette",
                        "min_cluster", "max_cluster"])
            for c, st in sorted(self.per_scale.items()):
                w.writerow([c, st.n_iter, f"{st.inertia_trace[-1]:.8g}",
                            f"{st.silhouette:.6f}",
                            min(st.cluster_sizes), max(st.cluster_sizes)])


def embed_corpus(cities: list[D.CityDataset], enc: EncoderState,
                 dec: DecoderState, T0: int, P: int) -> dict[str, np.ndarray]:
    """Run the full stack with zero masking over every day window.

    Returns, per city, an array of shape (windows, N, T0/P, d): one d-vector
    per (window, node, patch). Deterministic given the checkpoint.
    """
    n_patches = T0 // P
    out: dict[str, np.ndarray] = {}
    stages = dec.variant.split("+")
    for city in cities:
        if city.num_nodes != city.adjacency.shape[0]:
            raise ValueError(f"{city.name}: corpus/checkpoint dimension mismatch")
        plan = D.MaskPlan(mask=np.zeros((city.num_nodes, n_patches), dtype=bool),
                          ratio=0.0)
        per_window = []
        for start in D.day_window_starts(city, T0):
            ps = D.make_patches(city, start, T0, P)
            normed = D.PatchSet(
                normalize_patches(ps.patches, enc.norm_mean, enc.norm_std),
                ps.patch_len, ps.window_len, ps.week_slot)
            with ad.no_grad():
                H, idx = encode_unmasked(normed, plan, enc)
                seq = H
                seq = L.transformer_stack(dec.store, f"{dec.prefix}/t1", seq,
                                          dec.spec.dec_depth, dec.spec.heads)
                if len(stages) >= 2:
                    seq = ad.swapaxes(seq, 0, 1)
                    seq = L.graph_conv(dec.store, f"{dec.prefix}/gcn", seq,
                                       city.adjacency)
                    seq = ad.swapaxes(seq, 0, 1)
                if len(stages) >= 3:
                    seq = L.transformer_stack(dec.store, f"{dec.prefix}/t2", seq,
                                              dec.spec.dec_depth, dec.spec.heads)
            per_window.append(seq.data)
        out[city.name] = np.stack(per_window) if per_window else \
            np.zeros((0, city.num_nodes, n_patches, enc.spec.d))
    return out


def segment(node_day: np.ndarray, scale: int) -> np.ndarray:
    """Stride-1 sliding segments of one node-day embedding sequence.

    ``node_day`` is (n_patches, d); the result is (n_patches - scale + 1,
    scale*d), each row the concatenation of ``scale`` consecutive vectors.
    """
    J, d = node_day.shape
    if scale > J:
        raise ValueError(f"scale {scale} exceeds {J} patches per window")
    n = J - scale + 1
    idx = np.arange(scale)[None, :] + np.arange(n)[:, None]
    return node_day[idx].reshape(n, scale * d)


def segment_corpus(embeddings: dict[str, np.ndarray], scale: int) -> np.ndarray:
    """All scale-c segments across cities, windows, and nodes."""
    chunks = []
    for emb in embeddings.values():
        W, N, J, d = emb.shape
        if W == 0:
            continue
        flat = emb.reshape(W * N, J, d)
        chunks.append(np.concatenate([segment(row, scale) for row in flat]))
    if not chunks:
        raise ValueError("no embeddings to segment")
    return np.concatenate(chunks)


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _kmeanspp_seed(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding under cosine distance on unit-norm points."""
    M = points.shape[0]
    centers = np.empty((K, points.shape[1]))
    first = rng.integers(M)
    centers[0] = points[first]
    d2 = np.maximum(1.0 - points @ centers[0], 0.0) ** 2
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            choice = rng.integers(M)
        else:
            choice = rng.choice(M, p=d2 / total)
        centers[k] = points[choice]
        d2 = np.minimum(d2, np.maximum(1.0 - points @ centers[k], 0.0) ** 2)
    return centers


def kmeans_cosine(points: np.ndarray, K: int, seed: int = 0, max_iter: int = 100,
                  tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    """Spherical k-means: assign by maximal cosine, update by mean of assigned.

    Zero rows are dropped with a warning. Empty clusters are reseeded to the
    point currently farthest from its own centroid. Returns (centroids,
    assignments, inertia trace, iterations); assignments refer to the
    surviving points.
    """
    points = np.asarray(points, dtype=np.float64)
    norms = np.linalg.norm(points, axis=1)
    if np.any(norms == 0):
        warnings.warn("dropping zero-norm points before cosine clustering")
        points = points[norms > 0]
    M = points.shape[0]
    if M < K:
        raise ValueError(f"need at least K={K} nonzero points, have {M}")
    rng = np.random.default_rng(seed)
    unit = _normalize_rows(points)
    centers = _kmeanspp_seed(unit, K, rng)
    trace: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        sim = unit @ _normalize_rows_safe(centers).T
        assign = sim.argmax(axis=1)
        dist = 1.0 - sim[np.arange(M), assign]
        # repair empty clusters before scoring so the trace stays monotone
        for k in range(K):
            if not np.any(assign == k):
                far = int(dist.argmax())
                centers[k] = unit[far]
                assign[far] = k
                dist[far] = 0.0
        inertia = float(dist.sum())
        trace.append(inertia)
        if len(trace) > 1 and trace[-2] - trace[-1] <= tol * max(trace[-2], 1e-30):
            break
        for k in range(K):
            sel = assign == k
            centers[k] = unit[sel].mean(axis=0)
    # final assignment against the returned centroids, so the pair is
    # self-consistent regardless of how the loop exited
    sim = unit @ _normalize_rows_safe(centers).T
    assign = sim.argmax(axis=1)
    trace.append(float((1.0 - sim[np.arange(M), assign]).sum()))
    return centers, assign, trace, it


def _normalize_rows_safe(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def silhouette(points: np.ndarray, assign: np.ndarray, max_points: int = 5000,
               seed: int = 0) -> float:
    """Mean silhouette under cosine distance; singleton clusters score 0.

    Uses the linearity of cosine distance in one argument, so it runs in
    O(M*K) after normalization; subsamples to ``max_points`` (seeded) first.
    """
    points = np.asarray(points, dtype=np.float64)
    assign = np.asarray(assign)
    labels = np.unique(assign)
    if labels.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    if points.shape[0] > max_points:
        keep = np.random.default_rng(seed).choice(points.shape[0], max_points,
                                                  replace=False)
        points, assign = points[keep], assign[keep]
        labels = np.unique(assign)
        if labels.size < 2:
            raise ValueError("subsample collapsed to a single cluster")
    unit = _normalize_rows_safe(points)
    M = unit.shape[0]
    sums = np.stack([unit[assign == lab].sum(axis=0) for lab in labels])
    sizes = np.array([(assign == lab).sum() for lab in labels])
    lab_index = {lab: i for i, lab in enumerate(labels)}
    own = np.array([lab_index[a] for a in assign])
    sim_to = unit @ sums.T  # (M, n_labels) summed cosine similarity
    scores = np.zeros(M)
    for i in range(M):
        k = own[i]
        nk = sizes[k]
        if nk > 1:
            a = ((nk - 1) - (sim_to[i, k] - 1.0)) / (nk - 1)
        else:
            scores[i] = 0.0
            continue
        b = np.inf
        for j in range(labels.size):
            if j == k:
                continue
            b = min(b, (sizes[j] - sim_to[i, j]) / sizes[j])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def build_bank(cities: list[D.CityDataset], enc: EncoderState, dec: DecoderState,
               T0: int, P: int, scales=DEFAULT_SCALES, K: int = 10,
               seed: int = 0, provenance: dict | None = None
               ) -> tuple[PatternBank, ClusterReport]:
    """Embed the corpus once, then segment and cluster per scale."""
    embeddings = embed_corpus(cities, enc, dec, T0, P)
    centroids: dict[int, np.ndarray] = {}
    report = ClusterReport()
    for c in scales:
        pts = segment_corpus(embeddings, c)
        centers, assign, trace, n_iter = kmeans_cosine(pts, K, seed=seed)
        centroids[c] = centers
        sizes = [int((assign == k).sum()) for k in range(K)]
        sil = silhouette(pts, assign, seed=seed) if K >= 2 else float("nan")
        report.per_scale[c] = ScaleClusterStats(c, trace, n_iter, sizes, sil)
    bank = PatternBank(scales=tuple(scales), centroids=centroids, K=K,
                       d=enc.spec.d, provenance=provenance or {})
    return bank, report


def save_bank(bank: PatternBank, path: str | Path) -> None:
    meta = {"format": BANK_FORMAT, "scales": list(bank.scales), "K": bank.K,
            "d": bank.d, "provenance": bank.provenance}
    arrays = {f"scale{c}": bank.centroids[c] for c in bank.scales}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_bank(path: str | Path) -> PatternBank:
    with np.load(path, allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != BANK_FORMAT:
            raise ValueError(f"unrecognized bank format in {path}")
        scales = tuple(meta["scales"])
        centroids = {c: npz[f"scale{c}"].astype(np.float64) for c in scales}
    return PatternBank(scales=scales, centroids=centroids, K=meta["K"],
                       d=meta["d"], provenance=meta.get("provenance", {}))
