"""Query the pattern bank with target-city patches to form per-node
meta-knowledge, then reconstruct the adjacency by the closed-form
self-expressive solve.

The bank stays frozen; the keys, query projections, per-scale aggregator
transformers, fusion map, and the adjacency attention projections are the
learnable surface. Querying is per node, so each meta-knowledge row depends
only on that node's own patch history until the adjacency steps mix nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bank import PatternBank
from .nn import autodiff as ad
from .nn import layers as L
from .nn.store import ParameterStore


@dataclass
class QueryState:
    """Learnable query-side parameters over a frozen bank."""

    store: ParameterStore
    bank: PatternBank
    d_q: int
    heads: int
    query_dim: int  # width of one query vector (P*C raw, or d for embeddings)
    softmax_scores: bool = True
    prefix: str = "transfer"


@dataclass
class MetaKnowledge:
    Z: ad.Tensor  # (N, d)
    per_scale: dict[int, ad.Tensor] = field(default_factory=dict)


@dataclass
class AdjacencySet:
    """The adjacency family around one forward pass."""

    raw: np.ndarray
    attention: ad.Tensor      # A', row-stochastic
    coefficients: ad.Tensor   # C, the self-expressive solve
    reconstructed: ad.Tensor  # (C + C^T)/2, exactly symmetric
    operator: ad.Tensor       # clamped + row-normalized form fed to graph convs
    gamma: float


def init_query(store: ParameterStore, bank: PatternBank, query_dim: int,
               d_q: int, heads: int, ff: int, rng: np.random.Generator,
               softmax_scores: bool = True, prefix: str = "transfer") -> QueryState:
    d = bank.d
    for c in bank.scales:
        L.init_linear(store, f"{prefix}/query/scale{c}/proj", query_dim, d_q, rng)
        store.add(f"{prefix}/keys/scale{c}",
                  rng.normal(0.0, 1.0 / np.sqrt(d_q), size=(bank.K, d_q)))
        L.init_linear(store, f"{prefix}/query/scale{c}/bankproj", c * d, d, rng)
        L.init_transformer_block(store, f"{prefix}/agg/scale{c}", d, ff, rng)
    L.init_linear(store, f"{prefix}/fuse", len(bank.scales) * d, d, rng)
    return QueryState(store, bank, d_q, heads, query_dim,
                      softmax_scores=softmax_scores, prefix=prefix)


def pattern_scores(qs: QueryState, queries, scale: int) -> ad.Tensor:
    """Scores of each query against the keys of one scale.

    ``queries`` is (..., query_dim); the result is (..., K), softmax-
    normalized over K unless the state asks for raw dot products.
    """
    q = L.linear(qs.store, f"{qs.prefix}/query/scale{scale}/proj", queries)
    scores = ad.matmul(q, ad.transpose2d(qs.store[f"{qs.prefix}/keys/scale{scale}"]))
    if qs.softmax_scores:
        scores = ad.softmax(scores, axis=-1)
    return scores


def retrieve_pattern(qs: QueryState, omega, scale: int) -> ad.Tensor:
    """Weighted sum of the scale's centroids, projected into d.

    Scale-c centroids live in R^{c*d}; a learnable per-scale map brings them
    to R^d before the weighted sum, so retrievals of all scales align.
    """
    bank_proj = L.linear(qs.store, f"{qs.prefix}/query/scale{scale}/bankproj",
                         ad.constant(qs.bank.centroids[scale]))  # (K, d)
    return ad.matmul(ad.as_tensor(omega), bank_proj)


def aggregate_node(qs: QueryState, retrievals: dict[int, ad.Tensor]) -> MetaKnowledge:
    """Per scale: transformer over the retrieval sequence, mean-pooled; then
    concatenate the scale vectors and fuse linearly to one d-vector per node.

    ``retrievals[c]`` is (N, J, d) in temporal order.
    """
    pooled = []
    per_scale: dict[int, ad.Tensor] = {}
    for c in qs.bank.scales:
        seq = L.transformer_block(qs.store, f"{qs.prefix}/agg/scale{c}",
                                  retrievals[c], qs.heads)
        vec = ad.tmean(seq, axis=-2)  # (N, d)
        per_scale[c] = vec
        pooled.append(vec)
    z = L.linear(qs.store, f"{qs.prefix}/fuse", ad.concat(pooled, axis=-1))
    return MetaKnowledge(Z=z, per_scale=per_scale)


def query_meta_knowledge(qs: QueryState, queries: np.ndarray) -> MetaKnowledge:
    """Full query path: score, retrieve, and aggregate for every node.

    ``queries`` is (N, J, query_dim): one query vector per (node, patch).
    """
    qt = ad.constant(queries) if not isinstance(queries, ad.Tensor) else queries
    retrievals = {}
    for c in qs.bank.scales:
        omega = pattern_scores(qs, qt, c)      # (N, J, K)
        retrievals[c] = retrieve_pattern(qs, omega, c)  # (N, J, d)
    return aggregate_node(qs, retrievals)


def init_adjacency(store: ParameterStore, d: int, rng: np.random.Generator,
                   prefix: str = "transfer") -> None:
    L.init_linear(store, f"{prefix}/adj/q", d, d, rng)
    L.init_linear(store, f"{prefix}/adj/k", d, d, rng)


def attention_adjacency(store: ParameterStore, Z, prefix: str = "transfer") -> ad.Tensor:
    """A' = rowsoftmax(Linear_Q(Z) Linear_K(Z)^T / sqrt(d))."""
    Z = ad.as_tensor(Z)
    q = L.linear(store, f"{prefix}/adj/q", Z)
    k = L.linear(store, f"{prefix}/adj/k", Z)
    logits = ad.matmul(q, ad.transpose2d(k)) * (1.0 / np.sqrt(Z.shape[-1]))
    return ad.softmax(logits, axis=-1)


def row_normalize(A: np.ndarray) -> np.ndarray:
    """Rows scaled to sum to 1; all-zero rows stay zero."""
    A = np.asarray(A, dtype=np.float64)
    s = A.sum(axis=-1, keepdims=True)
    return np.divide(A, s, out=np.zeros_like(A), where=s > 0)


def reconstruct_graph(Z, A_norm: np.ndarray, A_prime, gamma: float
                      ) -> tuple[ad.Tensor, ad.Tensor]:
    """Closed-form self-expressive coefficients and the symmetrized adjacency.

    C = (Z Z^T + 2*gamma*I)^{-1} (Z Z^T + gamma*(A + A')) via an SPD linear
    solve (never an explicit inverse); A_hat = (C + C^T)/2 is exactly
    symmetric. ``A_norm`` must already be row-normalized into [0, 1].
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    Z = ad.as_tensor(Z)
    if not np.all(np.isfinite(Z.data)):
        raise FloatingPointError("non-finite meta-knowledge entering the solve")
    n = Z.shape[0]
    # the system is solved in gamma-rescaled form (both sides divided by
    # gamma), which leaves C unchanged but makes the Z=0 case an exact
    # division by the 2I left-hand side
    gram = ad.matmul(Z, ad.transpose2d(Z)) * (1.0 / gamma)
    if not np.all(np.isfinite(gram.data)):
        raise FloatingPointError("meta-knowledge magnitude overflowed the solve")
    lhs = gram + ad.constant(2.0 * np.eye(n))
    rhs = gram + ad.as_tensor(A_prime) + ad.constant(np.asarray(A_norm))
    C = ad.solve(lhs, rhs)
    A_hat = (C + ad.transpose2d(C)) * 0.5
    return C, A_hat


def graph_operator(A_hat) -> ad.Tensor:
    """Clamp negatives to zero and renormalize rows for downstream graph convs."""
    pos = ad.relu(ad.as_tensor(A_hat))
    return pos / (ad.tsum(pos, axis=-1, keepdims=True) + 1e-12)


def build_adjacency_set(store: ParameterStore, Z, A_raw: np.ndarray, gamma: float,
                        reconstruct: bool = True,
                        prefix: str = "transfer") -> AdjacencySet:
    """A' from attention, then the self-expressive solve (or the raw-A bypass)."""
    A_norm = row_normalize(A_raw)
    A_prime = attention_adjacency(store, Z, prefix=prefix)
    C, A_hat = reconstruct_graph(Z, A_norm, A_prime, gamma)
    if reconstruct:
        operator = graph_operator(A_hat)
    else:
        operator = ad.constant(A_norm)
    return AdjacencySet(raw=np.asarray(A_raw), attention=A_prime, coefficients=C,
                        reconstructed=A_hat, operator=operator, gamma=gamma)
