"""K-nearest-neighbour hypergraphs over spots and weighted hypergraph convolution."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .data import NeighborTensor
from .tensor import Tensor

MIN_EDGE_WEIGHT = 1e-3
NORM_MODES = ("minmax", "zscore", "row")
WEIGHT_MODES = ("affinity", "distance")


@dataclass(frozen=True)
class AffinityMatrix:
    values: np.ndarray
    kind: str  # "feature" | "positional" | "combined"


@dataclass(frozen=True)
class Hypergraph:
    membership: np.ndarray  # n_nodes x n_edges, bool
    edge_weight: np.ndarray  # n_edges, positive

    @property
    def n_nodes(self) -> int:
        return self.membership.shape[0]

    @property
    def n_edges(self) -> int:
        return self.membership.shape[1]

    @property
    def node_degree(self) -> np.ndarray:
        return self.membership.sum(axis=1)

    @property
    def edge_degree(self) -> np.ndarray:
        return self.membership.sum(axis=0)

    def edges(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.membership[:, e]) for e in range(self.n_edges)]

    def propagation_matrix(self) -> np.ndarray:
        """Dense ``Dv^-1/2 M We De^-1 M^T Dv^-1/2`` with weighted node degrees."""
        return _propagation(self.membership[None].astype(np.float64), self.edge_weight[None])[0]

    def write_edge_list(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["edge_id", "node_id", "weight"])
            for e, nodes in enumerate(self.edges()):
                for v in nodes:
                    w.writerow([e, int(v), repr(float(self.edge_weight[e]))])
        return path


def _propagation(membership: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Batched propagation operator; ``membership`` is (b, nodes, edges), ``weight`` (b, edges)."""
    node_deg = np.einsum("bve,be->bv", membership, weight)
    edge_deg = membership.sum(axis=1)
    assert np.all(node_deg > 0), "isolated node in hypergraph"
    assert np.all(edge_deg > 0), "empty hyperedge"
    inv_sqrt = 1.0 / np.sqrt(node_deg)
    scaled = membership * inv_sqrt[:, :, None]
    return np.einsum("bve,be,bue->bvu", scaled, weight / edge_deg, scaled)


# ---------------------------------------------------------------------------
# distances


def pairwise_feature_distance(features: np.ndarray) -> AffinityMatrix:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError("pairwise_feature_distance needs an n x d array with n >= 2")
    dist = cdist(features, features)
    np.fill_diagonal(dist, 0.0)
    return AffinityMatrix(np.maximum(dist, dist.T), "feature")


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Per-axis min-max scaling to [0, 1]; a constant axis maps to 0."""
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = hi - lo
    return np.where(span > 0, (coords - lo) / np.where(span > 0, span, 1.0), 0.0)


def pairwise_position_distance(coords: np.ndarray) -> AffinityMatrix:
    unit = normalize_coords(coords)
    dist = cdist(unit, unit)
    np.fill_diagonal(dist, 0.0)
    return AffinityMatrix(np.maximum(dist, dist.T), "positional")


def normalize_affinity(values: np.ndarray, mode: str = "minmax") -> np.ndarray:
    """Normalize a distance matrix using statistics of its off-diagonal entries only."""
    n = values.shape[0]
    off = ~np.eye(n, dtype=bool)
    entries = values[off]
    if mode == "minmax":
        lo, hi = entries.min(), entries.max()
        out = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    elif mode == "zscore":
        sd = entries.std()
        out = (values - entries.mean()) / sd if sd > 0 else np.zeros_like(values)
    elif mode == "row":
        sums = np.where(off, values, 0.0).sum(axis=1, keepdims=True)
        out = values / np.where(sums > 0, sums, 1.0)
    else:
        raise ValueError(f"unknown normalization {mode!r}; expected one of {NORM_MODES}")
    out = np.where(off, out, 0.0)
    return out


def combine_affinities(sim: AffinityMatrix, pos: AffinityMatrix, norm: str = "minmax") -> AffinityMatrix:
    return AffinityMatrix(normalize_affinity(sim.values, norm) + normalize_affinity(pos.values, norm), "combined")


def _edge_weight(mean_dist: np.ndarray, mode: str) -> np.ndarray:
    if mode == "affinity":
        return np.clip(1.0 - mean_dist, MIN_EDGE_WEIGHT, 1.0)
    if mode == "distance":
        return np.maximum(mean_dist, MIN_EDGE_WEIGHT)
    raise ValueError(f"unknown edge weight mode {mode!r}; expected one of {WEIGHT_MODES}")


def knn_hypergraph(dist: np.ndarray, k: int, weight_mode: str = "affinity") -> Hypergraph:
    """One hyperedge per node: the node plus its ``k`` smallest-distance neighbours."""
    n = dist.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < n={n}")
    masked = dist.astype(np.float64, copy=True)
    np.fill_diagonal(masked, np.inf)
    # stable sort keeps the lower index first among equal distances
    nearest = np.argsort(masked, axis=1, kind="stable")[:, :k]
    membership = np.zeros((n, n), dtype=bool)
    membership[np.arange(n), np.arange(n)] = True
    membership[nearest, np.arange(n)[:, None]] = True
    mean_dist = np.take_along_axis(dist, nearest, axis=1).mean(axis=1)
    return Hypergraph(membership, _edge_weight(mean_dist, weight_mode))


def build_incidence(
    sim: AffinityMatrix,
    pos: AffinityMatrix,
    k: int,
    norm: str = "minmax",
    weight_mode: str = "affinity",
) -> Hypergraph:
    n = sim.values.shape[0]
    if k >= n or k < 1:
        raise ValueError(f"k={k} must satisfy 1 <= k < n={n}")
    return knn_hypergraph(combine_affinities(sim, pos, norm).values, k, weight_mode)


def build_slide_hypergraph(features, coords, k: int, norm: str = "minmax", weight_mode: str = "affinity") -> Hypergraph:
    return build_incidence(pairwise_feature_distance(features), pairwise_position_distance(coords), k, norm, weight_mode)


# ---------------------------------------------------------------------------
# neighbour sub-hypergraphs


def _token_distances(values: np.ndarray, chunk_elems: int = 1 << 22) -> np.ndarray:
    n, t, d = values.shape
    out = np.empty((n, t, t))
    step = max(1, chunk_elems // (t * t * max(d, 1)))
    for s in range(0, n, step):
        v = values[s : s + step]
        diff = v[:, :, None, :] - v[:, None, :, :]
        out[s : s + step] = np.sqrt(np.einsum("bijd,bijd->bij", diff, diff))
    return out


def neighbor_membership(neighbors: NeighborTensor, k: int, weight_mode: str = "affinity"):
    """Vectorized masked K-NN over every spot's 25 tokens.

    Returns ``(membership, weight)`` with shapes (n, 25, 25) and (n, 25); edge
    ``e`` of spot ``i`` is centred on token ``e``.
    """
    values, valid = neighbors.values, neighbors.valid
    n, t, _ = values.shape
    dist = _token_distances(values)

    pair_ok = valid[:, :, None] & valid[:, None, :] & ~np.eye(t, dtype=bool)[None]
    big = np.where(pair_ok, dist, -np.inf).max(axis=(1, 2), keepdims=True)
    small = np.where(pair_ok, dist, np.inf).min(axis=(1, 2), keepdims=True)
    span = big - small
    has_span = np.isfinite(span) & (span > 0)
    norm_dist = np.where(has_span, (dist - np.where(np.isfinite(small), small, 0.0)) / np.where(has_span, span, 1.0), 0.0)

    ranked = np.where(pair_ok, norm_dist, np.inf)
    order = np.argsort(ranked, axis=2, kind="stable")[:, :, :k]
    n_cand = pair_ok.sum(axis=2)  # (n, t)
    take = np.arange(k)[None, None, :] < n_cand[:, :, None]

    membership = np.zeros((n, t, t), dtype=bool)
    b_idx, e_idx, _ = np.nonzero(take)
    membership[b_idx, order[take], e_idx] = True
    membership[:, np.arange(t), np.arange(t)] = True

    chosen = np.take_along_axis(norm_dist, order, axis=2)
    cnt = take.sum(axis=2)
    mean_dist = np.where(cnt > 0, (chosen * take).sum(axis=2) / np.maximum(cnt, 1), 0.0)
    weight = np.where(cnt > 0, _edge_weight(mean_dist, weight_mode), MIN_EDGE_WEIGHT)
    return membership, weight


def build_neighbor_subhypergraphs(neighbors: NeighborTensor, k: int, weight_mode: str = "affinity") -> list[Hypergraph]:
    """One 25-node hypergraph per spot from token feature distances alone.

    Border (invalid) tokens never enter another token's hyperedge; each keeps a
    self-only edge with the minimum weight so that its degree stays positive.
    """
    membership, weight = neighbor_membership(neighbors, k, weight_mode)
    return [Hypergraph(membership[i], weight[i]) for i in range(membership.shape[0])]


def stack_propagation(hypergraphs: Sequence[Hypergraph]) -> np.ndarray:
    membership = np.stack([h.membership for h in hypergraphs]).astype(np.float64)
    weight = np.stack([h.edge_weight for h in hypergraphs])
    return _propagation(membership, weight)


def neighbor_propagation(neighbors: NeighborTensor, k: int, weight_mode: str = "affinity") -> np.ndarray:
    membership, weight = neighbor_membership(neighbors, k, weight_mode)
    return _propagation(membership.astype(np.float64), weight)


# ---------------------------------------------------------------------------
# convolution

Propagation = Union[Hypergraph, np.ndarray]


def hypergraph_conv(x: Tensor, hg: Propagation, theta: Tensor) -> Tensor:
    """``P X Theta`` where ``P`` is the normalized propagation operator of ``hg``.

    ``hg`` may be a :class:`Hypergraph` or a precomputed operator, including a
    batch of operators of shape (b, nodes, nodes) paired with ``x`` of shape
    (b, nodes, d_in).
    """
    prop = hg.propagation_matrix() if isinstance(hg, Hypergraph) else np.asarray(hg)
    if prop.shape[-1] != x.shape[-2]:
        raise T.DimensionError(f"propagation {prop.shape} does not match input {x.shape}")
    d_in, d_out = theta.shape
    if not x.requires_grad:
        # constant input: propagate once, then a single 2-D product with theta
        px = prop @ x.data
        flat = T.matmul(Tensor(px.reshape(-1, d_in)), theta)
        return flat.reshape(px.shape[:-1] + (d_out,))
    if d_in <= d_out:
        return T.matmul(T.matmul(Tensor(prop), x), theta)
    return T.matmul(Tensor(prop), T.matmul(x, theta))


def wrap_conv_block(
    x: Tensor,
    hg: Propagation,
    theta: Tensor,
    p_drop: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Dropout(LayerNorm(ReLU(hypergraph_conv(x))))."""
    h = T.relu(hypergraph_conv(x, hg, theta))
    h = T.layer_norm(h, gain, bias)
    return T.dropout(h, p_drop, training, rng)
