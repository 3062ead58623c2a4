"""Spatiotemporal condition graph: cluster nodes, spherical KNN edges, node embeddings."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch


class GraphError(ValueError):
    pass


class TooFewPoints(GraphError):
    pass


class IsolatedNode(GraphError):
    pass


class OddDimension(ValueError):
    pass


def latlon_to_xyz(lon, lat) -> np.ndarray:
    """Unit-sphere coordinates ``(..., 3)`` for degrees longitude/latitude."""
    lon = np.radians(np.asarray(lon, dtype=np.float64))
    lat = np.radians(np.asarray(lat, dtype=np.float64))
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.cos(lon), cos_lat * np.sin(lon), np.sin(lat)], axis=-1)


def xyz_to_latlon(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    lat = np.degrees(np.arcsin(np.clip(p[..., 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(p[..., 1], p[..., 0]))
    lon = np.where(lon >= 180.0, lon - 360.0, lon)
    return np.stack([lon, lat], axis=-1)


def _sq_chord(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


# ------------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, 2) lon/lat degrees
    coords3d: np.ndarray  # (k, 3)
    labels: np.ndarray
    objective: list[float]  # squared chord objective after every assignment step
    reseeded: int = 0


def kmeans_centers(points, k_clusters: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Spherical k-means on (lon, lat) points.

    Runs on 3D unit vectors; each mean update is projected back onto the
    sphere, which is the minimiser of the squared chord objective over unit
    vectors, so the objective never increases.  An emptied cluster is
    re-seeded at the point currently farthest from its center.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    p = latlon_to_xyz(points[:, 0], points[:, 1])
    n_distinct = len(np.unique(np.round(p, 12), axis=0))
    if k_clusters < 1 or k_clusters > n_distinct:
        raise TooFewPoints(f"k_clusters={k_clusters} but only {n_distinct} distinct points")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k_clusters, 3))
    centers[0] = p[rng.integers(len(p))]
    d2 = ((p - centers[0]) ** 2).sum(-1)
    for j in range(1, k_clusters):
        probs = d2 / d2.sum()
        centers[j] = p[rng.choice(len(p), p=probs)]
        d2 = np.minimum(d2, ((p - centers[j]) ** 2).sum(-1))

    history: list[float] = []
    labels = None
    reseeded = 0
    for _ in range(max_iter):
        dist = _sq_chord(p, centers)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(p)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k_clusters):
            members = p[labels == j]
            if len(members) == 0:
                own = dist[np.arange(len(p)), labels]
                far = int(own.argmax())
                centers[j] = p[far]
                labels[far] = j
                reseeded += 1
                continue
            m = members.sum(axis=0)
            norm = np.linalg.norm(m)
            if norm > 0:
                centers[j] = m / norm
    return KMeansResult(xyz_to_latlon(centers), centers.copy(), labels, history, reseeded)


# -------------------------------------------------------------------- edges


def nearest_index(coords3d: np.ndarray, lon, lat) -> np.ndarray:
    """Index of the nearest row of ``coords3d`` by chord distance (lowest index wins ties)."""
    q = latlon_to_xyz(lon, lat).reshape(-1, 3)
    return _sq_chord(q, np.asarray(coords3d)).argmin(axis=1)


def knn_adjacency(coords3d, k_nn: int) -> np.ndarray:
    """Directed KNN adjacency on 3D chord distance, self excluded, ties to lower index."""
    coords3d = np.asarray(coords3d, dtype=np.float64)
    n = len(coords3d)
    if not 0 <= k_nn < n:
        raise GraphError(f"k_nn={k_nn} must be in [0, {n})")
    dist = _sq_chord(coords3d, coords3d)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k_nn]
    adj = np.zeros((n, n), dtype=np.int64)
    np.put_along_axis(adj, order, 1, axis=1)
    return adj


@dataclass(frozen=True)
class KernelParams:
    sigma: float = 1.0
    mu: float = 1.0
    k_nn: int = 8

    def __post_init__(self):
        if not (self.sigma > 0 and self.mu > 0 and self.k_nn >= 1):
            raise GraphError(f"kernel parameters must be positive: {self}")


def log_gaussian_kernel(distance, sigma: float, mu: float):
    return np.exp(-((1.0 - np.exp(-np.asarray(distance) / mu)) ** 2) / (2.0 * sigma * sigma))


def edge_weights(coords3d, adjacency, params: KernelParams) -> np.ndarray:
    coords3d = np.asarray(coords3d, dtype=np.float64)
    dist = np.sqrt(_sq_chord(coords3d, coords3d))
    return np.where(np.asarray(adjacency) == 1, log_gaussian_kernel(dist, params.sigma, params.mu), 0.0)


def mean_edge_length(coords3d, adjacency) -> float:
    coords3d = np.asarray(coords3d, dtype=np.float64)
    dist = np.sqrt(_sq_chord(coords3d, coords3d))
    return float(dist[np.asarray(adjacency) == 1].mean())


# ------------------------------------------------------------------ node2vec


def node2vec_walks(adjacency, weights, walk_length: int = 20, walks_per_node: int = 10,
                   p: float = 1.0, q: float = 1.0, seed: int = 0) -> np.ndarray:
    """Second-order biased random walks over out-edges, shape (n*walks_per_node, walk_length)."""
    adjacency = np.asarray(adjacency)
    n = len(adjacency)
    weights = np.where(adjacency == 1, np.asarray(weights, dtype=np.float64), 0.0)
    if np.any((adjacency == 1) & (weights <= 0)):
        weights = np.where(adjacency == 1, np.maximum(weights, 1e-12), 0.0)
    isolated = np.flatnonzero(adjacency.sum(axis=1) == 0)
    if len(isolated):
        raise IsolatedNode(f"nodes without out-edges cannot start walks: {isolated.tolist()}")
    rng = np.random.default_rng(seed)
    nbrs = [np.flatnonzero(adjacency[i]) for i in range(n)]
    walks = np.empty((walks_per_node * n, walk_length), dtype=np.int64)
    row = 0
    for _ in range(walks_per_node):
        for start in rng.permutation(n):
            walk = walks[row]
            walk[0] = start
            for s in range(1, walk_length):
                cur = walk[s - 1]
                cand = nbrs[cur]
                w = weights[cur, cand].copy()
                if s > 1:
                    prev = walk[s - 2]
                    back = cand == prev
                    near = adjacency[prev, cand] == 1
                    w = np.where(back, w / p, np.where(near, w, w / q))
                walk[s] = cand[rng.choice(len(cand), p=w / w.sum())]
            row += 1
    return walks


def skipgram_embed(walks: np.ndarray, n_nodes: int, dims: int, window: int = 5,
                   negative: int = 5, epochs: int = 5, lr: float = 0.025,
                   batch: int = 256, seed: int = 0) -> np.ndarray:
    """Skip-gram with negative sampling over walk co-occurrences (plain SGD)."""
    rng = np.random.default_rng(seed)
    centers, contexts = [], []
    length = walks.shape[1]
    for off in range(1, window + 1):
        if off >= length:
            break
        centers += [walks[:, :-off].ravel(), walks[:, off:].ravel()]
        contexts += [walks[:, off:].ravel(), walks[:, :-off].ravel()]
    centers = np.concatenate(centers)
    contexts = np.concatenate(contexts)
    freq = np.bincount(walks.ravel(), minlength=n_nodes).astype(np.float64) ** 0.75
    noise = freq / freq.sum()

    w_in = (rng.random((n_nodes, dims)) - 0.5) / dims
    w_out = np.zeros((n_nodes, dims))
    n_pairs = len(centers)
    total = epochs * math.ceil(n_pairs / batch)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch):
            idx = order[start:start + batch]
            c, o = centers[idx], contexts[idx]
            neg = rng.choice(n_nodes, size=(len(idx), negative), p=noise)
            rate = lr * max(1.0 - step / total, 1e-4)
            step += 1
            u = w_in[c]  # (b, d)
            targets = np.concatenate([o[:, None], neg], axis=1)  # (b, 1+neg)
            v = w_out[targets]  # (b, 1+neg, d)
            score = np.einsum("bd,bkd->bk", u, v)
            label = np.zeros_like(score)
            label[:, 0] = 1.0
            g = (label - 1.0 / (1.0 + np.exp(-score))) * rate  # ascent direction
            grad_u = np.einsum("bk,bkd->bd", g, v)
            grad_v = g[:, :, None] * u[:, None, :]
            np.add.at(w_out, targets, grad_v)
            np.add.at(w_in, c, grad_u)
    return w_in


def node2vec_embed(adjacency, weights, dims: int, walk_length: int = 20, walks_per_node: int = 10,
                   window: int = 5, p: float = 1.0, q: float = 1.0, seed: int = 0,
                   epochs: int = 5) -> np.ndarray:
    walks = node2vec_walks(adjacency, weights, walk_length, walks_per_node, p, q, seed)
    return skipgram_embed(walks, len(adjacency), dims, window=window, epochs=epochs, seed=seed + 1)


# ---------------------------------------------------------------------- RoPE


def rope_angles(t, dims: int, base: float = 10000.0) -> np.ndarray:
    """Angles ``t * base**(-2m/dims)`` for m = 0..dims/2-1, shape ``t.shape + (dims/2,)``."""
    if dims % 2:
        raise OddDimension(f"rotary embedding needs an even dimension, got {dims}")
    theta = base ** (-np.arange(0, dims, 2, dtype=np.float64) / dims)
    return np.asarray(t, dtype=np.float64)[..., None] * theta


def rope_time(x, t, base: float = 10000.0):
    """Rotate channel pairs (2m, 2m+1) of ``x`` by ``t * theta_m``.

    ``t`` broadcasts against ``x.shape[:-1]``.  Works on numpy arrays and
    torch tensors (autograd flows through the tensor path).
    """
    dims = x.shape[-1]
    ang = rope_angles(t, dims, base)
    cos, sin = np.cos(ang), np.sin(ang)
    if isinstance(x, torch.Tensor):
        cos = torch.as_tensor(cos, dtype=x.dtype)
        sin = torch.as_tensor(sin, dtype=x.dtype)
        stack = torch.stack
    else:
        x = np.asarray(x, dtype=np.float64)
        stack = np.stack
    even, odd = x[..., 0::2], x[..., 1::2]
    out = stack([even * cos - odd * sin, even * sin + odd * cos], -1)
    return out.reshape(out.shape[:-2] + (dims,))


# --------------------------------------------------------------------- graph


@dataclass
class ConditionGraph:
    centers: np.ndarray  # (k, 2) lon/lat
    coords3d: np.ndarray  # (k, 3)
    adjacency: np.ndarray  # (k, k) 0/1
    weights: np.ndarray  # (k, k)
    node_embed: np.ndarray  # (k, T, d_cond) initial condition vectors
    k_nn: int
    sigma: float
    mu: float
    rope_base: float = 10000.0
    degrees: np.ndarray = field(init=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        self.coords3d = np.asarray(self.coords3d, dtype=np.float64).reshape(-1, 3)
        self.adjacency = np.asarray(self.adjacency, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.node_embed = np.asarray(self.node_embed, dtype=np.float64)
        self.degrees = self.adjacency.sum(axis=1)

    @property
    def n_nodes(self) -> int:
        return len(self.centers)

    @property
    def n_times(self) -> int:
        return self.node_embed.shape[1]

    @property
    def d_cond(self) -> int:
        return self.node_embed.shape[2]

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])

    def neighbor_table(self) -> np.ndarray:
        """(k, k_nn) neighbor indices, ascending index order per row."""
        return np.stack([self.neighbors(i) for i in range(self.n_nodes)]) if self.k_nn else \
            np.zeros((self.n_nodes, 0), dtype=np.int64)

    def assign(self, lon, lat) -> np.ndarray:
        return nearest_index(self.coords3d, lon, lat)

    def to_dict(self) -> dict:
        src, dst = np.nonzero(self.adjacency)
        return {
            "centers": self.centers.tolist(),
            "k_nn": int(self.k_nn),
            "sigma": float(self.sigma),
            "mu": float(self.mu),
            "rope_base": float(self.rope_base),
            "n_nodes": self.n_nodes,
            "adjacency": np.stack([src, dst], axis=1).tolist(),
            "weights": self.weights[src, dst].tolist(),
            "embeddings": self.node_embed.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionGraph":
        n = int(d["n_nodes"])
        centers = np.asarray(d["centers"], dtype=np.float64).reshape(n, 2)
        adj = np.zeros((n, n), dtype=np.int64)
        w = np.zeros((n, n))
        pairs = np.asarray(d["adjacency"], dtype=np.int64).reshape(-1, 2)
        adj[pairs[:, 0], pairs[:, 1]] = 1
        w[pairs[:, 0], pairs[:, 1]] = d["weights"]
        return cls(centers, latlon_to_xyz(centers[:, 0], centers[:, 1]), adj, w,
                   np.asarray(d["embeddings"], dtype=np.float64), d["k_nn"], d["sigma"], d["mu"],
                   d.get("rope_base", 10000.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ConditionGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def assign_node(graph: ConditionGraph, lon: float, lat: float) -> int:
    return int(graph.assign(lon, lat)[0])


def build_graph(lon, lat, n_times: int, k_clusters: int = 64, k_nn: int = 8, d_cond: int = 32,
                sigma: float = 1.0, mu: float | None = None, seed: int = 0,
                walk_length: int = 20, walks_per_node: int = 10, window: int = 5,
                p: float = 1.0, q: float = 1.0, rope_base: float = 10000.0) -> ConditionGraph:
    """Cluster locations and assemble the condition graph.

    ``mu`` defaults to the mean chord length over the KNN edges.  Initial
    condition vectors are the node2vec vector of each node rotated by the
    rotary angle of every time step.
    """
    points = np.unique(np.stack([np.asarray(lon, float), np.asarray(lat, float)], axis=1), axis=0)
    km = kmeans_centers(points, k_clusters, seed=seed)
    centers = km.centers
    coords = latlon_to_xyz(centers[:, 0], centers[:, 1])
    adj = knn_adjacency(coords, k_nn)
    if mu is None:
        mu = mean_edge_length(coords, adj) if k_nn else 1.0
    params = KernelParams(sigma, mu, max(k_nn, 1))
    w = edge_weights(coords, adj, params)
    if k_nn:
        base_vec = node2vec_embed(adj, w, d_cond, walk_length, walks_per_node, window, p, q, seed)
    else:
        base_vec = np.random.default_rng(seed).standard_normal((k_clusters, d_cond)) / d_cond
    t = np.arange(n_times)
    embed = rope_time(np.broadcast_to(base_vec[:, None, :], (k_clusters, n_times, d_cond)),
                      np.broadcast_to(t[None, :], (k_clusters, n_times)), rope_base)
    return ConditionGraph(centers, coords, adj, w, embed, k_nn, sigma, mu, rope_base)
