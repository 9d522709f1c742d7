"""Graph-based interpolation on the learned latent manifold.

Nodes are draws from the learned prior; each node is connected to its k
nearest neighbours (exact brute force, Euclidean weights, undirected union).
Query points are encoded to their posterior means, wired to their k nearest
prior nodes, and joined by an A* shortest path whose decoded means form the
interpolation.  Path quality is scored by the RMS of second-order finite
differences along the decoded sequence.
"""

from __future__ import annotations

import dataclasses
import heapq
import math

import numpy as np

from .pendulum import atomic_write_bytes
from .stochastic import prior_sample


class NoPathError(ValueError):
    """The two query nodes lie in disconnected graph components."""


def _distances(nodes, point):
    diff = nodes - point
    return np.sqrt(np.sum(diff * diff, axis=1))


class LatentGraph:
    """Undirected k-NN graph over latent vectors.

    ``core_count`` nodes come from the prior; nodes appended later (queries)
    connect only to core nodes, so insertions never disturb the original
    adjacency and are independent of insertion order.
    """

    def __init__(self, nodes, k, adjacency, core_count):
        self.nodes = nodes
        self.k = k
        self.adjacency = adjacency
        self.core_count = core_count

    @classmethod
    def build(cls, nodes, k):
        nodes = np.asarray(nodes, dtype=np.float64)
        if nodes.ndim != 2:
            raise ValueError("nodes must be a (n, dim) array")
        n = nodes.shape[0]
        if not (1 <= k < n):
            raise ValueError(f"need n > k >= 1, got n={n}, k={k}")
        adjacency = [dict() for _ in range(n)]
        for i in range(n):
            d = _distances(nodes, nodes[i])
            d[i] = np.inf
            # stable sort: equal distances resolve to the lower node id
            for j in np.argsort(d, kind="stable")[:k]:
                j = int(j)
                adjacency[i][j] = d[j]
                adjacency[j][i] = d[j]
        return cls(nodes, k, adjacency, n)

    def __len__(self):
        return self.nodes.shape[0]

    def insert(self, z):
        """Add a query node wired to its k nearest core nodes; returns its id."""
        z = np.asarray(z, dtype=np.float64).reshape(-1)
        if z.shape[0] != self.nodes.shape[1]:
            raise ValueError("query dimension mismatch")
        d = _distances(self.nodes[:self.core_count], z)
        new_id = len(self)
        self.nodes = np.vstack([self.nodes, z[None, :]])
        edges = {}
        for j in np.argsort(d, kind="stable")[:self.k]:
            j = int(j)
            edges[j] = d[j]
            self.adjacency[j][new_id] = d[j]
        self.adjacency.append(edges)
        return new_id


def build_graph(model, n, k, seed):
    """Graph over n prior samples with k-NN union adjacency."""
    z, _ = prior_sample(model, n, seed)
    return LatentGraph.build(z, k)


def insert_queries(graph, model, x_i, x_j):
    """Encode two observations to posterior means and insert both."""
    x = np.vstack([np.asarray(x_i, dtype=np.float64).reshape(1, -1),
                   np.asarray(x_j, dtype=np.float64).reshape(1, -1)])
    means = model.encoder(x).mean
    return graph.insert(means[0]), graph.insert(means[1])


@dataclasses.dataclass
class PathResult:
    """Shortest path: node ids, their latent vectors, and the total length."""

    ids: list
    latents: np.ndarray
    length: float


def shortest_path(graph, a, b):
    """Minimal-weight path via A* with the Euclidean distance heuristic.

    The heuristic is admissible and consistent because edge weights are the
    same Euclidean metric.  Ties in total length are broken by fewer hops,
    then by lower predecessor id, making results deterministic.
    """
    n = len(graph)
    if not (0 <= a < n and 0 <= b < n):
        raise ValueError(f"node ids must be in [0, {n})")
    nodes = graph.nodes
    if a == b:
        return PathResult([a], nodes[[a]].copy(), 0.0)

    def h(v):
        return float(np.linalg.norm(nodes[v] - nodes[b]))

    best = {a: (0.0, 0, -1)}  # node -> (g, hops, predecessor)
    heap = [(h(a), 0, a)]
    while heap:
        f, hops, u = heapq.heappop(heap)
        g_u, hops_u, _ = best[u]
        if (f, hops) != (g_u + h(u), hops_u):
            continue  # stale queue entry
        if u == b:
            break
        for v, w in graph.adjacency[u].items():
            cand = (g_u + w, hops_u + 1)
            stored = best.get(v)
            if stored is None or cand < stored[:2]:
                best[v] = (cand[0], cand[1], u)
                heapq.heappush(heap, (cand[0] + h(v), cand[1], v))
            elif cand == stored[:2] and u < stored[2]:
                best[v] = (cand[0], cand[1], u)
    if b not in best:
        raise NoPathError(f"nodes {a} and {b} are not connected")

    ids = [b]
    while ids[-1] != a:
        ids.append(best[ids[-1]][2])
    ids.reverse()
    return PathResult(ids, nodes[ids].copy(), best[b][0])


def decode_path(model, path):
    """Decoder means for every latent on the path, in path order."""
    return np.asarray(model.decoder(path.latents).mean, dtype=np.float64)


def smoothness_factor(frames):
    """Per-feature RMS of the second-order finite difference, plus the mean.

    Returns (per_dim, aggregate).  Zero for straight-line (arithmetic)
    sequences; invariant under constant shifts.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[:, None]
    if frames.ndim != 2 or frames.shape[0] < 3:
        raise ValueError("need a (T >= 3, dim) sequence")
    second = frames[2:] - 2.0 * frames[1:-1] + frames[:-2]
    per_dim = np.sqrt(np.mean(second * second, axis=0))
    return per_dim, float(np.mean(per_dim))


def frames_to_strip(frames):
    """Stack (T, h, w) frames into one (h, T*w) image, one frame per block."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ValueError("need a (T, h, w) frame stack")
    return np.concatenate(list(frames), axis=1)


def save_pgm(path, image):
    """Write a [0, 1] grayscale image as binary PGM (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2-d image")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + data.tobytes(order="C"))


def path_csv(path_result):
    """CSV of the path's latent vectors: id,z0,z1,..."""
    dim = path_result.latents.shape[1]
    lines = ["id," + ",".join(f"z{i}" for i in range(dim))]
    for node_id, z in zip(path_result.ids, path_result.latents):
        lines.append(str(node_id) + "," + ",".join(repr(float(v)) for v in z))
    return "\n".join(lines) + "\n"
