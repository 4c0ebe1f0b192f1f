"""k-NN graphs, edge weights, Laplacians and the RGLR/GLR regularizers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from rglr.errors import TooFewPoints

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected weighted graph stored as an upper-triangular edge list.

    ``rows[e] < cols[e]`` for every edge ``e``; edges are sorted
    lexicographically so every reduction over them is deterministic.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_edges(cls, n, rows, cols, weights=None, floor=WEIGHT_FLOOR):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if weights is None:
            weights = np.ones(len(rows))
        weights = np.asarray(weights, dtype=float)
        if np.any(rows == cols):
            raise ValueError("self-loops are not allowed")
        if np.any(weights < 0):
            raise ValueError("edge weights must be non-negative")
        lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
        order = np.lexsort((hi, lo))
        lo, hi, weights = lo[order], hi[order], weights[order]
        if len(lo) > 1:
            dup = (lo[1:] == lo[:-1]) & (hi[1:] == hi[:-1])
            if np.any(dup):
                raise ValueError("duplicate edges")
        keep = weights >= floor
        return cls(int(n), lo[keep], hi[keep], weights[keep])

    @property
    def n_edges(self) -> int:
        return len(self.rows)

    def with_weights(self, weights, floor=WEIGHT_FLOOR) -> "Graph":
        weights = np.asarray(weights, dtype=float)
        keep = weights >= floor
        return Graph(self.n, self.rows[keep], self.cols[keep], weights[keep])

    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n)
        np.add.at(deg, self.rows, self.weights)
        np.add.at(deg, self.cols, self.weights)
        return deg

    def adjacency(self) -> sp.csr_matrix:
        r = np.concatenate([self.rows, self.cols])
        c = np.concatenate([self.cols, self.rows])
        w = np.concatenate([self.weights, self.weights])
        return sp.csr_matrix((w, (r, c)), shape=(self.n, self.n))

    def neighbors(self) -> list[np.ndarray]:
        """Sorted neighbor index arrays, one per node."""
        adj = self.adjacency()
        return [np.sort(adj.indices[adj.indptr[i]:adj.indptr[i + 1]]) for i in range(self.n)]

    def subgraph(self, nodes) -> tuple["Graph", np.ndarray]:
        """Induced subgraph on ``nodes`` relabelled 0..m-1, plus the index map."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = -np.ones(self.n, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        r, c = remap[self.rows], remap[self.cols]
        keep = (r >= 0) & (c >= 0)
        sub = Graph.from_edges(len(nodes), r[keep], c[keep], self.weights[keep], floor=0.0)
        return sub, nodes

    def dump(self, path) -> None:
        """Write the edge list as ``i j w`` lines."""
        with open(path, "w", newline="\n") as fh:
            for i, j, w in zip(self.rows, self.cols, self.weights):
                fh.write(f"{i} {j} {w:.17g}\n")


def knn_indices(points, k):
    """Indices (n, k) and distances (n, k) of each point's k nearest others."""
    points = np.asarray(points, dtype=float)
    if len(points) < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points for k={k}, got {len(points)}")
    tree = cKDTree(points)
    dist, idx = tree.query(points, k=k + 1)
    n = len(points)
    if np.array_equal(idx[:, 0], np.arange(n)):
        return idx[:, 1:].astype(np.int64), dist[:, 1:]
    # duplicate points: self is not necessarily in column 0
    out_i = np.empty((n, k), dtype=np.int64)
    out_d = np.empty((n, k))
    for row in range(n):
        sel = idx[row] != row
        out_i[row], out_d[row] = idx[row][sel][:k], dist[row][sel][:k]
    return out_i, out_d


def mean_knn_distance(points, k=6) -> float:
    _, d = knn_indices(points, k)
    return float(d.mean())


def knn_graph(points, k=6, sigma_p=None, normals=None, mutual=False) -> Graph:
    """Symmetrized k-NN graph with Gaussian distance (and optional angle) weights.

    An edge is kept when either endpoint selects the other (``mutual=False``)
    or when both do (``mutual=True``). ``sigma_p`` defaults to the mean k-NN
    distance.
    """
    points = np.asarray(points, dtype=float)
    idx, dist = knn_indices(points, k)
    if sigma_p is None:
        sigma_p = float(dist.mean()) or 1.0
    n = len(points)
    src = np.repeat(np.arange(n), k)
    dst = idx.ravel()
    lo, hi = np.minimum(src, dst), np.maximum(src, dst)
    keys = lo * n + hi
    uniq, counts = np.unique(keys, return_counts=True)
    if mutual:
        uniq = uniq[counts == 2]
    rows, cols = uniq // n, uniq % n
    w = edge_weights(points, rows, cols, sigma_p, normals)
    return Graph.from_edges(n, rows, cols, w)


def edge_weight(p_i, p_j, n_i, n_j, sigma_p) -> float:
    """exp(-|p_i - p_j|^2 / sigma_p^2) * ((2 - |n_i - n_j|^2) / 2)^2."""
    p_i, p_j, n_i, n_j = (np.asarray(v, dtype=float) for v in (p_i, p_j, n_i, n_j))
    dp = p_i - p_j
    dn = n_i - n_j
    angle = ((2.0 - dn @ dn) / 2.0) ** 2
    return float(np.exp(-(dp @ dp) / sigma_p**2) * angle)


def edge_weights(points, rows, cols, sigma_p, normals=None) -> np.ndarray:
    """Vectorized :func:`edge_weight` over an edge list."""
    dp = points[rows] - points[cols]
    w = np.exp(-np.einsum("ij,ij->i", dp, dp) / sigma_p**2)
    if normals is not None:
        dn = normals[rows] - normals[cols]
        w = w * ((2.0 - np.einsum("ij,ij->i", dn, dn)) / 2.0) ** 2
    return w


def laplacian(graph: Graph) -> sp.csr_matrix:
    """Combinatorial Laplacian ``D - W`` as a sparse symmetric matrix."""
    adj = graph.adjacency()
    return (sp.diags(graph.degree()) - adj).tocsr()


def glr(normals, graph: Graph) -> float:
    """Sum of frozen edge weights times squared normal differences."""
    dn = normals[graph.rows] - normals[graph.cols]
    return float(np.sum(graph.weights * np.einsum("ij,ij->i", dn, dn)))


def rglr(normals, graph: Graph, sigma_p, positions) -> float:
    """Regularizer with weights recomputed from the current normals and positions."""
    w = edge_weights(positions, graph.rows, graph.cols, sigma_p, normals)
    dn = normals[graph.rows] - normals[graph.cols]
    return float(np.sum(w * np.einsum("ij,ij->i", dn, dn)))


def rglr_matrix_form(normals, graph: Graph, sigma_p, positions) -> float:
    """Same value as :func:`rglr`, via three Laplacian quadratic forms."""
    w = edge_weights(positions, graph.rows, graph.cols, sigma_p, normals)
    lap = laplacian(Graph(graph.n, graph.rows, graph.cols, w))
    return float(sum(normals[:, c] @ (lap @ normals[:, c]) for c in range(3)))


def rglr_pair(d, w_p=1.0):
    """Per-pair regularizer as a function of d = |n_i - n_j|^2."""
    d = np.asarray(d, dtype=float)
    return w_p * (2.0 - d) ** 2 / 4.0 * d


def power_iteration(matvec, n, tol=1e-6, max_iter=1000, seed=0) -> float:
    """Largest eigenvalue of a symmetric PSD operator."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            lam = new
            break
        lam = new
    return max(lam, float(v @ matvec(v)))


def spectral_bounds(graph: Graph) -> dict:
    """Maximum weighted degree and the Gershgorin bound on the Laplacian spectrum."""
    rho = float(graph.degree().max()) if graph.n else 0.0
    return {"rho_max": rho, "lambda_max_bound": 2.0 * rho}
