"""Linearized surface normals from two neighbors of the opposite color."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, replace
from itertools import permutations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from rglr.errors import CollinearPoints, TooFewBlueNeighbors
from rglr.graph import Graph

log = logging.getLogger(__name__)

CROSS_EPS = 1e-12


def cross_matrix(c):
    """Matrix C with C @ x == cross(x, c)."""
    cx, cy, cz = c
    return np.array([[0.0, cz, -cy], [-cz, 0.0, cx], [cy, -cx, 0.0]])


def plane_operator(p_k, p_l):
    """(C, d) such that C @ p + d == cross(p - p_k, p_k - p_l) for every p."""
    p_k, p_l = np.asarray(p_k, dtype=float), np.asarray(p_l, dtype=float)
    c = p_k - p_l
    return cross_matrix(c), -np.cross(p_k, c)


def normal_model(p_i, p_k, p_l):
    """Linear normal map ``n(p) = A @ p + b`` linearized at ``p_i``.

    Returns ``(A, b, C, d)``; ``A`` and ``b`` carry no orientation sign yet.
    Raises :class:`CollinearPoints` when the three points span no plane.
    """
    C, d = plane_operator(p_k, p_l)
    v = C @ np.asarray(p_i, dtype=float) + d
    norm = np.linalg.norm(v)
    if norm < CROSS_EPS:
        raise CollinearPoints("red node and its blue pair are collinear")
    return C / norm, d / norm, C, d


def pair_angle(p_i, p_k, p_l) -> float:
    """Angle in degrees between (p_i - p_k) and (p_k - p_l)."""
    u = np.asarray(p_i, dtype=float) - p_k
    v = np.asarray(p_k, dtype=float) - p_l
    cosang = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))


def select_blue_pair(p_i, blue_points, min_dist):
    """Pick (k, l) from ``blue_points`` for the normal at ``p_i``.

    Among ordered pairs whose first member is at least ``min_dist`` from
    ``p_i`` the angle between ``p_i - p_k`` and ``p_k - p_l`` closest to 90
    degrees wins; ties go to the first pair in enumeration order. When no blue point
    passes the distance filter it is relaxed to the farthest available one.

    Returns ``(k, l, beta_degrees, degenerate)`` with k, l indexing
    ``blue_points``.
    """
    blue_points = np.asarray(blue_points, dtype=float).reshape(-1, 3)
    m = len(blue_points)
    if m < 2:
        raise TooFewBlueNeighbors(f"need 2 blue neighbors, got {m}")
    p_i = np.asarray(p_i, dtype=float)
    dist = np.linalg.norm(blue_points - p_i, axis=1)
    threshold = min(min_dist, dist.max())
    ks, ls = np.array(list(permutations(range(m), 2))).T
    ok = dist[ks] >= threshold
    ks, ls = ks[ok], ls[ok]
    u = p_i - blue_points[ks]
    v = blue_points[ks] - blue_points[ls]
    nu, nv = np.linalg.norm(u, axis=1), np.linalg.norm(v, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosang = np.einsum("ij,ij->i", u, v) / (nu * nv)
    cosang = np.nan_to_num(cosang, nan=1.0)
    beta = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    best = int(np.argmin(np.abs(beta - 90.0)))
    sin2 = 1.0 - cosang[best] ** 2
    degenerate = bool(sin2 < 1e-12 or nu[best] * nv[best] * np.sqrt(max(sin2, 0.0)) < CROSS_EPS)
    return int(ks[best]), int(ls[best]), float(beta[best]), degenerate


@dataclass(frozen=True, eq=False)
class NormalModel:
    """Per-node linear normal maps for one color.

    ``nodes`` are global indices of the modelled nodes; ``pairs`` the global
    indices of the two opposite-color nodes each map was built from.
    """

    nodes: np.ndarray
    A: np.ndarray
    b: np.ndarray
    sign: np.ndarray
    pairs: np.ndarray
    beta: np.ndarray
    dist_ik: np.ndarray
    degenerate: np.ndarray

    def __len__(self):
        return len(self.nodes)

    def normals(self, positions) -> np.ndarray:
        """Evaluate ``A_i p_i + b_i`` for node positions of shape (R, 3)."""
        return np.einsum("rij,rj->ri", self.A, positions) + self.b

    def stacked(self, axis) -> sp.csr_matrix:
        """Block-diagonal (R, 3R) operator producing one normal coordinate."""
        r = len(self.nodes)
        rows = np.repeat(np.arange(r), 3)
        cols = np.arange(3 * r)
        return sp.csr_matrix((self.A[:, axis, :].ravel(), (rows, cols)), shape=(r, 3 * r))

    def stacked_offset(self, axis) -> np.ndarray:
        return self.b[:, axis].copy()

    def take(self, rows) -> "NormalModel":
        """Sub-model holding the given rows."""
        rows = np.asarray(rows, dtype=np.int64)
        return NormalModel(
            self.nodes[rows], self.A[rows], self.b[rows], self.sign[rows],
            self.pairs[rows], self.beta[rows], self.dist_ik[rows], self.degenerate[rows],
        )

    def geometry_floor(self) -> float:
        """min_i |p_i - p_k|^2 sin^2(beta_i) over non-degenerate nodes."""
        s = np.sin(np.radians(self.beta))
        vals = (self.dist_ik * s) ** 2
        ok = ~self.degenerate
        return float(vals[ok].min()) if np.any(ok) else 0.0


def concat_models(*models: NormalModel) -> NormalModel:
    """Stack several models row-wise, in argument order."""
    return NormalModel(*(np.concatenate([getattr(m, f) for m in models]) for f in (
        "nodes", "A", "b", "sign", "pairs", "beta", "dist_ik", "degenerate")))


def _augment_neighbors(i, nbrs, positions, other, other_tree):
    if len(nbrs) >= 2:
        return nbrs
    _, near = other_tree.query(positions[i], k=min(len(other), 4))
    extra = [int(other[j]) for j in np.atleast_1d(near) if int(other[j]) not in set(nbrs)]
    log.debug("node %d has %d opposite-color neighbors; borrowing nearest", i, len(nbrs))
    return np.concatenate([nbrs, extra[: 2 - len(nbrs)]]).astype(np.int64)


MIN_DIST_FACTOR = 0.5


def build_models(positions, active, other, cross_graph: Graph, min_dist=None,
                 min_dist_factor=MIN_DIST_FACTOR) -> NormalModel:
    """Build normal models for ``active`` nodes from their ``other``-color neighbors.

    ``cross_graph`` is the bipartite graph over all nodes; neighbors are taken
    from it. ``min_dist`` defaults to ``min_dist_factor`` times the mean
    active-to-other neighbor distance.
    """
    positions = np.asarray(positions, dtype=float)
    active = np.asarray(active, dtype=np.int64)
    other = np.asarray(other, dtype=np.int64)
    nbr_lists = cross_graph.neighbors()
    other_tree = cKDTree(positions[other])

    lists = [_augment_neighbors(i, nbr_lists[i], positions, other, other_tree) for i in active]
    if min_dist is None:
        dists = [np.linalg.norm(positions[l] - positions[i], axis=1) for i, l in zip(active, lists)]
        min_dist = min_dist_factor * float(np.mean(np.concatenate(dists)))

    r = len(active)
    A = np.zeros((r, 3, 3))
    b = np.zeros((r, 3))
    pairs = np.zeros((r, 2), dtype=np.int64)
    beta = np.zeros(r)
    dist_ik = np.zeros(r)
    degenerate = np.zeros(r, dtype=bool)
    for row, (i, nbrs) in enumerate(zip(active, lists)):
        k, l, ang, degen = select_blue_pair(positions[i], positions[nbrs], min_dist)
        k, l = int(nbrs[k]), int(nbrs[l])
        pairs[row] = k, l
        beta[row] = ang
        dist_ik[row] = np.linalg.norm(positions[i] - positions[k])
        try:
            A[row], b[row], _, _ = normal_model(positions[i], positions[k], positions[l])
        except CollinearPoints:
            degen = True
        if degen:
            log.warning("degenerate normal geometry at node %d", i)
            A[row] = 0.0
            b[row] = (0.0, 0.0, 1.0)
        degenerate[row] = degen
    return NormalModel(active, A, b, np.ones(r), pairs, beta, dist_ik, degenerate)


def orient(model: NormalModel, graph: Graph, positions) -> NormalModel:
    """Make normals consistent by BFS propagation over ``graph``.

    ``graph`` indexes the modelled nodes 0..R-1 and ``positions`` has shape
    (R, 3). Each component is rooted at its lowest index; a node's sign is
    flipped when its normal points away from its BFS parent's.
    """
    n = model.normals(positions)
    flip = np.zeros(len(model), dtype=bool)
    adj = graph.adjacency()
    seen = np.zeros(len(model), dtype=bool)
    for root in range(len(model)):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in np.sort(adj.indices[adj.indptr[u]:adj.indptr[u + 1]]):
                if seen[v]:
                    continue
                seen[v] = True
                if n[v] @ n[u] < 0:
                    n[v] = -n[v]
                    flip[v] = True
                queue.append(v)
    s = np.where(flip, -1.0, 1.0)
    return replace(model, A=model.A * s[:, None, None], b=model.b * s[:, None], sign=model.sign * s)
