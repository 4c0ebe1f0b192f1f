"""Greedy bipartite approximation of a graph under a GMRF KL-divergence criterion."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from rglr.errors import SingularPrecision
from rglr.graph import Graph
from rglr.pointcloud import BLUE, RED

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class GmrfConfig:
    """``delta`` is the DC precision; ``start_node`` None means random root."""

    delta: float = 1e-2
    start_node: int | None = 0
    seed: int = 0
    hops: int = 1
    exact: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.delta) and self.delta > 0):
            raise ValueError("delta must be finite and positive")
        if self.hops < 1:
            raise ValueError("hops must be >= 1")


@dataclass(frozen=True, eq=False)
class BipartitePartition:
    labels: np.ndarray
    kept: Graph

    @property
    def red(self) -> np.ndarray:
        return np.flatnonzero(self.labels == RED)

    @property
    def blue(self) -> np.ndarray:
        return np.flatnonzero(self.labels == BLUE)

    def dump(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            for i, lab in enumerate(self.labels):
                fh.write(f"{i} {'R' if lab == RED else 'B'}\n")


def _dense(mat):
    return mat.toarray() if sp.issparse(mat) else np.asarray(mat, dtype=float)


def _cholesky(mat):
    try:
        return sla.cho_factor(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularPrecision(str(exc)) from None


def _logdet(cho):
    return 2.0 * np.sum(np.log(np.diag(cho[0])))


def _kld_from_factor(prec_b, cho, logdet_p):
    n = prec_b.shape[0]
    trace = np.trace(sla.cho_solve(cho, prec_b, check_finite=False))
    return 0.5 * (trace + logdet_p - _logdet(_cholesky(prec_b)) - n)


def kld(lap_b, lap, delta) -> float:
    """KL divergence between the GMRFs with precisions ``L + dI`` and ``L_b + dI``.

    Parameters
    ----------
    lap_b : array or sparse matrix
        Laplacian of the candidate (approximating) graph.
    lap : array or sparse matrix
        Laplacian of the original graph on the same node set.
    delta : float
        Precision of the DC component; must be positive.
    """
    lap_b, lap = _dense(lap_b), _dense(lap)
    eye = delta * np.eye(lap.shape[0])
    cho = _cholesky(lap + eye)
    return float(_kld_from_factor(lap_b + eye, cho, _logdet(cho)))


def is_bipartite(graph: Graph, labels) -> bool:
    labels = np.asarray(labels)
    return bool(np.all(labels[graph.rows] != labels[graph.cols]))


def _local_nodes(v, adj, side, hops, exact):
    if exact:
        placed = np.flatnonzero(side >= 0)
        return np.concatenate([placed, [v]])
    frontier = {v}
    seen = {v}
    for _ in range(hops):
        nxt = set()
        for u in frontier:
            nxt.update(adj.indices[adj.indptr[u]:adj.indptr[u + 1]].tolist())
        nxt -= seen
        seen |= nxt
        frontier = nxt
    placed = sorted(u for u in seen if u != v and side[u] >= 0)
    return np.array(placed + [v], dtype=np.int64)


def _submatrix(adj, nodes, pos):
    """Dense ``adj[nodes][:, nodes]``; ``pos`` is an all -1 scratch array, restored on return."""
    m = len(nodes)
    out = np.zeros((m, m))
    pos[nodes] = np.arange(m)
    for a, u in enumerate(nodes):
        lo, hi = adj.indptr[u], adj.indptr[u + 1]
        cols = pos[adj.indices[lo:hi]]
        hit = cols >= 0
        out[a, cols[hit]] = adj.data[lo:hi][hit]
    pos[nodes] = -1
    return out


def _candidate_laplacians(sub_w, sub_side):
    """Original and the two candidate Laplacians on a local node set.

    The candidate node is the last entry; ``sub_side`` holds the sides of the
    already placed nodes.
    """
    lap = np.diag(sub_w.sum(axis=1)) - sub_w
    out = []
    for cand in (RED, BLUE):
        side = np.append(sub_side, cand)
        w = np.where(side[:, None] != side[None, :], sub_w, 0.0)
        out.append(np.diag(w.sum(axis=1)) - w)
    return lap, out[0], out[1]


def approximate(graph: Graph, config: GmrfConfig = GmrfConfig()) -> BipartitePartition:
    """Split nodes into red/blue sets by BFS-ordered greedy KLD minimization.

    Each connected component is processed from its own root: the configured
    start node for the component that contains it, otherwise the lowest index
    (or a seeded random node when ``start_node`` is None).
    """
    n = graph.n
    adj = graph.adjacency()
    side = -np.ones(n, dtype=np.int8)
    rng = np.random.default_rng(config.seed)
    n_comp, comp = connected_components(adj, directed=False)
    tie_next = BLUE
    eye_cache = {}
    queued = np.zeros(n, dtype=bool)
    pos = -np.ones(n, dtype=np.int64)

    for c in range(n_comp):
        members = np.flatnonzero(comp == c)
        if config.start_node is not None and comp[config.start_node] == c:
            root = int(config.start_node)
        elif config.start_node is None:
            root = int(rng.choice(members))
        else:
            root = int(members[0])
        side[root] = RED
        queued[root] = True
        queue = deque([root])
        while queue:
            v = queue.popleft()
            nbrs = np.sort(adj.indices[adj.indptr[v]:adj.indptr[v + 1]])
            for u in nbrs:
                if not queued[u]:
                    queued[u] = True
                    queue.append(u)
            if side[v] >= 0:
                continue
            nodes = _local_nodes(v, adj, side, config.hops, config.exact)
            if len(nodes) == 1:
                side[v] = RED
                continue
            sub_w = _submatrix(adj, nodes, pos)
            lap, lap_red, lap_blue = _candidate_laplacians(sub_w, side[nodes[:-1]])
            m = len(nodes)
            eye = eye_cache.get(m)
            if eye is None:
                eye = eye_cache[m] = config.delta * np.eye(m)
            cho = _cholesky(lap + eye)
            logdet_p = _logdet(cho)
            d_red = _kld_from_factor(lap_red + eye, cho, logdet_p)
            d_blue = _kld_from_factor(lap_blue + eye, cho, logdet_p)
            if abs(d_blue - d_red) <= TIE_TOL:
                side[v] = tie_next
                tie_next = RED if tie_next == BLUE else BLUE
            elif d_blue > d_red:
                side[v] = RED
            else:
                side[v] = BLUE

    keep = side[graph.rows] != side[graph.cols]
    kept = Graph(n, graph.rows[keep], graph.cols[keep], graph.weights[keep])
    return BipartitePartition(side.copy(), kept)
