"""Flat-patch noise variance estimation and the gamma-vs-variance model."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from rglr.bipartite import GmrfConfig, approximate
from rglr.errors import DegenerateModels, NoFlatPatches, ZeroMatrix
from rglr.graph import knn_graph, mean_knn_distance
from rglr.metrics import tangent_planes
from rglr.normals import MIN_DIST_FACTOR, NormalModel, build_models, concat_models, orient
from rglr.pointcloud import BLUE, RED

log = logging.getLogger(__name__)

GAMMA_FLOOR = 1e-6
GAMMA_CEIL = 0.8


# ---------------------------------------------------------------- mean shift


def _bin_seeds(X, bin_size):
    keys = np.round(X / bin_size).astype(np.int64)
    uniq = np.unique(keys, axis=0)
    return uniq * bin_size


def mean_shift(X, bandwidth, max_iter=300, bin_seeding=True):
    """Flat-kernel mean shift.

    Seeds climb to the mean of all samples within ``bandwidth`` until they
    move less than ``1e-3 * bandwidth``. Modes closer than ``bandwidth / 2``
    are merged, keeping the better supported one, and every sample is
    labelled with its nearest surviving mode.

    Returns ``(labels, modes)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if len(X) == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, X.shape[1]))
    tree = cKDTree(X)
    seeds = _bin_seeds(X, bandwidth / 2) if bin_seeding else X.copy()
    # seeds landing on empty space cannot move; drop them
    has = np.array([len(ix) > 0 for ix in tree.query_ball_point(seeds, bandwidth)])
    seeds = seeds[has]
    stop = 1e-3 * bandwidth
    active = np.ones(len(seeds), dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        nbrs = tree.query_ball_point(seeds[idx], bandwidth)
        for s, members in zip(idx, nbrs):
            new = X[members].mean(axis=0)
            if np.linalg.norm(new - seeds[s]) < stop:
                active[s] = False
            seeds[s] = new
    support = np.array([len(ix) for ix in tree.query_ball_point(seeds, bandwidth)])
    order = np.lexsort((np.arange(len(seeds)), -support))
    kept: list[int] = []
    for s in order:
        if all(np.linalg.norm(seeds[s] - seeds[t]) >= bandwidth / 2 for t in kept):
            kept.append(s)
    modes = seeds[kept]
    _, labels = cKDTree(modes).query(X)
    return labels.astype(np.int64), modes


# ------------------------------------------------------------- flat patches


@dataclass(frozen=True)
class PatchConfig:
    """Flat-patch detection and estimator settings.

    ``min_dist_factor`` scales the pair-selection distance threshold for the
    estimator's normal models. It is larger than the denoiser's default:
    short baselines inflate small-noise estimates.
    """

    normal_bandwidth: float = 0.3
    geometry_factor: float = 6.0
    min_patch_size: int = 25
    k: int = 6
    detect_k: int = 24
    min_dist_factor: float = 1.5


@dataclass(frozen=True, eq=False)
class FlatPatch:
    """Nodes of one flat cluster, split by color.

    ``red_rows``/``blue_rows`` index the rows of the per-color normal models.
    """

    red_indices: np.ndarray
    blue_indices: np.ndarray
    red_rows: np.ndarray
    blue_rows: np.ndarray
    min_patch_size: int = 25

    def __len__(self):
        return len(self.red_indices) + len(self.blue_indices)


def detection_normals(positions, k=24) -> np.ndarray:
    """Consistently oriented PCA normals over ``k`` neighbors.

    Used only to find flat regions: wide neighborhoods keep the clustering
    features nearly independent of the per-point noise being measured.
    """
    positions = np.asarray(positions, dtype=float)
    k = min(k, len(positions) - 1)
    _, normals, _ = tangent_planes(positions, k)
    adj = knn_graph(positions, min(6, k)).adjacency()
    seen = np.zeros(len(positions), dtype=bool)
    for root in range(len(positions)):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in adj.indices[adj.indptr[u]:adj.indptr[u + 1]]:
                if not seen[v]:
                    seen[v] = True
                    if normals[v] @ normals[u] < 0:
                        normals[v] = -normals[v]
                    queue.append(v)
    return normals


def detect_flat_patches(positions, models: dict, config: PatchConfig = PatchConfig(), normals=None):
    """Cluster nodes by normal, then by position; keep clusters of enough points.

    ``models`` maps RED and BLUE to :class:`NormalModel` objects. ``normals``
    are the per-point clustering features (default: :func:`detection_normals`).
    Raises :class:`NoFlatPatches` when nothing qualifies.
    """
    positions = np.asarray(positions, dtype=float)
    red, blue = models[RED], models[BLUE]
    nodes = np.concatenate([red.nodes, blue.nodes])
    color = np.concatenate([np.full(len(red), RED), np.full(len(blue), BLUE)])
    rows = np.concatenate([np.arange(len(red)), np.arange(len(blue))])
    if normals is None:
        normals = detection_normals(positions, config.detect_k)
    normals = np.asarray(normals, dtype=float)[nodes]

    geo_bw = config.geometry_factor * mean_knn_distance(positions[nodes], min(config.k, len(nodes) - 1))
    n_labels, _ = mean_shift(normals, config.normal_bandwidth)
    patches = []
    for nl in np.unique(n_labels):
        members = np.flatnonzero(n_labels == nl)
        if len(members) < config.min_patch_size:
            continue
        g_labels, _ = mean_shift(positions[nodes[members]], geo_bw)
        for gl in np.unique(g_labels):
            sel = members[g_labels == gl]
            if len(sel) < config.min_patch_size:
                continue
            is_red = color[sel] == RED
            patches.append(
                FlatPatch(
                    red_indices=nodes[sel[is_red]],
                    blue_indices=nodes[sel[~is_red]],
                    red_rows=rows[sel[is_red]],
                    blue_rows=rows[sel[~is_red]],
                    min_patch_size=config.min_patch_size,
                )
            )
    if not patches:
        raise NoFlatPatches("no cluster reached the minimum patch size")
    return patches


# ----------------------------------------------------------- skew structure


@dataclass(frozen=True)
class SkewEigen:
    """Real eigen-structure of a 3x3 skew-symmetric matrix.

    ``v1`` spans the null space; ``v2``, ``v3`` span the plane of the
    eigenvalue pair +-i*lam with ``A v2 = lam v3`` and ``A v3 = -lam v2``.
    """

    lam: float
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray


def axial_vector(A) -> np.ndarray:
    """Vector a with ``A @ x == cross(a, x)`` for skew-symmetric A."""
    A = np.asarray(A, dtype=float)
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


def skew_eigen(A) -> SkewEigen:
    A = np.asarray(A, dtype=float)
    if np.linalg.norm(A) < 1e-14:
        raise ZeroMatrix("matrix is numerically zero")
    a = axial_vector(A)
    lam = float(np.linalg.norm(a))
    v1 = a / lam
    helper = np.eye(3)[int(np.argmin(np.abs(v1)))]
    v2 = np.cross(v1, helper)
    v2 /= np.linalg.norm(v2)
    v3 = np.cross(v1, v2)
    return SkewEigen(lam, v1, v2, v3)


def eta_scale(lams) -> float:
    """Common scale making every scaled eigenvalue at least sqrt(3)."""
    return float(np.sqrt(3.0) / np.min(lams))


def recovery_matrix(A, eig: SkewEigen) -> np.ndarray:
    """Rows v1, v2^T A, v3^T A of the per-point recovery system."""
    return np.vstack([eig.v1, eig.v2 @ A, eig.v3 @ A])


# ---------------------------------------------------------- variance models


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def gaussian_sigma2_role(model: NormalModel, rows, q) -> float:
    """Mean-filter variance estimate from one color's nodes in a patch.

    ``q`` are the noisy positions of those nodes, shape (n, 3).
    """
    A, b = model.A[rows], model.b[rows]
    n = np.einsum("rij,rj->ri", A, q) + b
    s = _unit(n.mean(axis=0))
    trace = float(np.sum(A**2))
    if trace < 1e-15:
        raise DegenerateModels("sum of tr(A^T A) vanishes")
    sigma_n2 = np.sum((s - n) ** 2) / (3 * len(rows))
    return float(3 * len(rows) * sigma_n2 / trace)


def laplacian_sigma2_role(model: NormalModel, rows, q) -> float:
    """Median-filter variance estimate from one color's nodes in a patch."""
    A, b = model.A[rows], model.b[rows]
    s = _unit(np.median(np.einsum("rij,rj->ri", A, q) + b, axis=0))
    total = 0.0
    for Ai, bi, qi in zip(A, b, q):
        eig = skew_eigen(Ai)
        Av = recovery_matrix(Ai, eig)
        rhs = np.array([eig.v1 @ qi, eig.v2 @ (s - bi), eig.v3 @ (s - bi)])
        pi = np.linalg.solve(Av, rhs)
        total += float((qi - pi) @ (qi - pi))
    return total / (3 * len(rows))


def _patch_role_values(patches, models, positions, kind):
    role_fn = gaussian_sigma2_role if kind == "gaussian" else laplacian_sigma2_role
    values = []
    for patch in patches:
        for color, idx, rows in (
            (RED, patch.red_indices, patch.red_rows),
            (BLUE, patch.blue_indices, patch.blue_rows),
        ):
            model = models[color]
            ok = ~model.degenerate[rows]
            if ok.sum() < 2:
                continue
            values.append(role_fn(model, rows[ok], positions[idx[ok]]))
    return values


def estimate_gaussian_sigma2(patch: FlatPatch, models, positions) -> float:
    vals = _patch_role_values([patch], models, positions, "gaussian")
    return float(np.mean(vals))


def estimate_laplacian_sigma2(patch: FlatPatch, models, positions) -> float:
    vals = _patch_role_values([patch], models, positions, "laplacian")
    return float(np.mean(vals))


@dataclass(frozen=True)
class NoiseEstimate:
    sigma2: float
    kind: str
    patches_used: int
    per_patch: list = field(default_factory=list)

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))


def align_model(model: NormalModel, positions, reference) -> NormalModel:
    """Flip each node's map so its normal points along ``reference[node]``."""
    n = model.normals(positions[model.nodes])
    s = np.where(np.einsum("ij,ij->i", n, reference[model.nodes]) < 0, -1.0, 1.0)
    return replace(model, A=model.A * s[:, None, None], b=model.b * s[:, None], sign=model.sign * s)


def oriented_models(positions, k=6, gmrf: GmrfConfig = GmrfConfig(), min_dist=None, reference=None,
                    min_dist_factor=MIN_DIST_FACTOR):
    """Bipartite split plus consistently oriented normal models for both colors.

    With ``reference`` normals each map is aligned to them; otherwise both
    colors are oriented jointly by BFS over a k-NN graph.
    """
    positions = np.asarray(positions, dtype=float)
    graph = knn_graph(positions, k)
    part = approximate(graph, gmrf)
    red = build_models(positions, part.red, part.blue, part.kept, min_dist, min_dist_factor)
    blue = build_models(positions, part.blue, part.red, part.kept, min_dist, min_dist_factor)
    if reference is not None:
        return part, {RED: align_model(red, positions, reference), BLUE: align_model(blue, positions, reference)}
    both = concat_models(red, blue)
    both = orient(both, knn_graph(positions[both.nodes], k), positions[both.nodes])
    r = len(red)
    return part, {RED: both.take(np.arange(r)), BLUE: both.take(np.arange(r, len(both)))}


def estimate_noise(positions, kind="gaussian", config: PatchConfig = PatchConfig(),
                   gmrf: GmrfConfig = GmrfConfig()) -> NoiseEstimate:
    """Estimate the per-coordinate noise variance of a noisy cloud."""
    kind = kind.lower()
    if kind not in ("gaussian", "laplacian"):
        raise ValueError(f"unknown noise kind {kind!r}")
    positions = np.asarray(getattr(positions, "points", positions), dtype=float)
    reference = detection_normals(positions, config.detect_k)
    _, models = oriented_models(positions, config.k, gmrf, reference=reference,
                                min_dist_factor=config.min_dist_factor)
    patches = detect_flat_patches(positions, models, config, reference)
    values = _patch_role_values(patches, models, positions, kind)
    if not values:
        raise NoFlatPatches("flat patches hold too few nodes per color")
    return NoiseEstimate(float(np.mean(values)), kind, len(patches), [float(v) for v in values])


# -------------------------------------------------------------- gamma model


@dataclass(frozen=True)
class GammaModel:
    """gamma_opt = slope * sigma^2 for one noise kind."""

    slope: float
    kind: str = "gaussian"

    def __post_init__(self):
        if not (np.isfinite(self.slope) and self.slope > 0):
            raise ValueError("slope must be positive and finite")

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump({"slope": self.slope, "kind": self.kind}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GammaModel":
        with open(path) as fh:
            data = json.load(fh)
        return cls(float(data["slope"]), data.get("kind", "gaussian"))


def fit_slope(sigma2, gamma) -> float:
    """Least-squares slope of gamma against sigma^2 through the origin."""
    x, y = np.asarray(sigma2, dtype=float), np.asarray(gamma, dtype=float)
    return float(x @ y / (x @ x))


def gamma_opt(sigma2, model: GammaModel) -> float:
    """slope * sigma2 clamped to [1e-6, 0.8]."""
    return float(np.clip(model.slope * sigma2, GAMMA_FLOOR, GAMMA_CEIL))
