"""Point-to-point (C2C) and point-to-plane (C2P) errors between clouds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

PLANE_K = 6


def _as_points(cloud):
    pts = getattr(cloud, "points", cloud)
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def _directed_c2c(src, dst_tree):
    d, _ = dst_tree.query(src)
    return float(np.mean(d**2))


GT_TO_DEN = "GtToDen"
DEN_TO_GT = "DenToGt"


def _pick(fwd, bwd):
    return (fwd, GT_TO_DEN) if fwd <= bwd else (bwd, DEN_TO_GT)


def _c2c(gt, den):
    g, d = _as_points(gt), _as_points(den)
    return _pick(_directed_c2c(g, cKDTree(d)), _directed_c2c(d, cKDTree(g)))


def c2c(gt, den) -> float:
    """Smaller of the two directed mean squared nearest-point distances."""
    return _c2c(gt, den)[0]


def tangent_planes(points, plane_k=PLANE_K):
    """Least-squares plane through each point and its ``plane_k`` neighbors.

    Returns centroids (n, 3), unit normals (n, 3) and a boolean mask of
    degenerate (collinear) neighborhoods.
    """
    points = _as_points(points)
    tree = cKDTree(points)
    _, idx = tree.query(points, k=plane_k + 1)
    nb = points[idx]
    centroid = nb.mean(axis=1)
    centered = nb - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-12 * scale
    return centroid, normals, degenerate


def _directed_c2p(src, dst, dst_tree, planes):
    centroid, normals, degenerate = planes
    d, j = dst_tree.query(src)
    off = np.einsum("ij,ij->i", src - centroid[j], normals[j]) ** 2
    bad = degenerate[j]
    if np.any(bad):
        log.warning("%d degenerate tangent planes; using point distance", int(bad.sum()))
        off = np.where(bad, d**2, off)
    return float(np.mean(off))


def _c2p(gt, den, plane_k):
    g, d = _as_points(gt), _as_points(den)
    if min(len(g), len(d)) < plane_k + 1:
        raise ValueError(f"C2P needs at least {plane_k + 1} points per cloud")
    tg, td = cKDTree(g), cKDTree(d)
    fwd = _directed_c2p(g, d, td, tangent_planes(d, plane_k))
    bwd = _directed_c2p(d, g, tg, tangent_planes(g, plane_k))
    return _pick(fwd, bwd)


def c2p(gt, den, plane_k=PLANE_K) -> float:
    """Smaller of the two directed mean squared point-to-tangent-plane distances.

    Each tangent plane is fitted to a point and its ``plane_k`` nearest
    neighbors in its own cloud.
    """
    return _c2p(gt, den, plane_k)[0]


def rel_error(sigma_true, sigma_est) -> float:
    """Relative error of a noise SD estimate, in percent."""
    if sigma_true <= 0:
        raise ValueError("sigma_true must be positive")
    return abs(sigma_true - sigma_est) / sigma_true * 100.0


@dataclass(frozen=True)
class MetricReport:
    c2c: float
    c2p: float
    direction_used: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"C2C={self.c2c:.6g} C2P={self.c2p:.6g}"


def evaluate(gt, den, plane_k=PLANE_K) -> MetricReport:
    cc, dc = _c2c(gt, den)
    cp, dp = _c2p(gt, den, plane_k)
    return MetricReport(cc, cp, {"c2c": dc, "c2p": dp})
