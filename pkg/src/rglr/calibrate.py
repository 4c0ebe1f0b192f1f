"""Offline gamma calibration: sweep gamma, pick the C2P minimizer, fit slope * sigma^2."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from rglr.bipartite import approximate
from rglr.graph import knn_graph
from rglr.metrics import c2p
from rglr.noise_est import GammaModel, fit_slope
from rglr.pointcloud import NoiseSpec, PointCloud, add_noise, rescale_to_diagonal
from rglr.solver_l1 import ApgConfig, denoise_l1
from rglr.solver_l2 import L2Config, _normalize, denoise_l2

log = logging.getLogger(__name__)

DEFAULT_SIGMAS = (0.1, 0.2, 0.3, 0.4, 0.5)


def default_gammas(step=0.01):
    return np.round(np.arange(0.0, 1.0 + step / 2, step), 10)


@dataclass
class SweepPoint:
    surface: str
    sigma: float
    gamma_opt: float
    c2p_opt: float
    c2p_curve: list = field(default_factory=list)


@dataclass
class Calibration:
    model: GammaModel
    points: list
    r2: float


def sweep_gamma(gt, noisy, gammas, fidelity="l2", config=None):
    """C2P of the denoised cloud for each gamma; gamma = 0 means no denoising."""
    gt = np.asarray(getattr(gt, "points", gt), dtype=float)
    noisy = np.asarray(getattr(noisy, "points", noisy), dtype=float)
    if config is None:
        config = L2Config() if fidelity == "l2" else ApgConfig()
    denoise = denoise_l2 if fidelity == "l2" else denoise_l1
    q, _, _ = _normalize(noisy)
    part = approximate(knn_graph(q, config.k), config.gmrf)
    curve = []
    for g in gammas:
        if g == 0.0:
            curve.append(c2p(gt, noisy))
            continue
        out, _ = denoise(noisy, replace(config, gamma=float(g)), partition=part)
        curve.append(c2p(gt, out))
    return np.array(curve)


def r_squared(x, y) -> float:
    """Coefficient of determination of the least-squares line y ~ a + b x."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0


def calibrate(surfaces: dict, kind="gaussian", sigmas=DEFAULT_SIGMAS, gammas=None,
              fidelity=None, config=None, seed=0) -> Calibration:
    """Fit ``gamma_opt = slope * sigma^2`` over named ground-truth surfaces.

    Each surface is rescaled to the canonical diagonal before noise is added,
    so sigma is in canonical units.
    """
    if not surfaces:
        raise ValueError("no calibration surfaces")
    gammas = default_gammas() if gammas is None else np.asarray(gammas, dtype=float)
    fidelity = fidelity or ("l2" if kind == "gaussian" else "l1")
    points = []
    for s_idx, (name, pts) in enumerate(sorted(surfaces.items())):
        gt, _ = rescale_to_diagonal(PointCloud(np.asarray(pts, dtype=float)))
        for j, sigma in enumerate(sigmas):
            noisy = add_noise(gt, NoiseSpec(kind, float(sigma), seed + 1000 * s_idx + j))
            curve = sweep_gamma(gt, noisy, gammas, fidelity, config)
            best = int(np.argmin(curve))
            log.info("%s sigma=%g: gamma_opt=%g", name, sigma, gammas[best])
            points.append(SweepPoint(name, float(sigma), float(gammas[best]), float(curve[best]),
                                     [float(c) for c in curve]))
    sig = np.array([p.sigma for p in points])
    gam = np.array([p.gamma_opt for p in points])
    slope = fit_slope(sig**2, gam)
    if not slope > 0:
        raise ValueError("calibration produced a non-positive slope")
    return Calibration(GammaModel(slope, kind), points, r_squared(sig, np.sqrt(gam)))
