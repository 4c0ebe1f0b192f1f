"""l1-fidelity denoising by accelerated proximal gradient."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from rglr.bipartite import GmrfConfig
from rglr.errors import StepSizeError
from rglr.graph import power_iteration
from rglr.pointcloud import DEFAULT_DIAGONAL
from rglr.solver_l2 import SystemOperators, run_pipeline

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ApgConfig:
    """``step`` is ``"auto"`` (t = 1/L) or a fixed positive float."""

    gamma: float = 0.1
    step: object = "auto"
    apg_iters: int = 200
    reweight_iters: int = 5
    outer_iters: int = 3
    stop_tol: float = 1e-7 * DEFAULT_DIAGONAL
    k: int = 6
    weight_k: int | None = None
    sigma_p_scale: float = 1.0
    min_dist_factor: float = 0.5
    rescale: bool = True
    seed: int = 0
    gmrf: GmrfConfig = field(default_factory=GmrfConfig)

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and non-negative")
        if self.step != "auto" and not (isinstance(self.step, (int, float)) and self.step > 0):
            raise ValueError("step must be 'auto' or a positive number")
        if self.apg_iters < 1 or self.outer_iters < 1 or self.reweight_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.stop_tol < 0:
            raise ValueError("stop_tol must be non-negative")


def lipschitz(ops: SystemOperators, gamma, tol=1e-6) -> float:
    """2 * gamma * lambda_max(L_tilde), by power iteration."""
    if ops.L_tilde.nnz == 0 or gamma == 0.0:
        return 0.0
    lam = power_iteration(lambda x: ops.L_tilde @ x, ops.n, tol=tol)
    return 2.0 * gamma * lam


def lipschitz_bound(ops: SystemOperators, gamma) -> float:
    """Gershgorin-based upper bound on the Lipschitz constant."""
    if ops.rho_max == 0.0:
        return 0.0
    if ops.geometry_floor <= 0.0:
        return float("inf")
    return 2.0 * gamma * 6.0 * ops.rho_max / ops.geometry_floor


def prox_l1(v, q, t):
    """Minimizer of ``|x - q| + (x - v)^2 / (2t)``, coordinatewise."""
    if t <= 0:
        raise ValueError("t must be positive")
    v, q = np.asarray(v, dtype=float), np.asarray(q, dtype=float)
    d = v - q
    return q + np.sign(d) * np.maximum(np.abs(d) - t, 0.0)


def l1_objective(ops: SystemOperators, q, p, gamma) -> float:
    """||q - p||_1 + gamma * regularizer(p)."""
    return float(np.sum(np.abs(np.ravel(q) - np.ravel(p))) + gamma * ops.regularizer(p))


def step_size(ops: SystemOperators, gamma, step="auto"):
    """Return ``(t, L)``; a fixed step above 1/L raises :class:`StepSizeError`."""
    L = lipschitz(ops, gamma)
    if step == "auto":
        return (1.0 / L if L > 0 else 1.0), L
    t = float(step)
    if L > 0 and t > (1.0 + 1e-9) / L:
        raise StepSizeError(f"step {t:.6g} exceeds 1/L = {1.0 / L:.6g}")
    return t, L


@dataclass
class ApgResult:
    p: np.ndarray
    objectives: list
    iterations: int
    converged: bool
    lipschitz_constant: float
    step_size: float


def apg_solve(ops: SystemOperators, q, gamma, step="auto", iters=200, stop_tol=1e-5, x0=None) -> ApgResult:
    """Accelerated proximal gradient on ``||q - p||_1 + gamma * regularizer(p)``.

    Extrapolation uses the weight ``(m - 2) / (m + 1)``. The returned point
    never has a larger objective than ``x0`` (default ``q``).
    """
    q = np.ravel(q).astype(float)
    x0 = q.copy() if x0 is None else np.ravel(x0).astype(float).copy()
    t, L = step_size(ops, gamma, step)
    objectives = [l1_objective(ops, q, x0, gamma)]
    prev2 = prev = x0
    converged = False
    m = 0
    for m in range(1, iters + 1):
        z = prev + ((m - 2) / (m + 1)) * (prev - prev2)
        cur = prox_l1(z - t * ops.gradient(z, gamma), q, t)
        objectives.append(l1_objective(ops, q, cur, gamma))
        prev2, prev = prev, cur
        if np.linalg.norm(prev - prev2) <= stop_tol:
            converged = True
            break
    p = prev
    if objectives[-1] > objectives[0]:
        log.warning("APG ended above its starting objective; keeping the start point")
        p = x0
    return ApgResult(p, objectives, m, converged, L, t)


class _L1Inner:
    def __init__(self, config: ApgConfig):
        self.config = config

    @staticmethod
    def fidelity(d):
        return float(np.sum(np.abs(d)))

    @staticmethod
    def objective(ops, q, p, gamma):
        return l1_objective(ops, q, p, gamma)

    def __call__(self, ops, q, p0, report):
        c = self.config
        res = apg_solve(ops, q, c.gamma, c.step, c.apg_iters, c.stop_tol, x0=p0)
        report.inner_iterations.append(res.iterations)
        report.extra.setdefault("lipschitz_constant", []).append(res.lipschitz_constant)
        report.extra.setdefault("step_size", []).append(res.step_size)
        bound = lipschitz_bound(ops, c.gamma)
        if res.lipschitz_constant > bound * (1 + 1e-6):
            log.warning("Lipschitz constant %.6g exceeds its bound %.6g", res.lipschitz_constant, bound)
        return res.p


def denoise_l1(cloud, config: ApgConfig = ApgConfig(), partition=None):
    """Denoise with absolute-error fidelity. Returns ``(PointCloud, Report)``."""
    return run_pipeline(cloud, config, _L1Inner(config), "l1", partition=partition)
