"""l2-fidelity denoising: alternating red/blue quadratic solves with reweighting."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from rglr import __version__
from rglr.bipartite import GmrfConfig, approximate
from rglr.errors import TooFewPoints
from rglr.graph import Graph, edge_weights, knn_graph, knn_indices, laplacian
from rglr.noise_est import align_model, detection_normals
from rglr.normals import NormalModel, build_models
from rglr.pointcloud import BLUE, DEFAULT_DIAGONAL, RED, PointCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class L2Config:
    gamma: float = 0.1
    outer_iters: int = 3
    reweight_iters: int = 5
    cg_tol: float = 1e-10
    cg_max_iters: int = 2000
    backend: str = "cg"
    lanczos_m: int = 30
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
        if self.cg_tol <= 0 or self.cg_max_iters < 1:
            raise ValueError("cg_tol and cg_max_iters must be positive")
        if self.backend not in ("cg", "lanczos"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.lanczos_m < 1:
            raise ValueError("lanczos_m must be >= 1")
        if self.outer_iters < 1 or self.reweight_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass(frozen=True, eq=False)
class SystemOperators:
    """Quadratic regularizer ``p^T L_tilde p + 2 L_bar^T p + c0`` in interleaved xyz order."""

    L_tilde: sp.csr_matrix
    L_bar: np.ndarray
    c0: float
    rho_max: float
    geometry_floor: float

    @property
    def n(self) -> int:
        return self.L_tilde.shape[0]

    def cond_bound(self, gamma) -> float:
        """Upper bound on cond(I + gamma * L_tilde) from the Gershgorin radius."""
        if self.rho_max == 0.0:
            return 1.0
        if self.geometry_floor <= 0.0:
            return float("inf")
        return 1.0 + 6.0 * gamma * self.rho_max / self.geometry_floor

    def regularizer(self, p) -> float:
        p = np.ravel(p)
        return float(p @ (self.L_tilde @ p) + 2.0 * self.L_bar @ p + self.c0)

    def gradient(self, p, gamma) -> np.ndarray:
        """Gradient of ``gamma * regularizer``."""
        return 2.0 * gamma * (self.L_tilde @ np.ravel(p) + self.L_bar)


def assemble(L, model: NormalModel) -> SystemOperators:
    """Build L_tilde = sum_c A_c^T L A_c and L_bar = sum_c A_c^T L b_c."""
    L = sp.csr_matrix(L)
    r = len(model)
    L_tilde = sp.csr_matrix((3 * r, 3 * r))
    L_bar = np.zeros(3 * r)
    c0 = 0.0
    for axis in range(3):
        Ac = model.stacked(axis)
        bc = model.stacked_offset(axis)
        LA = L @ Ac
        L_tilde = L_tilde + Ac.T @ LA
        L_bar += LA.T @ bc
        c0 += float(bc @ (L @ bc))
    L_tilde = ((L_tilde + L_tilde.T) * 0.5).tocsr()
    deg = np.asarray(L.diagonal()).ravel()
    rho = float(deg.max()) if len(deg) else 0.0
    return SystemOperators(L_tilde, L_bar, c0, rho, model.geometry_floor())


def quadratic_objective(ops: SystemOperators, q, p, gamma) -> float:
    """||q - p||^2 + gamma * regularizer(p)."""
    d = np.ravel(q) - np.ravel(p)
    return float(d @ d + gamma * ops.regularizer(p))


@dataclass
class CgResult:
    p: np.ndarray
    residuals: list
    converged: bool
    iterations: int


def solve_inner_cg(ops: SystemOperators, q, gamma, cg_tol=1e-10, max_iters=2000, x0=None) -> CgResult:
    """Conjugate gradient on ``(I + gamma L_tilde) p = q - gamma L_bar``.

    Stops when the residual norm drops below ``cg_tol * ||rhs||``. On hitting
    ``max_iters`` the last iterate is returned with ``converged=False``.
    """
    q = np.ravel(q).astype(float)
    rhs = q - gamma * ops.L_bar
    if gamma == 0.0:
        return CgResult(q.copy(), [0.0], True, 0)

    def apply(x):
        return x + gamma * (ops.L_tilde @ x)

    x = rhs.copy() if x0 is None else np.ravel(x0).astype(float).copy()
    r = rhs - apply(x)
    target = cg_tol * max(np.linalg.norm(rhs), 1e-300)
    residuals = [float(np.linalg.norm(r))]
    if residuals[0] <= target:
        return CgResult(x, residuals, True, 0)
    d = r.copy()
    rr = r @ r
    for it in range(1, max_iters + 1):
        Ad = apply(d)
        alpha = rr / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        rr_new = r @ r
        residuals.append(float(np.sqrt(rr_new)))
        if residuals[-1] <= target:
            return CgResult(x, residuals, True, it)
        d = r + (rr_new / rr) * d
        rr = rr_new
    log.warning("CG stopped after %d iterations, residual %.3g", max_iters, residuals[-1])
    return CgResult(x, residuals, False, max_iters)


@dataclass
class LanczosResult:
    p: np.ndarray
    steps: int
    breakdown: bool


def lanczos(matvec, v0, m):
    """``m`` steps of Lanczos with full reorthogonalization.

    Returns ``(V, alpha, beta, breakdown)`` where ``V`` has orthonormal columns
    and ``V^T A V`` is tridiagonal with diagonal ``alpha`` and off-diagonal
    ``beta``. Stops early, flagging a breakdown, when an invariant subspace is
    reached.
    """
    n = len(v0)
    m = min(m, n)
    V = np.zeros((n, m))
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))
    V[:, 0] = v0 / np.linalg.norm(v0)
    scale = 0.0
    for j in range(m):
        w = matvec(V[:, j])
        alpha[j] = V[:, j] @ w
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
        scale = max(scale, abs(alpha[j]))
        if j == m - 1:
            break
        b = np.linalg.norm(w)
        if b <= 1e-12 * max(scale, 1.0):
            return V[:, : j + 1], alpha[: j + 1], beta[:j], True
        beta[j] = b
        V[:, j + 1] = w / b
    return V, alpha, beta, False


def solve_inner_lanczos(ops: SystemOperators, q_tilde, gamma, M=30) -> LanczosResult:
    """Approximate ``(I + gamma L_tilde)^-1 q_tilde`` in an order-M Krylov space.

    ``p = ||q_tilde|| V_M (I + gamma H_M)^-1 e_1`` with ``H_M`` the Lanczos
    tridiagonal. A breakdown means the Krylov space is invariant, so the
    result is exact.
    """
    q_tilde = np.ravel(q_tilde).astype(float)
    norm = np.linalg.norm(q_tilde)
    if norm == 0.0:
        return LanczosResult(np.zeros_like(q_tilde), 0, False)
    V, a, b, broke = lanczos(lambda x: ops.L_tilde @ x, q_tilde, M)
    if len(a) == 1:
        mu, U = a, np.ones((1, 1))
    else:
        mu, U = eigh_tridiagonal(a, b)
    y = U @ (U[0, :] / (1.0 + gamma * mu))
    return LanczosResult(norm * (V @ y), len(a), broke)


# ------------------------------------------------------------------ pipeline


@dataclass
class Report:
    solver: str
    config: dict
    seed: int
    version: str = __version__
    objective: list = field(default_factory=list)
    quadratic_before: list = field(default_factory=list)
    quadratic_after: list = field(default_factory=list)
    cond_bounds: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    final_residuals: list = field(default_factory=list)
    displacement: list = field(default_factory=list)
    outer_iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def _normalize(points, target=DEFAULT_DIAGONAL):
    lo, hi = points.min(axis=0), points.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        return points.copy(), np.zeros(3), 1.0
    center = 0.5 * (lo + hi)
    scale = target / diag
    return (points - center) * scale + center, center, scale


@dataclass
class _ColorState:
    nodes: np.ndarray
    graph: Graph
    sigma_p: float


def run_pipeline(cloud, config, inner, solver_name, report_extra=None, partition=None):
    """Shared alternating scheme for both fidelity terms.

    ``inner(ops, q, p0, report)`` returns the new flattened positions of the
    active color given its assembled operators. A precomputed ``partition``
    of the same cloud may be passed to skip the bipartite step.
    """
    t0 = time.perf_counter()
    points = np.asarray(getattr(cloud, "points", cloud), dtype=float)
    if len(points) < 2 * config.k:
        raise TooFewPoints(f"need at least {2 * config.k} points, got {len(points)}")
    if config.rescale:
        q_all, center, scale = _normalize(points)
        diag = DEFAULT_DIAGONAL
    else:
        # keeps the pipeline rotation-equivariant; gamma is then in input units
        q_all, center, scale = points.copy(), np.zeros(3), 1.0
        diag = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0))) or 1.0
    report = Report(solver=solver_name, config=_config_dict(config), seed=config.seed)
    if report_extra:
        report.extra.update(report_extra)

    part = partition if partition is not None else approximate(knn_graph(q_all, config.k), config.gmrf)
    colors = {}
    for color in (RED, BLUE):
        nodes = part.red if color == RED else part.blue
        k = min(config.weight_k or config.k, len(nodes) - 1)
        _, dist = knn_indices(q_all[nodes], k)
        g = knn_graph(q_all[nodes], k)
        colors[color] = _ColorState(nodes, g, config.sigma_p_scale * (float(dist.mean()) or 1.0))

    p_all = q_all.copy()
    models = {}
    for outer in range(config.outer_iters):
        prev = p_all.copy()
        reference = detection_normals(p_all)
        for color in (RED, BLUE):
            st = colors[color]
            other = part.blue if color == RED else part.red
            model = build_models(p_all, st.nodes, other, part.kept, min_dist_factor=config.min_dist_factor)
            model = align_model(model, p_all, reference)
            q = q_all[st.nodes].ravel()
            p = p_all[st.nodes].ravel()
            for _ in range(config.reweight_iters):
                pos = p.reshape(-1, 3)
                normals = model.normals(pos)
                w = edge_weights(pos, st.graph.rows, st.graph.cols, st.sigma_p, normals)
                L = laplacian(Graph(st.graph.n, st.graph.rows, st.graph.cols, w))
                ops = assemble(L, model)
                report.cond_bounds.append(ops.cond_bound(config.gamma))
                report.quadratic_before.append(inner.objective(ops, q, p, config.gamma))
                p = inner(ops, q, p, report)
                _check_finite(p, "solver iterate")
                report.quadratic_after.append(inner.objective(ops, q, p, config.gamma))
            p_all[st.nodes] = p.reshape(-1, 3)
            models[color] = model
            report.objective.append(_total_objective(q_all, p_all, colors, models, config.gamma, inner.fidelity))
        disp = float(np.mean(np.linalg.norm(p_all - prev, axis=1)))
        report.displacement.append(disp)
        report.outer_iterations = outer + 1
        log.info("outer %d: mean displacement %.3g", outer + 1, disp)
        if disp < 1e-6 * diag:
            report.converged = True
            break

    out = (p_all - center) / scale + center
    _check_finite(out, "output")
    report.wall_time = time.perf_counter() - t0
    if isinstance(cloud, PointCloud):
        return PointCloud(out, labels=cloud.labels), report
    return PointCloud(out), report


def _total_objective(q_all, p_all, colors, models, gamma, fidelity):
    """Fidelity plus the regularizer of every modelled color at the current positions."""
    total = fidelity(q_all.ravel() - p_all.ravel())
    for color, model in models.items():
        st = colors[color]
        pos = p_all[st.nodes]
        n = model.normals(pos)
        w = edge_weights(pos, st.graph.rows, st.graph.cols, st.sigma_p, n)
        dn = n[st.graph.rows] - n[st.graph.cols]
        total += gamma * float(np.sum(w * np.einsum("ij,ij->i", dn, dn)))
    return float(total)


def _config_dict(config):
    return asdict(config)


class _L2Inner:
    def __init__(self, config: L2Config):
        self.config = config

    @staticmethod
    def fidelity(d):
        return float(d @ d)

    @staticmethod
    def objective(ops, q, p, gamma):
        return quadratic_objective(ops, q, p, gamma)

    def __call__(self, ops, q, p0, report):
        c = self.config
        if c.backend == "lanczos":
            res = solve_inner_lanczos(ops, q - c.gamma * ops.L_bar, c.gamma, c.lanczos_m)
            report.inner_iterations.append(res.steps)
            return res.p
        res = solve_inner_cg(ops, q, c.gamma, c.cg_tol, c.cg_max_iters, x0=p0)
        report.inner_iterations.append(res.iterations)
        report.final_residuals.append(res.residuals[-1])
        return res.p


def denoise_l2(cloud, config: L2Config = L2Config(), partition=None):
    """Denoise with squared-error fidelity. Returns ``(PointCloud, Report)``."""
    return run_pipeline(cloud, config, _L2Inner(config), "l2", partition=partition)
