"""Generalised-ICP fine registration with Gauss-Newton on SE(3).

The objective sums Mahalanobis distances between matched local Gaussian
distributions: residual d_i = a_i - (R g_i + t) weighted by
Omega_i = (Sigma_Ai + R Sigma_Gi R^T)^-1. Correspondences are searched from
the (moving) ground cloud into the (fixed) aerial cloud. The Gauss-Newton
Hessian at the optimum, H = sum J_i^T Omega_i J_i with J_i = [R [g_i]x, -I],
gives the transformation covariance Lambda = H^-1 used by map factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import LabeledCloud, Pose6, retract, skew

COV_EPS = 1e-3
COV_KNN = 20
MAX_CORR_DIST = 2.0
MIN_CORR_DIST = 0.6
FITNESS_TAU = 0.5
COND_LIMIT = 1e8


class DegenerateRegistrationError(RuntimeError):
    """Hessian is singular; no covariance (and no map factor) can be produced."""


@dataclass
class GaussianCloud:
    points: np.ndarray  # (n, 3)
    covariances: np.ndarray  # (n, 3, 3), plane-regularised SPD

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
        if len(self.points) != len(self.covariances):
            raise ValueError("points/covariances length mismatch")

    def __len__(self):
        return len(self.points)


@dataclass
class RegistrationResult:
    pose: Pose6
    covariance: np.ndarray | None
    fitness: float
    iterations: int
    converged: bool
    final_cost: float
    n_correspondences: int = 0
    degenerate: bool = False


@dataclass
class GicpConfig:
    max_iterations: int = 64
    max_corr_dist: float = MAX_CORR_DIST
    min_corr_dist: float = MIN_CORR_DIST
    step_tol: float = 1e-6
    rel_cost_tol: float = 1e-9
    fitness_tau: float = FITNESS_TAU
    min_correspondences: int = 6
    max_step_halvings: int = 8


def estimate_point_covariances(cloud: LabeledCloud, k: int = COV_KNN) -> GaussianCloud:
    """Plane-regularised kNN PCA covariances: eigenvalues replaced by (eps, 1, 1)."""
    pts = cloud.points
    n = len(pts)
    if n < k or k < 4:
        raise ValueError(f"need at least k={k} >= 4 points, got {n}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    nb = pts[idx]
    mu = nb.mean(axis=1, keepdims=True)
    dc = nb - mu
    cov = np.einsum("nka,nkb->nab", dc, dc) / k
    vals, vecs = np.linalg.eigh(cov)
    reg = np.array([COV_EPS, 1.0, 1.0])
    out = np.einsum("nab,b,ncb->nac", vecs, reg, vecs)
    # degenerate neighbourhoods (all points identical) fall back to isotropic eps
    bad = vals[:, 2] < 1e-12
    if bad.any():
        out[bad] = COV_EPS * np.eye(3)
    out = 0.5 * (out + np.transpose(out, (0, 2, 1)))
    return GaussianCloud(pts, out)


def _associate(tree, aerial: GaussianCloud, ground: GaussianCloud, pose: Pose6, max_dist):
    moved = pose.apply(ground.points)
    dist, idx = tree.query(moved, k=1)
    keep = dist <= max_dist
    gi = np.where(keep)[0]
    ai = idx[keep]
    return gi, ai, moved[keep]


def _residual_terms(ground, aerial, pose, gi, ai, moved):
    d = aerial.points[ai] - moved
    R = pose.r
    C = aerial.covariances[ai] + np.einsum("ab,nbc,dc->nad", R, ground.covariances[gi], R)
    g = ground.points[gi]
    J = np.empty((len(gi), 3, 6))
    # d(delta) = a - (R Exp(dr) g + t + dt):  dd/ddr = R [g]x, dd/ddt = -I
    for i in range(len(gi)):
        J[i, :, :3] = R @ skew(g[i])
    J[:, :, 3:] = -np.eye(3)[None, :, :]
    return d, J, C


def gicp_cost(ground: GaussianCloud, aerial: GaussianCloud, pose: Pose6,
              gi, ai) -> float:
    """Objective value for a fixed correspondence set (used by tests/diagnostics)."""
    moved = pose.apply(ground.points[gi])
    d = aerial.points[ai] - moved
    R = pose.r
    C = aerial.covariances[ai] + np.einsum("ab,nbc,dc->nad", R, ground.covariances[gi], R)
    return kernels.weighted_cost(d, C)


def gicp_align(ground: GaussianCloud, aerial: GaussianCloud, init: Pose6,
               cfg: GicpConfig | None = None) -> RegistrationResult:
    """Iterative GICP: associate, build normal equations, Gauss-Newton with halving."""
    cfg = cfg or GicpConfig()
    if len(ground) < 20 or len(aerial) < 20:
        raise ValueError("both clouds need at least 20 points")
    tree = cKDTree(aerial.points)
    pose = init
    prev_cost = np.inf
    non_decreasing = 0
    iterations = 0
    converged = False
    cost = np.inf
    ncorr = 0
    # correspondence distance anneals from max to min; a wide first stage keeps
    # the convergence basin large, the tight last stage suppresses the pull of
    # structure present in only one of the views
    dist = max(cfg.max_corr_dist, cfg.min_corr_dist)

    def shrink():
        nonlocal dist, prev_cost, non_decreasing
        if dist <= cfg.min_corr_dist * (1.0 + 1e-9):
            return False
        dist = max(0.5 * dist, cfg.min_corr_dist)
        prev_cost = np.inf
        non_decreasing = 0
        return True

    for iterations in range(1, cfg.max_iterations + 1):
        gi, ai, moved = _associate(tree, aerial, ground, pose, dist)
        ncorr = len(gi)
        if ncorr < cfg.min_correspondences:
            return RegistrationResult(pose, None, 0.0, iterations, False, np.inf, ncorr)
        d, J, C = _residual_terms(ground, aerial, pose, gi, ai, moved)
        H, b, cost = kernels.gicp_reduce(d, J, C)
        mean_cost = cost / ncorr
        if mean_cost >= prev_cost - abs(prev_cost) * cfg.rel_cost_tol:
            non_decreasing += 1
            if non_decreasing >= 3:
                if shrink():
                    continue
                converged = True
                break
        else:
            non_decreasing = 0
        prev_cost = mean_cost
        try:
            delta = np.linalg.solve(H, -b)
        except np.linalg.LinAlgError:
            return RegistrationResult(pose, None, 0.0, iterations, False, cost, ncorr)
        # halve the step while it would increase the fixed-association cost
        scale = 1.0
        base = kernels.weighted_cost(d, C)
        accepted = False
        for _ in range(cfg.max_step_halvings):
            cand = retract(pose, scale * delta)
            cand_cost = gicp_cost(ground, aerial, cand, gi, ai)
            if cand_cost <= base:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if shrink():
                continue
            converged = True
            break
        pose = retract(pose, scale * delta)
        if np.linalg.norm(scale * delta) < cfg.step_tol:
            if shrink():
                continue
            converged = True
            break
    fitness = _fitness(tree, ground, pose, cfg.fitness_tau)
    cov = None
    degenerate = False
    if converged:
        try:
            cov = compute_hessian_covariance(ground, aerial, pose, cfg)[1]
        except DegenerateRegistrationError:
            degenerate = True
    return RegistrationResult(pose, cov, fitness, iterations, converged, cost, ncorr, degenerate)


def _fitness(tree, ground: GaussianCloud, pose: Pose6, tau):
    d, _ = tree.query(pose.apply(ground.points), k=1, distance_upper_bound=tau)
    return float(np.isfinite(d).mean())


def compute_hessian_covariance(ground: GaussianCloud, aerial: GaussianCloud,
                               pose: Pose6, cfg: GicpConfig | None = None):
    """(H, Lambda, degenerate_flag) at the registration optimum.

    H is the Gauss-Newton Hessian over the surviving correspondences; Lambda is
    its inverse. A condition number above 1e8 sets the degenerate flag; a
    singular H raises DegenerateRegistrationError.
    """
    cfg = cfg or GicpConfig()
    tree = cKDTree(aerial.points)
    gi, ai, moved = _associate(tree, aerial, ground, pose, cfg.min_corr_dist)
    if len(gi) < cfg.min_correspondences:
        raise DegenerateRegistrationError(
            f"only {len(gi)} correspondences at the optimum")
    d, J, C = _residual_terms(ground, aerial, pose, gi, ai, moved)
    H, _, _ = kernels.gicp_reduce(d, J, C)
    H = 0.5 * (H + H.T)
    vals = np.linalg.eigvalsh(H)
    if vals[0] <= 0 or not np.isfinite(vals).all():
        raise DegenerateRegistrationError("singular Gauss-Newton Hessian")
    degenerate = vals[-1] / vals[0] > COND_LIMIT
    lam = np.linalg.inv(H)
    lam = 0.5 * (lam + lam.T)
    return H, lam, degenerate
