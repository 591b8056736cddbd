"""Trunk segmentation and the trunk-guided keypoint regression loss.

The loss over keypoints Q against trunk points S averages, for every keypoint,
the distances to its k nearest trunk points:

    L(Q) = (1/k) * sum_t sum_{j in knn_k(q_t, S)} ||q_t - s_j||

Its gradient w.r.t. q_t (neighbour set held fixed) is the mean of the unit
vectors from each neighbour to the keypoint. kNN ties are broken by lowest
point index so loss and gradient are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import LABEL_GROUND, LABEL_TRUNK, LABEL_VEGETATION, LabeledCloud

# heuristic segmenter constants (PCA verticality is the standard trunk cue)
SEG_KNN = 15
SEG_MIN_HEIGHT = 0.25  # metres above local ground
SEG_GROUND_BAND = 0.2
# per-point stem evidence: a linear vertical-axis cue or a vertical-surface cue
STEM_MIN_LINEARITY = 0.45
STEM_MIN_VERTICALITY = 0.85
STEM_SURF_PLANARITY = 0.35
STEM_SURF_NORMAL_VERT = 0.4
STEM_SURF_VERTICALITY = 0.7
# cluster validation: a stem is a compact vertical run of evidence points
STEM_CLUSTER_RADIUS = 0.7  # planar linkage distance
STEM_MIN_POINTS = 5
STEM_MAX_GAP = 1.5  # largest tolerated vertical gap inside a run
STEM_MIN_SPAN = 1.5  # minimum vertical extent of a run
STEM_MAX_RMS = 0.35  # planar rms spread of a run about its axis


@dataclass
class KeypointSet:
    coords: np.ndarray  # (M, 3)
    saliency_uncertainty: np.ndarray  # (M,), lower is more confident

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        self.saliency_uncertainty = np.asarray(self.saliency_uncertainty, dtype=float).reshape(-1)
        if len(self.coords) != len(self.saliency_uncertainty):
            raise ValueError("coords and saliency_uncertainty must have equal length")

    def __len__(self):
        return len(self.coords)


def local_pca_features(points: np.ndarray, k: int = SEG_KNN):
    """Per-point neighbourhood shape features from kNN PCA.

    Returns dict of arrays: eigvals (n,3 ascending), verticality (|principal
    axis . z|), normal_verticality (|normal . z|), linearity, planarity,
    curvature, density (inverse mean neighbour distance).
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    k = min(k, n)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=k)
    nb = pts[idx]  # (n, k, 3)
    mu = nb.mean(axis=1, keepdims=True)
    dc = nb - mu
    cov = np.einsum("nka,nkb->nab", dc, dc) / k
    vals, vecs = np.linalg.eigh(cov)  # ascending
    vals = np.clip(vals, 0.0, None)
    principal = vecs[:, :, 2]
    normal = vecs[:, :, 0]
    lam = vals[:, ::-1]  # descending l1 >= l2 >= l3
    l1 = np.maximum(lam[:, 0], 1e-12)
    lsum = np.maximum(lam.sum(axis=1), 1e-12)
    mean_dist = dist[:, 1:].mean(axis=1) if k > 1 else np.full(n, np.inf)
    return {
        "eigvals": vals,
        "verticality": np.abs(principal[:, 2]),
        "normal_verticality": np.abs(normal[:, 2]),
        "linearity": (lam[:, 0] - lam[:, 1]) / l1,
        "planarity": (lam[:, 1] - lam[:, 2]) / l1,
        "curvature": lam[:, 2] / lsum,
        "density": 1.0 / np.maximum(mean_dist, 1e-6),
    }


def local_ground_height(points: np.ndarray, cell: float = 2.0,
                        percentile: float = 5.0) -> np.ndarray:
    """Per-point local ground height from a coarse per-cell percentile."""
    pts = np.asarray(points, dtype=float)
    keys = np.floor(pts[:, :2] / cell).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    # group-wise linearly-interpolated percentile, all cells at once
    order = np.lexsort((pts[:, 2], inv))
    z_sorted = pts[order, 2]
    counts = np.bincount(inv)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = (counts - 1) * (percentile / 100.0)
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    z_lo = z_sorted[starts + lo]
    z_hi = z_sorted[starts + np.minimum(lo + 1, counts - 1)]
    floor = z_lo * (1.0 - frac) + z_hi * frac
    return floor[inv]


def greedy_ball_clusters(X: np.ndarray, radius: float) -> list:
    """Greedy ball clusters: each unclaimed point (in index order) seeds a
    cluster of its whole radius-ball. Returns index arrays; deterministic for
    a fixed point order, and keeps nearby structures separate where single
    linkage would chain them.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n == 0:
        return []
    tree = cKDTree(X)
    seen = np.zeros(n, dtype=bool)
    out = []
    for i in range(n):
        if seen[i]:
            continue
        idx = np.array(tree.query_ball_point(X[i], radius), dtype=int)
        seen[idx] = True
        out.append(np.sort(idx))
    return out


def _best_z_run(z: np.ndarray):
    """Indices of the largest contiguous vertical run (gaps <= STEM_MAX_GAP)."""
    order = np.argsort(z, kind="stable")
    zs = z[order]
    cuts = np.flatnonzero(np.diff(zs) > STEM_MAX_GAP) + 1
    best = None
    for seg in np.split(np.arange(len(zs)), cuts):
        if best is None or len(seg) > len(best):
            best = seg
    if len(best) < STEM_MIN_POINTS or zs[best[-1]] - zs[best[0]] < STEM_MIN_SPAN:
        return None
    return order[best]


def segment_trunks_heuristic(cloud: LabeledCloud, feats=None) -> np.ndarray:
    """Geometric trunk/vegetation/ground mask (uint8 labels, same length as cloud).

    Per-point stem evidence (vertical linear axis, or a vertical surface patch)
    is clustered in the plane; a cluster is accepted as a trunk when its best
    vertical run is tall, populated, and planar-compact. Only accepted runs are
    labelled trunk, which keeps precision high under canopy clutter.
    """
    if len(cloud) < 50:
        raise ValueError("segmentation needs at least 50 points")
    pts = cloud.points
    if feats is None:
        feats = local_pca_features(pts, SEG_KNN)
    ground_h = local_ground_height(pts)
    height = pts[:, 2] - ground_h
    cand = (((feats["linearity"] >= STEM_MIN_LINEARITY)
             & (feats["verticality"] >= STEM_MIN_VERTICALITY))
            | ((feats["planarity"] >= STEM_SURF_PLANARITY)
               & (feats["normal_verticality"] <= STEM_SURF_NORMAL_VERT)
               & (feats["verticality"] >= STEM_SURF_VERTICALITY)))
    cand &= height > SEG_MIN_HEIGHT
    mask = np.full(len(pts), LABEL_VEGETATION, dtype=np.uint8)
    mask[height <= SEG_GROUND_BAND] = LABEL_GROUND
    cand_idx = np.flatnonzero(cand)
    for cl in greedy_ball_clusters(pts[cand_idx, :2], STEM_CLUSTER_RADIUS):
        if len(cl) < STEM_MIN_POINTS:
            continue
        sub = cand_idx[cl]
        run = _best_z_run(pts[sub, 2])
        if run is None:
            continue
        members = sub[run]
        xy = pts[members, :2]
        if np.sqrt(((xy - xy.mean(axis=0)) ** 2).sum(axis=1).mean()) > STEM_MAX_RMS:
            continue
        mask[members] = LABEL_TRUNK
    return mask


def stem_candidates(points: np.ndarray, mask) -> tuple:
    """Planar centres and sizes of trunk-labelled point clusters.

    Returns (centres (S, 2), sizes (S,)); each cluster of at least
    STEM_MIN_POINTS trunk points yields one candidate stem axis.
    """
    pts = np.asarray(points, dtype=float)
    idx = np.flatnonzero(np.asarray(mask) == LABEL_TRUNK)
    centers, sizes = [], []
    for cl in greedy_ball_clusters(pts[idx, :2], STEM_CLUSTER_RADIUS):
        if len(cl) < STEM_MIN_POINTS:
            continue
        centers.append(pts[idx[cl], :2].mean(axis=0))
        sizes.append(float(len(cl)))
    return np.array(centers, dtype=float).reshape(-1, 2), np.array(sizes, dtype=float)


def _knn_deterministic(queries: np.ndarray, pts: np.ndarray, k: int):
    """k nearest point indices per query, ties broken by lowest point index."""
    n = len(pts)
    if n > 64 and n > k:
        # KD-tree fast path; a distance tie at the k-boundary (where the tree's
        # arbitrary tie order could change the selected set) falls back to the
        # exact brute-force path for that row
        dist, idx = cKDTree(pts).query(queries, k=k + 1)
        order = np.lexsort((idx[:, :k], dist[:, :k]), axis=-1)
        out = np.take_along_axis(idx[:, :k], order, axis=1)
        risky = dist[:, k - 1] >= dist[:, k]
        if np.any(risky):
            out[risky] = _knn_brute(queries[risky], pts, k)
        return out
    return _knn_brute(queries, pts, k)


def _knn_brute(queries: np.ndarray, pts: np.ndarray, k: int):
    d2 = ((queries[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    n = d2.shape[1]
    m = min(n, 2 * k)
    if m == n:
        order = np.argsort(d2, axis=1, kind="stable")
        return order[:, :k]
    # argpartition narrows to 2k candidates, a stable sort orders them; any
    # row with a distance tie across the partition boundary falls back to the
    # full sort so the lowest-index tie-break stays exact
    cand = np.argpartition(d2, m - 1, axis=1)[:, :m]
    cand.sort(axis=1)  # candidate index order makes the stable sort canonical
    cd = np.take_along_axis(d2, cand, axis=1)
    order = np.argsort(cd, axis=1, kind="stable")
    sorted_d = np.take_along_axis(cd, order, axis=1)
    out = np.take_along_axis(cand, order[:, :k], axis=1)
    risky = sorted_d[:, k - 1] >= sorted_d[:, m - 1]
    if np.any(risky):
        full = np.argsort(d2[risky], axis=1, kind="stable")
        out[risky] = full[:, :k]
    return out


def seg_loss(Q, S, k_seg: int = 5) -> float:
    """Mean distance from each keypoint to its k_seg nearest trunk points."""
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    S = np.asarray(S, dtype=float).reshape(-1, 3)
    if k_seg < 1 or len(S) < k_seg:
        raise ValueError(f"need at least k_seg={k_seg} trunk points, got {len(S)}")
    nn = _knn_deterministic(Q, S, k_seg)
    d = np.linalg.norm(Q[:, None, :] - S[nn], axis=2)
    return float(d.sum() / k_seg)


def seg_loss_grad(Q, S, k_seg: int = 5) -> np.ndarray:
    """Analytic (M, 3) gradient of seg_loss; zero subgradient at coincident points."""
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    S = np.asarray(S, dtype=float).reshape(-1, 3)
    if k_seg < 1 or len(S) < k_seg:
        raise ValueError(f"need at least k_seg={k_seg} trunk points, got {len(S)}")
    nn = _knn_deterministic(Q, S, k_seg)
    diff = Q[:, None, :] - S[nn]  # (M, k, 3)
    norm = np.linalg.norm(diff, axis=2)
    safe = norm > 1e-12
    unit = np.where(safe[..., None], diff / np.where(safe, norm, 1.0)[..., None], 0.0)
    return unit.sum(axis=1) / k_seg


def refine_keypoints(kps: KeypointSet, S, k_seg: int = 5, steps: int = 50,
                     step_size: float = 0.05) -> KeypointSet:
    """Gradient descent on the trunk loss with per-step neighbour re-association.

    The accepted loss never increases: the step is halved (up to 8 times) when
    a move would raise it. Total motion is bounded by steps * step_size.
    """
    Q = np.array(kps.coords, dtype=float)
    if len(Q) == 0:
        return KeypointSet(Q, np.array(kps.saliency_uncertainty))
    loss = seg_loss(Q, S, k_seg)
    for _ in range(steps):
        g = seg_loss_grad(Q, S, k_seg)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        if np.all(gn < 1e-12):
            break
        step = -step_size * g / np.maximum(gn, 1e-12)
        scale = 1.0
        for _ in range(8):
            cand = Q + scale * step
            cand_loss = seg_loss(cand, S, k_seg)
            if cand_loss < loss:
                break
            scale *= 0.5
        else:
            break
        Q = cand
        loss = cand_loss
    return KeypointSet(Q, np.array(kps.saliency_uncertainty))
