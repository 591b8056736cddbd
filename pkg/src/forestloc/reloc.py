"""Deterministic geometric re-localisation front end.

Keypoint detection with saliency, rotation-invariant local descriptors,
polar-spectrum global descriptors, a retrieval database, and RANSAC coarse
registration with fitness verification. All randomness is seeded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geometry import LabeledCloud, Pose6, umeyama
from .semantics import (KeypointSet, greedy_ball_clusters, local_pca_features,
                        refine_keypoints, stem_candidates)
from .geometry import LABEL_TRUNK

DIM_LOCAL = 32
# global descriptor: polar grid shape, angular frequencies kept, blur, and
# the vegetation/keypoint channel split
GD_NR = 10
GD_NA = 36
GD_NF = 10
GD_RMAX = 30.0
GD_SIGMA = (0.8, 1.0)
GD_VEG_ZMIN = 4.0
GD_KP_WEIGHT = 0.6
DIM_GLOBAL = 2 * GD_NR * GD_NF
NMS_RADIUS = 1.0
DESC_RADIUS = 2.0
MIN_DESC_NEIGHBORS = 10
SALIENCY_EPS = 1e-3
KEYPOINT_HEIGHT = 2.0  # canonical stem keypoint height above the cloud floor
VERT_SPLIT = 0.6  # verticality split between the two descriptor channels
CLUMP_LINKAGE = 0.6  # metres; groups low-verticality points into clumps
CLUMP_MIN_POINTS = 2
# coarse floor estimate for stripping ground returns before description
DESC_GROUND_CELL = 6.0
DESC_GROUND_PCT = 2.0
DESC_GROUND_BAND = 0.2


def _nms_keypoints(kps: KeypointSet, nms_radius: float, m_max: int) -> KeypointSet:
    """Greedy suppression in ascending-uncertainty order, capped at m_max."""
    if len(kps) == 0:
        return kps
    order = np.argsort(kps.saliency_uncertainty, kind="stable")
    pts = kps.coords
    tree = cKDTree(pts)
    suppressed = np.zeros(len(pts), dtype=bool)
    chosen = []
    for i in order:
        if suppressed[i]:
            continue
        chosen.append(i)
        if len(chosen) >= m_max:
            break
        suppressed[tree.query_ball_point(pts[i], nms_radius)] = True
    chosen = np.array(chosen, dtype=int)
    return KeypointSet(pts[chosen], kps.saliency_uncertainty[chosen])


def detect_keypoints(cloud: LabeledCloud, mask=None, m_max: int = 128,
                     nms_radius: float = NMS_RADIUS, feats=None) -> KeypointSet:
    """Non-maximum-suppressed saliency peaks; optionally trunk-guided.

    Unguided saliency is local curvature times verticality of the principal
    axis. When a semantic mask is given, candidates are placed at a canonical
    height on the trunk-cluster axes (cluster size acting as saliency) and
    pulled onto nearby trunk points by gradient refinement of the trunk loss
    (the guided variant). NMS at nms_radius holds for the returned set in
    both variants.
    """
    if len(cloud) == 0:
        return KeypointSet(np.zeros((0, 3)), np.zeros(0))
    pts = cloud.points
    if mask is not None:
        trunk_pts = pts[np.asarray(mask) == LABEL_TRUNK]
        centers, sizes = stem_candidates(pts, mask)
        if len(centers) > 0 and len(trunk_pts) >= 5:
            # submap clouds are floor-referenced (z = 0 at the lowest return),
            # so a fixed height puts every view's keypoint at the same spot
            coords = np.column_stack(
                [centers, np.full(len(centers), KEYPOINT_HEIGHT)])
            kps = KeypointSet(coords, 1.0 / (sizes + SALIENCY_EPS))
            # tightly bounded refinement: canonical stem keypoints must land
            # at the same spot in every view, so motion is capped at 2 cm
            kps = refine_keypoints(kps, trunk_pts, k_seg=5, steps=2, step_size=0.01)
            return _nms_keypoints(kps, nms_radius, m_max)
    if feats is None:
        feats = local_pca_features(pts)
    saliency = feats["curvature"] * feats["verticality"]
    kps = _nms_keypoints(KeypointSet(pts, 1.0 / (saliency + SALIENCY_EPS)),
                         nms_radius, m_max)
    if mask is not None:
        trunk_pts = pts[np.asarray(mask) == LABEL_TRUNK]
        if len(trunk_pts) >= 5:
            kps = refine_keypoints(kps, trunk_pts, k_seg=5, steps=50, step_size=0.05)
            kps = _nms_keypoints(kps, nms_radius, m_max)
    return kps


def _clump_centroids(pts: np.ndarray) -> np.ndarray:
    """Centroids of point clumps (single linkage at CLUMP_LINKAGE, >= 2 points)."""
    if len(pts) < CLUMP_MIN_POINTS:
        return np.zeros((0, 3))
    cents = [pts[cl].mean(axis=0) for cl in greedy_ball_clusters(pts, CLUMP_LINKAGE)
             if len(cl) >= CLUMP_MIN_POINTS]
    return np.array(cents, dtype=float).reshape(-1, 3)


def _soft_bins(rel: np.ndarray):
    """Bilinear soft-binning into a 4 radial x 4 height grid: (indices, weights)."""
    rh = np.linalg.norm(rel[:, :2], axis=1)
    rb = np.clip(rh / 0.5 - 0.5, 0.0, 3.0)
    zb = np.clip((rel[:, 2] + 2.0) / 1.0 - 0.5, 0.0, 3.0)
    r0 = np.floor(rb).astype(int)
    z0 = np.floor(zb).astype(int)
    wr = rb - r0
    wz = zb - z0
    r1 = np.minimum(r0 + 1, 3)
    z1 = np.minimum(z0 + 1, 3)
    idx = np.concatenate([r0 * 4 + z0, r0 * 4 + z1, r1 * 4 + z0, r1 * 4 + z1])
    w = np.concatenate([(1 - wr) * (1 - wz), (1 - wr) * wz, wr * (1 - wz), wr * wz])
    return idx, w


def compute_local_descriptors(cloud: LabeledCloud, kps: KeypointSet,
                              radius: float = DESC_RADIUS, feats=None):
    """Rotation-invariant neighbourhood histograms, L2-normalised.

    Two verticality channels over a 4 radial x 4 height soft-binned grid
    (32 dims): low-verticality points are grouped into clumps whose centroids
    vote (robust to sampling density), high-verticality points contribute
    square-root counts. Returns (descriptors (M, 32), valid (M,) bool);
    keypoints with fewer than 10 neighbours (or no structural content) get a
    zero descriptor and valid=False.
    """
    pts = cloud.points
    m = len(kps)
    descs = np.zeros((m, DIM_LOCAL))
    valid = np.zeros(m, dtype=bool)
    if m == 0 or len(pts) == 0:
        return descs, valid
    if feats is None:
        feats = local_pca_features(pts)
    vert = np.asarray(feats["verticality"])
    high = vert >= VERT_SPLIT
    hi_pts = pts[high]
    cents = _clump_centroids(pts[~high])
    tree_all = cKDTree(pts)
    tree_hi = cKDTree(hi_pts) if len(hi_pts) else None
    tree_c = cKDTree(cents[:, :2]) if len(cents) else None
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for i, q in enumerate(kps.coords):
        if len(tree_all.query_ball_point(q, radius)) < MIN_DESC_NEIGHBORS:
            continue
        h = np.zeros(DIM_LOCAL)
        if tree_c is not None:
            # clump votes live in a cylinder: planar radius and height window
            ci = np.array(tree_c.query_ball_point(q[:2], radius), dtype=int)
            if len(ci):
                rel = cents[ci] - q
                keep = np.abs(rel[:, 2]) <= radius
                if keep.any():
                    idx, w = _soft_bins(rel[keep])
                    np.add.at(h, idx, w)
        if tree_hi is not None:
            hj = tree_hi.query_ball_point(q, radius)
            if hj:
                idx, w = _soft_bins(hi_pts[hj] - q)
                cnt = np.zeros(16)
                np.add.at(cnt, idx, w)
                h[16:] = np.sqrt(cnt)
        for s in (slice(0, 16), slice(16, 32)):
            n = np.linalg.norm(h[s])
            if n > 0:
                h[s] *= inv_sqrt2 / n
        n = np.linalg.norm(h)
        if n < 1e-12:
            continue
        descs[i] = h / n
        valid[i] = True
    return descs, valid


def gem_pool(features: np.ndarray, p: float = 3.0) -> np.ndarray:
    """Generalised-mean pooling over rows: ((1/K) sum f^p)^(1/p), f clamped >= 0."""
    f = np.asarray(features, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if len(f) == 0:
        raise ValueError("gem_pool needs at least one feature vector")
    if p < 1:
        raise ValueError("p must be >= 1")
    f = np.clip(f, 0.0, None)
    return (np.mean(f ** p, axis=0)) ** (1.0 / p)


def _polar_occupancy(points_xy: np.ndarray) -> np.ndarray:
    """Smoothed (GD_NR, GD_NA) polar occupancy map about the submap origin."""
    H = np.zeros((GD_NR, GD_NA))
    r = np.linalg.norm(points_xy, axis=1)
    keep = r <= GD_RMAX
    r = r[keep]
    if len(r):
        th = np.arctan2(points_xy[keep, 1], points_xy[keep, 0])
        ri = np.minimum((r / GD_RMAX * GD_NR).astype(int), GD_NR - 1)
        ai = ((th + np.pi) / (2 * np.pi) * GD_NA).astype(int) % GD_NA
        np.add.at(H, (ri, ai), 1.0)
        # the blur absorbs the up-to-half-grid-cell offset between a query
        # origin and the nearest database cell centre
        H = gaussian_filter(H, sigma=GD_SIGMA, mode=("nearest", "wrap"))
    return H


def _ring_spectrum(H: np.ndarray) -> np.ndarray:
    """Per-ring angular Fourier magnitudes, ring-normalised then L2-normalised.

    Dropping the phase makes the signature invariant to yaw; keeping the
    magnitudes per ring retains the angular arrangement that distinguishes
    nearby places.
    """
    F = np.abs(np.fft.rfft(H, axis=1))[:, :GD_NF]
    n = np.linalg.norm(F, axis=1, keepdims=True)
    F = F / np.maximum(n, 1e-12)
    v = F.ravel()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def compute_global_descriptor(cloud: LabeledCloud, dim: int = DIM_GLOBAL,
                              seed: int = 7, keypoints: KeypointSet | None = None
                              ) -> np.ndarray:
    """Rotation-invariant polar-spectrum signature of the submap layout.

    Two channels share a smoothed polar occupancy grid: canopy returns (points
    above GD_VEG_ZMIN, where the crown footprints are visible from both views)
    and, when provided, the stem keypoints. Per-ring angular Fourier magnitudes
    make the signature yaw-invariant while preserving the arrangement signal
    that separates neighbouring places. Deterministic per (cloud, seed) and
    invariant to point order. When `dim` is smaller than the native signature,
    a fixed seeded random projection compresses it.
    """
    if len(cloud) < 50:
        raise ValueError("global descriptor needs at least 50 points")
    pts = cloud.points
    veg = _ring_spectrum(np.sqrt(_polar_occupancy(pts[pts[:, 2] > GD_VEG_ZMIN, :2])))
    if keypoints is not None and len(keypoints) > 0:
        kp = _ring_spectrum(_polar_occupancy(keypoints.coords[:, :2]))
    else:
        kp = np.zeros(GD_NR * GD_NF)
    desc = np.concatenate([veg, GD_KP_WEIGHT * kp])
    if dim != len(desc):
        rng = np.random.default_rng(seed)
        P = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(desc), dim))
        desc = desc @ P
    return desc


@dataclass
class DBEntry:
    submap_id: int
    centroid: np.ndarray  # map-frame submap origin translation
    global_desc: np.ndarray
    keypoints: KeypointSet
    local_descs: np.ndarray  # (M, DIM_LOCAL), rows aligned with keypoints


@dataclass
class DescriptorDB:
    entries: list
    dim_global: int = DIM_GLOBAL
    dim_local: int = DIM_LOCAL

    def __post_init__(self):
        ids = [e.submap_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate submap ids in descriptor DB")

    def __len__(self):
        return len(self.entries)

    def by_id(self, submap_id):
        for e in self.entries:
            if e.submap_id == submap_id:
                return e
        raise KeyError(submap_id)

    def global_matrix(self):
        return np.array([e.global_desc for e in self.entries])

    def centroids(self):
        return np.array([e.centroid for e in self.entries])


def describe_submap(submap, guided: bool = True, mask=None, m_max: int = 128,
                    desc_seed: int = 7) -> DBEntry:
    """Full front-end pass over one submap: keypoints + local/global descriptors."""
    from .semantics import local_ground_height, segment_trunks_heuristic

    pts = submap.cloud.points
    feats = local_pca_features(pts)
    if guided and mask is None:
        mask = segment_trunks_heuristic(submap.cloud, feats=feats)
    kps = detect_keypoints(submap.cloud, mask if guided else None, m_max, feats=feats)
    if guided and submap.view == "ground":
        # describe above-ground structure only (aerial submaps arrive
        # ground-filtered already); a coarse wide-cell floor estimate keeps
        # understory bottoms that narrow cells under occlusion would eat
        floor = local_ground_height(pts, cell=DESC_GROUND_CELL,
                                    percentile=DESC_GROUND_PCT)
        sel = np.flatnonzero(pts[:, 2] - floor > DESC_GROUND_BAND)
        dcloud = submap.cloud.select(sel)
        dfeats = {"verticality": feats["verticality"][sel]}
    else:
        dcloud, dfeats = submap.cloud, feats
    descs, valid = compute_local_descriptors(dcloud, kps, feats=dfeats)
    kps = KeypointSet(kps.coords[valid], kps.saliency_uncertainty[valid])
    gdesc = compute_global_descriptor(submap.cloud, seed=desc_seed, keypoints=kps)
    return DBEntry(submap.id, np.array(submap.origin.t), gdesc, kps, descs[valid])


def retrieve_topk(query: np.ndarray, db: DescriptorDB, k: int):
    """Top-k entries by ascending Euclidean descriptor distance, ties by id."""
    if len(db) == 0:
        raise ValueError("descriptor DB is empty")
    dists = np.linalg.norm(db.global_matrix() - np.asarray(query)[None, :], axis=1)
    ids = np.array([e.submap_id for e in db.entries])
    order = np.lexsort((ids, dists))
    return [(int(ids[i]), float(dists[i])) for i in order[:k]]


@dataclass
class CoarseRegistration:
    pose: Pose6
    inliers: np.ndarray  # (n, 2) index pairs into the tested correspondences
    inlier_ratio: float
    ok: bool
    n_matches: int = 0


@dataclass
class RansacParams:
    max_keypoints: int = 128  # lowest saliency uncertainty kept per side
    iterations: int = 2000
    inlier_threshold: float = 1.0  # metres
    min_inliers: int = 5
    early_exit_ratio: float = 0.8
    seed: int = 0


def _mutual_matches(q_descs, c_descs):
    d = np.linalg.norm(q_descs[:, None, :] - c_descs[None, :, :], axis=2)
    fwd = d.argmin(axis=1)
    bwd = d.argmin(axis=0)
    qi = np.arange(len(q_descs))
    keep = bwd[fwd[qi]] == qi
    return np.column_stack([qi[keep], fwd[qi[keep]]])


def ransac_register(q_kps: KeypointSet, q_descs, c_kps: KeypointSet, c_descs,
                    params: RansacParams | None = None) -> CoarseRegistration:
    """Coarse rigid registration from mutual-NN descriptor matches via RANSAC.

    Hypotheses are rigid fits on 3-match samples; the best model is refit on
    its inliers. Deterministic for a fixed seed. Returns a failure result (ok
    False) rather than raising when matching or consensus is too weak.
    """
    params = params or RansacParams()
    fail = CoarseRegistration(Pose6.identity(), np.zeros((0, 2), dtype=int), 0.0, False)
    qs = np.argsort(q_kps.saliency_uncertainty, kind="stable")[:params.max_keypoints]
    cs = np.argsort(c_kps.saliency_uncertainty, kind="stable")[:params.max_keypoints]
    if len(qs) < 3 or len(cs) < 3:
        return fail
    qp = q_kps.coords[qs]
    cp = c_kps.coords[cs]
    matches = _mutual_matches(np.asarray(q_descs)[qs], np.asarray(c_descs)[cs])
    fail.n_matches = len(matches)
    if len(matches) < 3:
        return fail
    src = qp[matches[:, 0]]
    dst = cp[matches[:, 1]]
    rng = np.random.default_rng(params.seed)
    best_inl = None
    best_count = 0
    for _ in range(params.iterations):
        pick = rng.choice(len(matches), size=3, replace=False)
        try:
            T = umeyama(src[pick], dst[pick])
        except ValueError:
            continue
        err = np.linalg.norm(T.apply(src) - dst, axis=1)
        inl = err < params.inlier_threshold
        count = int(inl.sum())
        if count > best_count:
            best_count = count
            best_inl = inl
            if count / len(matches) > params.early_exit_ratio:
                break
    if best_inl is None or best_count < max(params.min_inliers, 3):
        return fail
    T = umeyama(src[best_inl], dst[best_inl])
    # one re-evaluation pass after refit
    err = np.linalg.norm(T.apply(src) - dst, axis=1)
    inl = err < params.inlier_threshold
    if inl.sum() >= 3:
        T = umeyama(src[inl], dst[inl])
    else:
        inl = best_inl
    ratio = float(inl.sum()) / len(matches)
    return CoarseRegistration(T, matches[inl], ratio, True, len(matches))


def verify_fitness(ground: LabeledCloud, aerial: LabeledCloud, pose: Pose6,
                   tau: float = 0.5) -> float:
    """Fraction of transformed ground points with an aerial neighbour within tau."""
    if len(ground) == 0 or len(aerial) == 0:
        raise ValueError("clouds must be non-empty")
    tree = cKDTree(aerial.points)
    d, _ = tree.query(pose.apply(ground.points), k=1, distance_upper_bound=tau)
    return float(np.isfinite(d).mean())
