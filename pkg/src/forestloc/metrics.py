"""Evaluation metrics: retrieval PR/F1max, registration success, keypoint
repeatability, absolute 3DoF/6DoF trajectory errors, relative translation
error over path-length bins, and runtime aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    Pose6,
    compose,
    inverse,
    rotation_angle,
    umeyama,
    yaw_of,
)

TP_DISTANCE = 5.0  # metres, top-1 within this -> true positive
FP_DISTANCE = 20.0  # metres, top-1 beyond this -> false positive (between: ignored)
SUCCESS_ROT_DEG = 5.0
SUCCESS_TRANS = 2.0
ASSOC_MAX_GAP = 0.1  # seconds


@dataclass
class RetrievalJudgement:
    query_id: int
    top1_id: int
    distance: float  # descriptor-space distance of the top-1 candidate
    planar_distance: float  # ground-truth metres between query and top-1
    has_positive: bool = True  # a true positive exists in the database

    @property
    def label(self) -> str:
        if self.planar_distance < TP_DISTANCE:
            return "TP"
        if self.planar_distance > FP_DISTANCE:
            return "FP"
        return "ignored"


@dataclass
class ErrorSummary:
    rmse: float
    median: float
    mean: float
    std: float
    max: float

    @staticmethod
    def of(values) -> "ErrorSummary":
        v = np.asarray(values, dtype=float)
        return ErrorSummary(
            rmse=float(np.sqrt(np.mean(v ** 2))),
            median=float(np.median(v)),
            mean=float(np.mean(v)),
            std=float(np.std(v)),
            max=float(np.max(v)),
        )

    def as_dict(self):
        return {"rmse": self.rmse, "median": self.median, "mean": self.mean,
                "std": self.std, "max": self.max}


def pr_curve_f1max(judgements):
    """Precision/recall over the descriptor-distance threshold sweep.

    A judgement is accepted at threshold tau when its descriptor distance is
    <= tau. Accepted TP-labelled judgements count as true positives, accepted
    FP-labelled as false positives; "ignored" rows never count either way.
    Recall is against the number of queries with an existing positive.
    Returns (thresholds, precision, recall, f1max).
    """
    n_pos = sum(1 for j in judgements if j.has_positive)
    if n_pos == 0:
        raise ValueError("recall undefined: no query has a ground-truth positive")
    rows = [(j.distance, j.label) for j in judgements if j.label != "ignored"]
    thresholds = np.unique([j.distance for j in judgements])
    precision = np.zeros(len(thresholds))
    recall = np.zeros(len(thresholds))
    dists = np.array([d for d, _ in rows])
    is_tp = np.array([lab == "TP" for _, lab in rows])
    for i, tau in enumerate(thresholds):
        acc = dists <= tau
        tp = int((acc & is_tp).sum())
        fp = int((acc & ~is_tp).sum())
        precision[i] = tp / max(tp + fp, 1)
        recall[i] = tp / n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return thresholds, precision, recall, float(f1.max(initial=0.0))


def registration_success(estimated: Pose6, truth: Pose6,
                         rot_deg: float = SUCCESS_ROT_DEG,
                         trans_m: float = SUCCESS_TRANS) -> bool:
    """Success iff geodesic rotation error < 5 deg and translation error < 2 m."""
    dt = float(np.linalg.norm(estimated.t - truth.t))
    dr = np.rad2deg(rotation_angle(estimated.r.T @ truth.r))
    return bool(dr < rot_deg and dt < trans_m)


def keypoint_repeatability(Q, Q_other, R, t, eps: float = 0.5) -> float:
    """Fraction of transformed keypoints with a counterpart within eps.

    Q is mapped through the ground-truth (R, t); the nearest neighbour is
    searched in Q_other only (query -> candidate direction).
    """
    Q = np.asarray(Q, dtype=float).reshape(-1, 3)
    Q_other = np.asarray(Q_other, dtype=float).reshape(-1, 3)
    if len(Q) == 0 or len(Q_other) == 0:
        raise ValueError("keypoint sets must be non-empty")
    moved = Q @ np.asarray(R).T + np.asarray(t)
    d, _ = cKDTree(Q_other).query(moved, k=1)
    return float((d < eps).mean())


def associate_by_time(est_traj, ref_traj, max_gap: float = ASSOC_MAX_GAP):
    """Nearest-timestamp pose pairs within max_gap: lists of (est, ref)."""
    ref_times = np.array([t for t, _ in ref_traj])
    pairs = []
    for t, pose in est_traj:
        i = int(np.argmin(np.abs(ref_times - t)))
        if abs(ref_times[i] - t) <= max_gap:
            pairs.append((pose, ref_traj[i][1]))
    return pairs


def absolute_errors(est_traj, ref_traj, mode: str = "6DoF"):
    """Umeyama-aligned absolute errors; returns (translation, rotation) summaries.

    3DoF: planar (x, y) translation error and yaw-only heading error.
    6DoF: full translation norm and geodesic rotation angle. Rotation summary
    is reported in degrees.
    """
    pairs = associate_by_time(est_traj, ref_traj)
    if len(pairs) < 3:
        raise ValueError(f"only {len(pairs)} associated pose pairs (need >= 3)")
    est = [p for p, _ in pairs]
    ref = [p for _, p in pairs]
    T = umeyama(np.array([p.t for p in est]), np.array([p.t for p in ref]))
    aligned = [compose(T, p) for p in est]
    if mode == "3DoF":
        terr = [float(np.linalg.norm((a.t - r.t)[:2])) for a, r in zip(aligned, ref)]
        rerr = []
        for a, r in zip(aligned, ref):
            dy = yaw_of(a.r) - yaw_of(r.r)
            rerr.append(abs(np.rad2deg(np.arctan2(np.sin(dy), np.cos(dy)))))
    elif mode == "6DoF":
        terr = [float(np.linalg.norm(a.t - r.t)) for a, r in zip(aligned, ref)]
        rerr = [np.rad2deg(rotation_angle(a.r.T @ r.r)) for a, r in zip(aligned, ref)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ErrorSummary.of(terr), ErrorSummary.of(rerr)


def relative_translation_error(est_traj, ref_traj, distance_bins):
    """Per-bin distributions of | |d est| - |d ref| | over path-length segments.

    For each bin length d and each start pose, the end pose is the first one at
    reference path length >= d. Returns {bin: {median, q1, q3, lo, hi, n}};
    bins longer than the path are skipped (absent from the result).
    """
    pairs = associate_by_time(est_traj, ref_traj)
    if len(pairs) < 2:
        raise ValueError("need at least 2 associated pose pairs")
    est_t = np.array([p.t for p, _ in pairs])
    ref_t = np.array([r.t for _, r in pairs])
    seg = np.linalg.norm(np.diff(ref_t, axis=0), axis=1)
    path = np.concatenate([[0.0], np.cumsum(seg)])
    out = {}
    for d in distance_bins:
        if d > path[-1]:
            continue
        errs = []
        ends = np.searchsorted(path, path + d)
        for i, j in enumerate(ends):
            if j >= len(path):
                break
            de = np.linalg.norm(est_t[j] - est_t[i])
            dr = np.linalg.norm(ref_t[j] - ref_t[i])
            errs.append(abs(de - dr))
        if not errs:
            continue
        e = np.asarray(errs)
        q1, med, q3 = np.percentile(e, [25, 50, 75])
        iqr = q3 - q1
        out[float(d)] = {
            "median": float(med), "q1": float(q1), "q3": float(q3),
            "lo": float(max(e.min(), q1 - 1.5 * iqr)),
            "hi": float(min(e.max(), q3 + 1.5 * iqr)),
            "n": len(e),
        }
    return out


RUNTIME_STAGES = ("odometry", "registration", "fg_optimisation", "relocalisation")


def runtime_report(diagnostics):
    """Mean and std of per-stage wall-clock times plus the per-submap total.

    diagnostics: iterable of mappings with the four stage keys (seconds).
    """
    rows = list(diagnostics)
    if not rows:
        raise ValueError("no diagnostics rows")
    report = {}
    totals = np.zeros(len(rows))
    for stage in RUNTIME_STAGES:
        v = np.array([float(r[stage]) for r in rows])
        totals += v
        report[stage] = {"mean": float(v.mean()), "std": float(v.std())}
    report["total"] = {"mean": float(totals.mean()), "std": float(totals.std())}
    return report
