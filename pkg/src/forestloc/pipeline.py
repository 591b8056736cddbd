"""Online localisation loop: re-localisation state machine, candidate
selection, coarse + fine registration, factor emission, and smoothing.

One ground submap is processed per step. In RELOCALIZING mode the global
descriptor is matched against the aerial database and candidates are tried in
rank order; the first registration passing the fitness check seeds the graph
with a prior and switches to TRACKING. In TRACKING the graph is extended with
the odometry factor, the aerial submap nearest the predicted pose is
registered, and a gated map factor is added on success. After `f_max`
consecutive failures the pipeline reverts to RELOCALIZING.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .fgraph import Graph, MapFactor
from .forest import Submap, remove_ground_points
from .geometry import Pose6, compose, cov_transport_compose, inverse
from .gicp import GaussianCloud, GicpConfig, estimate_point_covariances, gicp_align
from .reloc import (
    DescriptorDB,
    RansacParams,
    describe_submap,
    ransac_register,
    retrieve_topk,
)

log = logging.getLogger(__name__)

RELOCALIZING = "RELOCALIZING"
TRACKING = "TRACKING"


class DatasetError(ValueError):
    """Inconsistent inputs (e.g. missing odometry for a submap)."""


@dataclass
class Dataset:
    """Everything the online loop consumes.

    odometry[i] is the (Pose6, 6x6 covariance) sensor-frame increment between
    ground submaps i and i+1.
    """

    aerial_submaps: list
    db: DescriptorDB
    ground_submaps: list
    odometry: list

    def validate(self):
        if len(self.odometry) != len(self.ground_submaps) - 1:
            raise DatasetError(
                f"{len(self.ground_submaps)} submaps need "
                f"{len(self.ground_submaps) - 1} odometry increments, "
                f"got {len(self.odometry)}")
        if len(self.aerial_submaps) != len(self.db):
            raise DatasetError("descriptor DB does not cover the aerial submaps")


@dataclass
class LocalizerState:
    mode: str = RELOCALIZING
    node: int | None = None  # graph node of the latest submap
    consecutive_failures: int = 0
    estimate: Pose6 | None = None
    covariance: np.ndarray | None = None


@dataclass
class StepDiagnostics:
    submap_id: int
    timestamp: float
    mode: str
    retrieval_rank: int = -1
    inlier_ratio: float = 0.0
    fitness: float = 0.0
    gate: str = ""
    n_correspondences: int = 0
    map_factor: bool = False
    timings: dict = field(default_factory=dict)


class _Caches:
    """Lazy per-submap Gaussian clouds and aerial lookup structures."""

    def __init__(self, dataset: Dataset, cfg: RunConfig):
        self.dataset = dataset
        self.cfg = cfg
        self._gaussians = {}
        self.aerial_by_id = {s.id: s for s in dataset.aerial_submaps}
        self.aerial_centroids = np.array([s.origin.t for s in dataset.aerial_submaps])
        self.aerial_ids = np.array([s.id for s in dataset.aerial_submaps])

    def gaussian(self, submap: Submap) -> GaussianCloud:
        key = (submap.view, submap.id)
        if key not in self._gaussians:
            cloud = submap.cloud
            if submap.view == "ground":
                # aerial submaps are terrain-filtered at build time; filtering the
                # ground view the same way removes the one-sided terrain returns
                # that would otherwise bias the registration upward in z
                keep = remove_ground_points(cloud.points)
                if keep.sum() >= 20:
                    cloud = cloud.select(keep)
            self._gaussians[key] = estimate_point_covariances(
                cloud, min(self.cfg.cov_knn, len(cloud)))
        return self._gaussians[key]

    def nearest_aerial(self, position, radius):
        d = np.linalg.norm(self.aerial_centroids[:, :2] - np.asarray(position)[:2], axis=1)
        order = np.argsort(d, kind="stable")
        return [int(self.aerial_ids[i]) for i in order if d[i] <= radius]


def _map_pose_from_registration(candidate: Submap, fine_pose: Pose6,
                                ground: Submap, covariance):
    """Sensor pose in the map frame (and its covariance) from a submap registration."""
    b = inverse(ground.sensor_offset)
    pose = compose(candidate.origin, compose(fine_pose, b))
    cov = None
    if covariance is not None:
        cov = cov_transport_compose(candidate.origin, fine_pose, b, covariance)
    return pose, cov


def _register(caches: _Caches, ground: Submap, candidate: Submap, init: Pose6,
              cfg: RunConfig):
    gcfg = GicpConfig(max_iterations=cfg.gicp_max_iterations,
                      max_corr_dist=cfg.gicp_max_corr_dist,
                      min_corr_dist=cfg.gicp_min_corr_dist,
                      fitness_tau=cfg.fitness_tau)
    return gicp_align(caches.gaussian(ground), caches.gaussian(candidate), init, gcfg)


def step(state: LocalizerState, ground_submap: Submap, odom_increment, db: DescriptorDB,
         graph: Graph | None, caches: _Caches, cfg: RunConfig):
    """Process one submap; returns (state, graph, diagnostics)."""
    diag = StepDiagnostics(ground_submap.id, ground_submap.timestamp or 0.0, state.mode)
    timings = {k: 0.0 for k in ("odometry", "registration", "fg_optimisation", "relocalisation")}
    diag.timings = timings

    if state.mode == TRACKING:
        t0 = time.perf_counter()
        if odom_increment is None:
            raise DatasetError(f"missing odometry increment for submap {ground_submap.id}")
        inc_pose, inc_cov = odom_increment
        node = graph.add_odom_factor(state.node, inc_pose, inc_cov,
                                     timestamp=ground_submap.timestamp or 0.0)
        predicted = graph.estimate(node)
        timings["odometry"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        accepted = False
        if cfg.map_factors_enabled:
            cand_ids = caches.nearest_aerial(
                compose(predicted, ground_submap.sensor_offset).t, cfg.tracking_radius)
            if cand_ids:
                cand = caches.aerial_by_id[cand_ids[0]]
                init = compose(inverse(cand.origin),
                               compose(predicted, ground_submap.sensor_offset))
                result = _register(caches, ground_submap, cand, init, cfg)
                diag.fitness = result.fitness
                diag.n_correspondences = result.n_correspondences
                if result.converged and result.fitness >= cfg.fitness_threshold \
                        and result.covariance is not None and not result.degenerate:
                    meas, cov = _map_pose_from_registration(
                        cand, result.pose, ground_submap, result.covariance)
                    factor = MapFactor(node, meas, np.linalg.inv(cov), result.fitness)
                    if graph.gate_map_factor(factor, cfg.gate_quantile):
                        graph.add_map_factor(factor)
                        diag.gate = "accept"
                        accepted = True
                    else:
                        diag.gate = "reject"
        timings["registration"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        graph.optimize()
        graph.slide_window(cfg.lag)
        timings["fg_optimisation"] = time.perf_counter() - t0

        state.node = node
        state.estimate = graph.estimate(node)
        state.covariance = graph.marginal(node)
        if accepted:
            state.consecutive_failures = 0
        elif cfg.map_factors_enabled:
            state.consecutive_failures += 1
            if state.consecutive_failures >= cfg.f_max:
                log.info("submap %d: %d consecutive failures, re-localising",
                         ground_submap.id, state.consecutive_failures)
                state.mode = RELOCALIZING
                state.consecutive_failures = 0
                graph = None
                state.node = None
        diag.map_factor = accepted
        return state, graph, diag

    # RELOCALIZING
    t0 = time.perf_counter()
    entry = describe_submap(ground_submap, guided=cfg.guided_keypoints,
                            m_max=cfg.max_keypoints, desc_seed=cfg.descriptor_seed)
    ranked = retrieve_topk(entry.global_desc, db, cfg.retrieval_k)
    rp = RansacParams(max_keypoints=cfg.max_keypoints,
                      iterations=cfg.ransac_iterations,
                      inlier_threshold=cfg.ransac_inlier_threshold,
                      seed=cfg.ransac_seed)
    for rank, (cand_id, _dist) in enumerate(ranked):
        cand_entry = db.by_id(cand_id)
        coarse = ransac_register(entry.keypoints, entry.local_descs,
                                 cand_entry.keypoints, cand_entry.local_descs, rp)
        if not coarse.ok:
            continue
        cand = caches.aerial_by_id[cand_id]
        result = _register(caches, ground_submap, cand, coarse.pose, cfg)
        if not (result.converged and result.fitness >= cfg.fitness_threshold
                and result.covariance is not None and not result.degenerate):
            continue
        meas, cov = _map_pose_from_registration(cand, result.pose, ground_submap,
                                                result.covariance)
        graph = Graph(lag=cfg.lag)
        node = ground_submap.id
        graph.add_prior(node, meas, np.linalg.inv(cov),
                        timestamp=ground_submap.timestamp or 0.0)
        graph.optimize()
        state.mode = TRACKING
        state.node = node
        state.estimate = meas
        state.covariance = cov
        state.consecutive_failures = 0
        diag.retrieval_rank = rank
        diag.inlier_ratio = coarse.inlier_ratio
        diag.fitness = result.fitness
        diag.n_correspondences = result.n_correspondences
        diag.map_factor = True
        break
    timings["relocalisation"] = time.perf_counter() - t0
    return state, graph, diag


def run(dataset: Dataset, cfg: RunConfig):
    """Full online pass; returns (trajectory [(t, Pose6)], diagnostics list)."""
    dataset.validate()
    caches = _Caches(dataset, cfg)
    state = LocalizerState()
    graph = None
    diagnostics = []
    finalized = {}  # node id -> (timestamp, pose); refreshed while in window

    last_tracked = None
    for i, submap in enumerate(dataset.ground_submaps):
        inc = None
        if state.mode == TRACKING:
            if last_tracked is None or i == 0:
                raise DatasetError("tracking without a previous submap")
            inc = _compose_increment(dataset.odometry, last_tracked, i)
        state, graph, diag = step(state, submap, inc, dataset.db, graph, caches, cfg)
        diagnostics.append(diag)
        if state.mode == TRACKING:
            last_tracked = i
            for nid in graph.window_ids():
                node = graph.nodes[nid]
                finalized[nid] = (node.timestamp, node.pose)
    trajectory = [finalized[nid] for nid in sorted(finalized)]
    return trajectory, diagnostics


def _compose_increment(odometry, i_from, i_to):
    """Relative motion between submaps i_from and i_to from per-step increments.

    Covariances are accumulated additively; cross-step transport is neglected,
    which is conservative at the drift levels simulated here.
    """
    pose = Pose6.identity()
    cov = np.zeros((6, 6))
    for k in range(i_from, i_to):
        inc, c = odometry[k]
        pose = compose(pose, inc)
        cov = cov + np.asarray(c)
    return pose, cov


def diagnostics_rows(diagnostics):
    """Deterministic CSV rows (no wall-clock fields)."""
    header = ["submap_id", "timestamp", "mode", "retrieval_rank", "inlier_ratio",
              "fitness", "gate", "n_correspondences", "map_factor"]
    rows = [header]
    for d in diagnostics:
        rows.append([d.submap_id, f"{d.timestamp:.6f}", d.mode, d.retrieval_rank,
                     f"{d.inlier_ratio:.6f}", f"{d.fitness:.6f}", d.gate,
                     d.n_correspondences, int(d.map_factor)])
    return rows


def timing_rows(diagnostics):
    """Wall-clock CSV rows, columns named after the runtime table stages."""
    header = ["submap_id", "odometry", "registration", "fg_optimisation", "relocalisation"]
    rows = [header]
    for d in diagnostics:
        rows.append([d.submap_id] + [f"{d.timings[k]:.6f}" for k in header[1:]])
    return rows
