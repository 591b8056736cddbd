"""Procedural forest worlds, lidar rendering, traverse simulation and submapping.

Everything here is a pure function of (inputs, seed): repeated runs are
bit-identical. Clouds returned by render_view are in the sensor frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geometry import (
    LABEL_GROUND,
    LABEL_TRUNK,
    LABEL_VEGETATION,
    LabeledCloud,
    Pose6,
    compose,
    inverse,
    so3_exp,
    voxel_downsample,
    yaw_of,
)

log = logging.getLogger(__name__)

_RAY_CHUNK = 1024


def _wedge_cull(d_chunk, bearings, ang_halfwidth):
    """Mask of targets whose angular extent overlaps the chunk's azimuth wedge.

    Returns None (keep all) when the chunk has near-vertical rays or spans
    more than a half circle, where the wedge test is meaningless.
    """
    horiz = np.hypot(d_chunk[:, 0], d_chunk[:, 1])
    if horiz.min() < 0.2:
        return None
    az = np.arctan2(d_chunk[:, 1], d_chunk[:, 0])
    rel = (az - az[0] + np.pi) % (2.0 * np.pi) - np.pi
    lo, hi = rel.min(), rel.max()
    if hi - lo >= np.pi:
        return None
    mid = az[0] + 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    diff = (bearings - mid + np.pi) % (2.0 * np.pi) - np.pi
    return np.abs(diff) <= half + ang_halfwidth


class PlacementError(RuntimeError):
    """Tree density incompatible with the minimum spacing."""


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class SensorModel:
    max_range: float = 100.0
    vertical_fov: float = 120.0  # degrees
    angular_resolution: float = 2.0  # degrees
    noise_sigma: float = 0.02  # metres, along the ray
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.vertical_fov <= 180:
            raise ValueError("vertical_fov must be in (0, 180]")


@dataclass
class OdometryModel:
    drift_rate: float = 0.01  # translation drift, fraction of distance travelled
    rot_drift_rate: float = 0.0  # deg per metre of yaw drift
    noise_sigma_t: float = 0.005  # metres per increment
    noise_sigma_r: float = 0.001  # rad per increment
    seed: int = 0

    def __post_init__(self):
        if min(self.drift_rate, self.rot_drift_rate, self.noise_sigma_t, self.noise_sigma_r) < 0:
            raise ValueError("odometry rates must be >= 0")


@dataclass
class WorldParams:
    extent: tuple = (200.0, 200.0)  # metres (x, y), origin at (0, 0)
    density_per_ha: float = 200.0
    min_spacing: float = 2.0
    trunk_radius: tuple = (0.15, 0.35)
    trunk_height: tuple = (8.0, 14.0)
    lean_max_deg: float = 3.0
    canopy_semi_xy: tuple = (2.0, 3.5)
    canopy_semi_z: tuple = (1.0, 2.5)
    canopy_hit_prob: float = 0.65
    canopy_jitter: float = 0.25  # metres, shell noise along the ray
    shrubs_per_tree: tuple = (3, 6)  # understory clumps per tree (inclusive range)
    shrub_radius: tuple = (0.30, 0.65)
    shrub_height: tuple = (0.4, 3.6)  # clump centre height above ground
    shrub_offset: tuple = (0.6, 1.8)  # planar distance from the trunk axis
    terrain_amplitude: float = 1.5
    terrain_cell: float = 2.0


@dataclass
class Heightfield:
    cell: float
    heights: np.ndarray  # (ny, nx)

    def interp(self, x, y):
        """Bilinear terrain height, edge-clamped."""
        gx = np.clip(np.asarray(x, dtype=float) / self.cell, 0, self.heights.shape[1] - 1.001)
        gy = np.clip(np.asarray(y, dtype=float) / self.cell, 0, self.heights.shape[0] - 1.001)
        ix = gx.astype(int)
        iy = gy.astype(int)
        fx = gx - ix
        fy = gy - iy
        h = self.heights
        return ((1 - fx) * (1 - fy) * h[iy, ix] + fx * (1 - fy) * h[iy, ix + 1]
                + (1 - fx) * fy * h[iy + 1, ix] + fx * fy * h[iy + 1, ix + 1])


@dataclass
class ForestWorld:
    trunk_bases: np.ndarray  # (n, 3)
    trunk_radii: np.ndarray  # (n,)
    trunk_heights: np.ndarray  # (n,)
    trunk_leans: np.ndarray  # (n, 3) unit axis vectors, near +z
    canopy_centers: np.ndarray  # (m, 3)
    canopy_semi_axes: np.ndarray  # (m, 3)
    shrub_centers: np.ndarray  # (s, 3) understory clumps, world frame
    shrub_radii: np.ndarray  # (s,)
    ground: Heightfield
    params: WorldParams
    seed: int

    @property
    def n_trees(self):
        return len(self.trunk_bases)

    @property
    def extent(self):
        return self.params.extent

    def contains_xy(self, x, y):
        return (0 <= x <= self.params.extent[0]) and (0 <= y <= self.params.extent[1])

    def canopy_top(self):
        if len(self.canopy_centers) == 0:
            return float(self.ground.heights.max())
        return float((self.canopy_centers[:, 2] + self.canopy_semi_axes[:, 2]).max())


def generate_world(params: WorldParams, seed: int = 0) -> ForestWorld:
    """Poisson-disk tree placement over a smooth random heightfield."""
    rng = np.random.default_rng(seed)
    ex, ey = params.extent
    nx = int(np.ceil(ex / params.terrain_cell)) + 1
    ny = int(np.ceil(ey / params.terrain_cell)) + 1
    raw = rng.normal(size=(ny, nx))
    smooth = gaussian_filter(raw, sigma=3.0, mode="nearest")
    span = smooth.max() - smooth.min()
    heights = (smooth - smooth.min()) / max(span, 1e-12) * params.terrain_amplitude
    ground = Heightfield(params.terrain_cell, heights)

    target = int(round(params.density_per_ha * ex * ey / 1e4))
    placed = np.zeros((0, 2))
    attempts = 0
    max_attempts = max(200, 100 * target)
    while len(placed) < target and attempts < max_attempts:
        cand = rng.uniform([0, 0], [ex, ey])
        attempts += 1
        if len(placed) == 0 or np.min(np.linalg.norm(placed - cand, axis=1)) >= params.min_spacing:
            placed = np.vstack([placed, cand])
    if len(placed) < target:
        raise PlacementError(
            f"placed {len(placed)}/{target} trees after {attempts} attempts; "
            f"reduce density or min_spacing")

    n = len(placed)
    radii = rng.uniform(*params.trunk_radius, size=n)
    th = rng.uniform(*params.trunk_height, size=n)
    tilt = np.deg2rad(params.lean_max_deg) * rng.uniform(0, 1, size=n)
    azim = rng.uniform(0, 2 * np.pi, size=n)
    leans = np.stack([np.sin(tilt) * np.cos(azim), np.sin(tilt) * np.sin(azim), np.cos(tilt)], axis=1)
    bases = np.column_stack([placed, ground.interp(placed[:, 0], placed[:, 1])])

    tops = bases + leans * th[:, None]
    semi_xy = rng.uniform(*params.canopy_semi_xy, size=n)
    semi_z = rng.uniform(*params.canopy_semi_z, size=n)
    centers = tops + np.column_stack([np.zeros(n), np.zeros(n), 0.4 * semi_z])
    semi = np.column_stack([semi_xy, semi_xy * rng.uniform(0.8, 1.2, size=n), semi_z])

    # Understory: small solid clumps around each trunk. Their count, height,
    # and stand-off are tree-specific, so the low neighbourhood of every stem
    # carries a distinctive, view-independent signature.
    lo, hi = params.shrubs_per_tree
    counts = rng.integers(int(lo), int(hi) + 1, size=n)
    s_tot = int(counts.sum())
    tree_of = np.repeat(np.arange(n), counts)
    s_rad = rng.uniform(*params.shrub_radius, size=s_tot)
    s_hgt = rng.uniform(*params.shrub_height, size=s_tot)
    s_off = rng.uniform(*params.shrub_offset, size=s_tot)
    s_az = rng.uniform(0, 2 * np.pi, size=s_tot)
    sxy = placed[tree_of] + np.column_stack([s_off * np.cos(s_az), s_off * np.sin(s_az)])
    sxy = np.clip(sxy, [0.0, 0.0], [ex, ey])
    s_ctr = np.column_stack([sxy, ground.interp(sxy[:, 0], sxy[:, 1]) + s_hgt])

    return ForestWorld(bases, radii, th, leans, centers, semi, s_ctr, s_rad,
                       ground, params, seed)


def _ray_dirs(view: str, model: SensorModel):
    res = np.deg2rad(model.angular_resolution)
    azim = np.arange(0.0, 2 * np.pi - 1e-9, res)
    half = np.deg2rad(model.vertical_fov) / 2.0
    if view == "ground":
        elev = np.arange(-half, half + 1e-9, res)
        a, e = np.meshgrid(azim, elev, indexing="ij")
        dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
    elif view == "aerial":
        zen = np.arange(res / 2.0, half + 1e-9, res)
        a, z = np.meshgrid(azim, zen, indexing="ij")
        dirs = np.stack([np.sin(z) * np.cos(a), np.sin(z) * np.sin(a), -np.cos(z)], axis=-1)
        dirs = np.vstack([dirs.reshape(-1, 3), [[0.0, 0.0, -1.0]]])
        return dirs
    else:
        raise ValueError(f"unknown view {view!r}")
    return dirs.reshape(-1, 3)


def _intersect_ground(origin, dirs, ground: Heightfield, max_range):
    nray = len(dirs)
    t_hit = np.full(nray, np.inf)
    ts = np.concatenate([[0.05], np.arange(0.5, max_range + 0.5, 1.5)])
    pts = origin[None, None, :] + ts[None, :, None] * dirs[:, None, :]
    below = pts[:, :, 2] < ground.interp(pts[:, :, 0].ravel(), pts[:, :, 1].ravel()).reshape(nray, -1)
    first = np.argmax(below, axis=1)
    hit = below[np.arange(nray), first] & (first > 0)
    idx = np.where(hit)[0]
    if len(idx) == 0:
        return t_hit
    lo = ts[first[idx] - 1]
    hi = ts[first[idx]]
    d = dirs[idx]
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        p = origin[None, :] + mid[:, None] * d
        under = p[:, 2] < ground.interp(p[:, 0], p[:, 1])
        hi = np.where(under, mid, hi)
        lo = np.where(under, lo, mid)
    t_hit[idx] = 0.5 * (lo + hi)
    return t_hit


def _intersect_trunks(origin, dirs, world: ForestWorld, max_range):
    nray = len(dirs)
    t_hit = np.full(nray, np.inf)
    if world.n_trees == 0:
        return t_hit
    # cull trees beyond range
    d2 = np.linalg.norm(world.trunk_bases[:, :2] - origin[None, :2], axis=1)
    sel = d2 <= max_range + 5.0
    if not sel.any():
        return t_hit
    p0 = world.trunk_bases[sel]
    u = world.trunk_leans[sel]
    r = world.trunk_radii[sel]
    h = world.trunk_heights[sel]
    w = origin[None, :] - p0  # (k, 3)
    wu = np.einsum("ka,ka->k", w, u)
    ww = w - wu[:, None] * u
    cc = np.einsum("ka,ka->k", ww, ww) - r * r
    # per-tree angular footprint seen from the origin, for azimuth culling
    rho = np.maximum(d2[sel], 1e-6)
    reach = r + h * np.hypot(u[:, 0], u[:, 1]) + 0.5
    ang = np.where(rho <= reach, np.pi,
                   np.arcsin(np.clip(reach / rho, 0.0, 1.0)))
    bearings = np.arctan2(p0[:, 1] - origin[1], p0[:, 0] - origin[0])
    for s in range(0, nray, _RAY_CHUNK):
        d = dirs[s:s + _RAY_CHUNK]  # (c, 3)
        m = _wedge_cull(d, bearings, ang)
        if m is None:
            u_c, h_c, wu_c, ww_c, cc_c = u, h, wu, ww, cc
        elif not m.any():
            continue
        else:
            u_c, h_c, wu_c, ww_c, cc_c = u[m], h[m], wu[m], ww[m], cc[m]
        du = d @ u_c.T  # (c, k)
        dd = d[:, None, :] - du[..., None] * u_c[None, :, :]  # (c, k, 3)
        a = np.einsum("cka,cka->ck", dd, dd)
        b = 2.0 * np.einsum("cka,ka->ck", dd, ww_c)
        disc = b * b - 4.0 * a * cc_c[None, :]
        ok = (disc >= 0) & (a > 1e-12)
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-b - sqrt_disc) / np.where(a > 1e-12, 2.0 * a, 1.0), np.inf)
        axial = wu_c[None, :] + t * du
        valid = ok & (t > 0.05) & (t <= max_range) & (axial >= 0.0) & (axial <= h_c[None, :])
        t = np.where(valid, t, np.inf)
        t_hit[s:s + _RAY_CHUNK] = t.min(axis=1)
    return t_hit


def _intersect_shrubs(origin, dirs, world: ForestWorld, max_range):
    nray = len(dirs)
    t_hit = np.full(nray, np.inf)
    if len(world.shrub_centers) == 0:
        return t_hit
    d2 = np.linalg.norm(world.shrub_centers[:, :2] - origin[None, :2], axis=1)
    sel = d2 <= max_range + 5.0
    if not sel.any():
        return t_hit
    c = world.shrub_centers[sel]
    r = world.shrub_radii[sel]
    o = origin[None, :] - c  # (k, 3)
    oo = np.einsum("ka,ka->k", o, o) - r * r
    rho = np.maximum(d2[sel], 1e-6)
    reach = r + 0.5
    ang = np.where(rho <= reach, np.pi,
                   np.arcsin(np.clip(reach / rho, 0.0, 1.0)))
    bearings = np.arctan2(c[:, 1] - origin[1], c[:, 0] - origin[0])
    for s in range(0, nray, _RAY_CHUNK):
        d_rays = dirs[s:s + _RAY_CHUNK]
        m = _wedge_cull(d_rays, bearings, ang)
        if m is None:
            o_c, oo_c = o, oo
        elif not m.any():
            continue
        else:
            o_c, oo_c = o[m], oo[m]
        b = 2.0 * np.einsum("ca,ka->ck", d_rays, o_c)
        disc = b * b - 4.0 * oo_c[None, :]
        ok = disc >= 0
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-b - sqrt_disc) / 2.0, np.inf)
        valid = ok & (t > 0.05) & (t <= max_range)
        t = np.where(valid, t, np.inf)
        t_hit[s:s + _RAY_CHUNK] = t.min(axis=1)
    return t_hit


def _intersect_canopies(origin, dirs, world: ForestWorld, max_range, rng):
    nray = len(dirs)
    t_hit = np.full(nray, np.inf)
    if len(world.canopy_centers) == 0:
        return t_hit
    d2 = np.linalg.norm(world.canopy_centers[:, :2] - origin[None, :2], axis=1)
    sel = d2 <= max_range + 10.0
    if not sel.any():
        return t_hit
    c = world.canopy_centers[sel]
    s_ax = world.canopy_semi_axes[sel]
    hit_prob = world.params.canopy_hit_prob
    jitter = world.params.canopy_jitter
    o = (origin[None, :] - c) / s_ax  # (k, 3)
    oo = np.einsum("ka,ka->k", o, o) - 1.0
    rho = np.maximum(d2[sel], 1e-6)
    reach = np.maximum(s_ax[:, 0], s_ax[:, 1]) + 0.5
    ang = np.where(rho <= reach, np.pi,
                   np.arcsin(np.clip(reach / rho, 0.0, 1.0)))
    bearings = np.arctan2(c[:, 1] - origin[1], c[:, 0] - origin[0])
    for s in range(0, nray, _RAY_CHUNK):
        d_rays = dirs[s:s + _RAY_CHUNK]
        m = _wedge_cull(d_rays, bearings, ang)
        if m is None:
            o_c, oo_c, s_ax_c = o, oo, s_ax
        elif not m.any():
            continue
        else:
            o_c, oo_c, s_ax_c = o[m], oo[m], s_ax[m]
        d = d_rays[:, None, :] / s_ax_c[None, :, :]  # (c, k, 3)
        a = np.einsum("cka,cka->ck", d, d)
        b = 2.0 * np.einsum("cka,ka->ck", d, o_c)
        disc = b * b - 4.0 * a * oo_c[None, :]
        ok = disc >= 0
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        t = np.where(ok, (-b - sqrt_disc) / (2.0 * a), np.inf)
        # porous shell: each (ray, canopy) hit survives with hit_prob
        keep = rng.random(t.shape) < hit_prob
        t = t + np.where(keep, rng.normal(0.0, jitter, size=t.shape), 0.0)
        valid = ok & keep & (t > 0.05) & (t <= max_range)
        t = np.where(valid, t, np.inf)
        t_hit[s:s + _RAY_CHUNK] = t.min(axis=1)
    return t_hit


def render_view(world: ForestWorld, sensor_pose: Pose6, view: str,
                model: SensorModel, seed: int = 0) -> LabeledCloud:
    """Ray-cast lidar scan with first-hit occlusion; points in the sensor frame."""
    rng = np.random.default_rng(seed)
    dirs_local = _ray_dirs(view, model)
    dirs = dirs_local @ sensor_pose.r.T
    origin = sensor_pose.t

    t_ground = _intersect_ground(origin, dirs, world.ground, model.max_range)
    t_trunk = _intersect_trunks(origin, dirs, world, model.max_range)
    t_shrub = _intersect_shrubs(origin, dirs, world, model.max_range)
    t_canopy = _intersect_canopies(origin, dirs, world, model.max_range, rng)

    stack = np.stack([t_ground, t_trunk, t_shrub, t_canopy], axis=1)
    which = np.argmin(stack, axis=1)
    t_best = stack[np.arange(len(dirs)), which]
    hit = np.isfinite(t_best)
    if model.dropout_prob > 0:
        hit &= rng.random(len(dirs)) >= model.dropout_prob
    t_best = t_best[hit]
    if model.noise_sigma > 0:
        t_best = t_best + rng.normal(0.0, model.noise_sigma, size=len(t_best))
    pts = t_best[:, None] * dirs_local[hit]
    label_lut = np.array([LABEL_GROUND, LABEL_TRUNK, LABEL_VEGETATION,
                          LABEL_VEGETATION], dtype=np.uint8)
    labels = label_lut[which[hit]]
    return LabeledCloud(pts, labels)


def _path_samples(waypoints, speed, rate):
    wp = np.asarray(waypoints, dtype=float)[:, :2]
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    n = int(np.floor(total / speed * rate)) + 1
    times = np.arange(n) / rate
    dist = times * speed
    xy = np.column_stack([np.interp(dist, cum, wp[:, 0]), np.interp(dist, cum, wp[:, 1])])
    seg_idx = np.clip(np.searchsorted(cum, dist, side="right") - 1, 0, len(seg) - 1)
    tang = seg[seg_idx] / seg_len[seg_idx, None]
    yaw = np.arctan2(tang[:, 1], tang[:, 0])
    return times, xy, yaw


def simulate_traverse(world: ForestWorld, waypoints, speed, model: SensorModel,
                      odom: OdometryModel, scan_rate: float = 2.0,
                      sensor_height: float = 1.2, seed: int = 0):
    """Returns (true_poses, odom_increments, scans).

    true_poses: list of (t, Pose6); odom_increments: list of (Pose6, 6x6 cov)
    with increment i relating poses i and i+1; scans: sensor-frame clouds.
    """
    wp = np.asarray(waypoints, dtype=float)
    if len(wp) < 2:
        raise ValueError("need at least 2 waypoints")
    for x, y in wp[:, :2]:
        if not world.contains_xy(x, y):
            raise ValueError(f"waypoint ({x:.1f}, {y:.1f}) outside world extent")

    times, xy, yaw = _path_samples(wp, speed, scan_rate)
    z = world.ground.interp(xy[:, 0], xy[:, 1]) + sensor_height
    poses = [Pose6(rot_z(yaw[i]), np.array([xy[i, 0], xy[i, 1], z[i]])) for i in range(len(times))]
    true_poses = list(zip(times.tolist(), poses))

    seq = np.random.SeedSequence(seed)
    scan_seeds = seq.spawn(len(poses) + 1)
    scans = [render_view(world, p, "ground", model, seed=scan_seeds[i].generate_state(1)[0])
             for i, p in enumerate(poses)]

    rng = np.random.default_rng(odom.seed)
    # reported covariance floors keep the information matrix finite at zero noise
    sr = max(odom.noise_sigma_r, 1e-6)
    st = max(odom.noise_sigma_t, 1e-5)
    cov = np.diag([sr * sr] * 3 + [st * st] * 3)
    increments = []
    for k in range(len(poses) - 1):
        rel = compose(inverse(poses[k]), poses[k + 1])
        dist = float(np.linalg.norm(rel.t))
        t_meas = rel.t * (1.0 + odom.drift_rate)
        r_meas = rel.r @ rot_z(np.deg2rad(odom.rot_drift_rate) * dist)
        if odom.noise_sigma_t > 0:
            t_meas = t_meas + rng.normal(0.0, odom.noise_sigma_t, size=3)
        if odom.noise_sigma_r > 0:
            r_meas = r_meas @ so3_exp(rng.normal(0.0, odom.noise_sigma_r, size=3))
        increments.append((Pose6(r_meas, t_meas), cov.copy()))
    return true_poses, increments, scans


@dataclass
class Submap:
    id: int
    view: str  # "ground" | "aerial"
    cloud: LabeledCloud
    origin: Pose6  # submap frame in the map frame (ground truth)
    timestamp: float | None = None
    crop_radius: float = 30.0
    sensor_offset: Pose6 = field(default_factory=Pose6.identity)  # sensor -> submap frame


def remove_ground_points(points: np.ndarray, cell: float = 1.0,
                         percentile: float = 5.0, band: float = 0.3) -> np.ndarray:
    """Keep-mask dropping points within `band` above the per-cell height percentile."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    keys = np.floor(points[:, :2] / cell).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    # group-wise linearly-interpolated percentile, all cells at once
    order = np.lexsort((points[:, 2], inv))
    z_sorted = points[order, 2]
    counts = np.bincount(inv)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = (counts - 1) * (percentile / 100.0)
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    z_lo = z_sorted[starts + lo]
    z_hi = z_sorted[starts + np.minimum(lo + 1, counts - 1)]
    floor_z = z_lo * (1.0 - frac) + z_hi * frac
    return points[:, 2] > floor_z[inv] + band


def _crop_floor_voxel(cloud: LabeledCloud, crop_radius, voxel):
    """Horizontal crop about the local origin, z-shift so min z = 0, voxelize."""
    r = np.linalg.norm(cloud.points[:, :2], axis=1)
    c = cloud.select(r <= crop_radius)
    if len(c) == 0:
        return c, 0.0
    zmin = float(c.points[:, 2].min())
    shifted = LabeledCloud(c.points - [0.0, 0.0, zmin], c.labels, c.covariances)
    return voxel_downsample(shifted, voxel), zmin


def build_ground_submaps(scans, true_poses, window_s: float = 1.0,
                         crop_radius: float = 30.0, rate: float = 2.0,
                         voxel: float = 0.3) -> list[Submap]:
    """Aggregate scans over sliding windows into gravity-aligned, floored submaps."""
    times = np.array([t for t, _ in true_poses])
    t0, t1 = times[0], times[-1]
    n = max(int(round((t1 - t0) * rate)), 1)
    centers = t0 + (np.arange(n) + 0.5) / rate
    out = []
    for i, tc in enumerate(centers):
        in_win = np.where(np.abs(times - tc) <= window_s / 2.0 + 1e-9)[0]
        if len(in_win) == 0:
            log.warning("submap window at t=%.2f has no scans; skipped", tc)
            continue
        ci = in_win[np.argmin(np.abs(times[in_win] - tc))]
        sensor_pose = true_poses[ci][1]
        frame = Pose6(rot_z(yaw_of(sensor_pose.r)), sensor_pose.t)
        inv_frame = inverse(frame)
        parts, labels = [], []
        for j in in_win:
            world_pts = true_poses[j][1].apply(scans[j].points)
            parts.append(inv_frame.apply(world_pts))
            labels.append(scans[j].labels)
        pts = np.vstack(parts)
        lab = np.concatenate(labels) if labels[0] is not None else None
        merged = LabeledCloud(pts, lab)
        cloud, zmin = _crop_floor_voxel(merged, crop_radius, voxel)
        if len(cloud) == 0:
            log.warning("submap window at t=%.2f is empty after crop; skipped", tc)
            continue
        origin = Pose6(frame.r, frame.t + np.array([0.0, 0.0, zmin]))
        offset = compose(inverse(sensor_pose), origin)
        out.append(Submap(i, "ground", cloud, origin, float(tc), crop_radius, offset))
    return out


def build_aerial_submaps(aerial_cloud: LabeledCloud, grid_step: float = 5.0,
                         crop_radius: float = 30.0, voxel: float = 0.3,
                         ground_filter: bool = True, min_points: int = 100) -> list[Submap]:
    """Grid-sampled aerial submaps: crop, ground-filter, z-floor, voxelize."""
    if len(aerial_cloud) == 0:
        raise ValueError("aerial cloud is empty")
    if ground_filter:
        # the filter's 1 m cell grid stays aligned under the per-cell recentring
        # (grid offsets are multiples of grid_step), so one global pass is
        # equivalent to re-filtering inside every overlapping crop
        aerial_cloud = aerial_cloud.select(remove_ground_points(aerial_cloud.points))
        if len(aerial_cloud) == 0:
            raise ValueError("aerial cloud is empty after ground removal")
    pts = aerial_cloud.points
    tree = cKDTree(pts[:, :2])
    xs = np.arange(np.ceil(pts[:, 0].min() / grid_step),
                   np.floor(pts[:, 0].max() / grid_step) + 1) * grid_step
    ys = np.arange(np.ceil(pts[:, 1].min() / grid_step),
                   np.floor(pts[:, 1].max() / grid_step) + 1) * grid_step
    out = []
    sid = 0
    for cx in xs:
        for cy in ys:
            idx = tree.query_ball_point([cx, cy], crop_radius)
            if len(idx) < min_points:
                continue
            local = aerial_cloud.select(np.array(idx, dtype=int))
            lp = local.points - [cx, cy, 0.0]
            local = LabeledCloud(lp, local.labels, local.covariances)
            # floor on the filtered crop: the offset to the ground-view floor
            # is constant across cells, which descriptor matching absorbs
            zmin = float(local.points[:, 2].min())
            shifted = LabeledCloud(local.points - [0.0, 0.0, zmin], local.labels, local.covariances)
            cloud = voxel_downsample(shifted, voxel)
            origin = Pose6(np.eye(3), np.array([cx, cy, zmin]))
            out.append(Submap(sid, "aerial", cloud, origin, None, crop_radius))
            sid += 1
    return out


def render_aerial_map(world: ForestWorld, model: SensorModel, view_step: float = 20.0,
                      clearance: float = 25.0, seed: int = 1000,
                      voxel: float = 0.15) -> LabeledCloud:
    """World-frame aerial survey cloud from a grid of above-canopy viewpoints."""
    ex, ey = world.params.extent
    alt = world.canopy_top() + clearance
    xs = np.arange(view_step / 2.0, ex, view_step)
    ys = np.arange(view_step / 2.0, ey, view_step)
    seq = np.random.SeedSequence(seed)
    seeds = seq.spawn(len(xs) * len(ys))
    parts, labels = [], []
    k = 0
    for x in xs:
        for y in ys:
            pose = Pose6(np.eye(3), np.array([x, y, alt]))
            scan = render_view(world, pose, "aerial", model, seed=seeds[k].generate_state(1)[0])
            k += 1
            if len(scan) == 0:
                continue
            parts.append(pose.apply(scan.points))
            labels.append(scan.labels)
    if not parts:
        return LabeledCloud(np.zeros((0, 3)))
    cloud = LabeledCloud(np.vstack(parts), np.concatenate(labels))
    return voxel_downsample(cloud, voxel)


def world_to_mapping(world: ForestWorld) -> dict:
    """Flat key/value view of the generation parameters (fixture reproducibility)."""
    out = {"seed": world.seed}
    for key, value in asdict(world.params).items():
        out[key] = value
    return out


def world_from_mapping(mapping) -> ForestWorld:
    """Regenerate a world from a parameter mapping (string values accepted)."""
    seed = int(mapping["seed"])
    kwargs = {}
    defaults = WorldParams()
    for key, default in asdict(defaults).items():
        if key not in mapping:
            continue
        raw = mapping[key]
        if isinstance(raw, str):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            if isinstance(default, tuple):
                kwargs[key] = tuple(float(p) for p in parts)
            else:
                kwargs[key] = float(parts[0])
        elif isinstance(default, tuple):
            kwargs[key] = tuple(float(v) for v in raw)
        else:
            kwargs[key] = float(raw)
    return generate_world(WorldParams(**kwargs), seed)
