"""SE(3) arithmetic, tangent parameterization, point-cloud containers and spatial tools.

Conventions used throughout the package:
  - Poses act on points as p' = R @ p + t.
  - Tangent vectors are 6-vectors [rotation (rad), translation (m)] on the
    product manifold SO(3) x R^3: exp(v) = (ExpSO3(v[:3]), v[3:]).
  - Retraction for optimisation: pose (+) delta = (R @ ExpSO3(dr), t + dt).
  - Quaternions are stored (x, y, z, w), canonicalized so w >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# semantic label codes used across the package
LABEL_GROUND = 0
LABEL_TRUNK = 1
LABEL_VEGETATION = 2

LABEL_NAMES = {LABEL_GROUND: "ground", LABEL_TRUNK: "trunk", LABEL_VEGETATION: "vegetation"}


class DegenerateRotationError(ValueError):
    """Raised when log is requested at (or numerically at) rotation angle pi."""


class DegenerateGeometryError(ValueError):
    """Raised for rank-deficient alignment / estimation problems."""


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(w):
    """Rotation matrix from an axis-angle 3-vector (Rodrigues, Taylor near 0)."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * (W @ W)
    s = np.sin(theta) / theta
    c = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + s * W + c * (W @ W)


def so3_log(R):
    """Axis-angle 3-vector of a rotation matrix; angle must be < pi."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-7:
        raise DegenerateRotationError(f"rotation angle {theta:.6f} too close to pi for log")
    if theta < 1e-8:
        # first-order: R ~ I + skew(w)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * axis


def so3_left_jacobian_inv(phi):
    """Inverse left Jacobian of SO(3): Log(Exp(eps) Exp(phi)) ~ phi + Jl_inv(phi) eps."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * W + (1.0 / 12.0) * (W @ W)
    coeff = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + coeff * (W @ W)


def so3_right_jacobian_inv(phi):
    """Inverse right Jacobian: Log(Exp(phi) Exp(eps)) ~ phi + Jr_inv(phi) eps."""
    phi = np.asarray(phi, dtype=float)
    return so3_left_jacobian_inv(-phi)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.arccos(np.clip((np.trace(np.asarray(R)) - 1.0) * 0.5, -1.0, 1.0)))


def quat_to_matrix(q):
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Unit quaternion (x, y, z, w) of a rotation matrix, canonicalized so w >= 0."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class Pose6:
    """Rigid transform in SE(3): rotation matrix + translation."""

    r: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "Pose6":
        return Pose6()

    @staticmethod
    def from_quat(q, t) -> "Pose6":
        return Pose6(quat_to_matrix(q), t)

    @staticmethod
    def from_rt(r, t) -> "Pose6":
        return Pose6(r, t)

    @property
    def quat(self) -> np.ndarray:
        return matrix_to_quat(self.r)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.r.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m


def compose(a: Pose6, b: Pose6) -> Pose6:
    return Pose6(a.r @ b.r, a.r @ b.t + a.t)


def inverse(p: Pose6) -> Pose6:
    rt = p.r.T
    return Pose6(rt, -rt @ p.t)


def exp_map(v) -> Pose6:
    v = np.asarray(v, dtype=float).reshape(6)
    return Pose6(so3_exp(v[:3]), v[3:])


def log_map(p: Pose6) -> np.ndarray:
    return np.concatenate([so3_log(p.r), p.t])


def retract(p: Pose6, delta) -> Pose6:
    """pose (+) [dr, dt]: rotation perturbed on the right, translation added in frame."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return Pose6(p.r @ so3_exp(delta[:3]), p.t + delta[3:])


def local_coords(a: Pose6, b: Pose6) -> np.ndarray:
    """Tangent coordinates of b around a, inverse of retract: retract(a, v) == b."""
    return np.concatenate([so3_log(a.r.T @ b.r), b.t - a.t])


def pose_error(a: Pose6, b: Pose6):
    """(translation error [m], rotation error [rad]) between two poses."""
    dt = float(np.linalg.norm(a.t - b.t))
    dr = rotation_angle(a.r.T @ b.r)
    return dt, dr


def yaw_of(R) -> float:
    """Heading extracted from the projection of the rotated x-axis onto the xy-plane."""
    R = np.asarray(R)
    return float(np.arctan2(R[1, 0], R[0, 0]))


@dataclass
class LabeledCloud:
    """3D points with optional per-point semantic labels and covariances."""

    points: np.ndarray
    labels: np.ndarray | None = None
    covariances: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("labels length must match points")
        if self.covariances is not None:
            self.covariances = np.asarray(self.covariances, dtype=float).reshape(-1, 3, 3)
            if len(self.covariances) != len(self.points):
                raise ValueError("covariances length must match points")

    def __len__(self):
        return len(self.points)

    def select(self, idx) -> "LabeledCloud":
        return LabeledCloud(
            self.points[idx],
            None if self.labels is None else self.labels[idx],
            None if self.covariances is None else self.covariances[idx],
        )

    def transformed(self, pose: Pose6) -> "LabeledCloud":
        pts = pose.apply(self.points)
        cov = self.covariances
        if cov is not None:
            cov = np.einsum("ab,nbc,dc->nad", pose.r, cov, pose.r)
        return LabeledCloud(pts, self.labels, cov)


class SpatialIndex:
    """k-d tree over a cloud's points; queries are read-only and thread-safe."""

    def __init__(self, points):
        self._points = np.asarray(points, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self._points)

    def __len__(self):
        return len(self._points)

    @property
    def points(self):
        return self._points

    def nearest(self, queries, k=1):
        """Distances and indices of the k nearest points for each query."""
        return self._tree.query(np.asarray(queries, dtype=float), k=k)

    def within(self, queries, radius):
        """Lists of point indices within radius of each query."""
        return self._tree.query_ball_point(np.asarray(queries, dtype=float), radius)


def voxel_keys(points, voxel):
    """Integer voxel coordinates per point (floor(coord/voxel) per axis)."""
    return np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64)


def voxel_downsample(cloud: LabeledCloud, voxel: float) -> LabeledCloud:
    """One centroid per occupied voxel; majority label; mean covariance."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    n = len(cloud)
    if n == 0:
        return LabeledCloud(np.zeros((0, 3)), cloud.labels, cloud.covariances)
    keys = voxel_keys(cloud.points, voxel)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    m = len(counts)
    pts = np.zeros((m, 3))
    for a in range(3):
        pts[:, a] = np.bincount(inv, weights=cloud.points[:, a], minlength=m)
    pts /= counts[:, None]
    labels = None
    if cloud.labels is not None:
        nclass = int(cloud.labels.max()) + 1
        tally = np.zeros((m, nclass), dtype=np.int64)
        np.add.at(tally, (inv, cloud.labels), 1)
        labels = tally.argmax(axis=1).astype(np.uint8)
    covs = None
    if cloud.covariances is not None:
        covs = np.zeros((m, 3, 3))
        np.add.at(covs, inv, cloud.covariances)
        covs /= counts[:, None, None]
    return LabeledCloud(pts, labels, covs)


def umeyama(src, dst):
    """Rigid transform (scale fixed to 1) minimizing ||T(src) - dst||^2.

    Returns a Pose6 T with T.apply(src) ~= dst. Raises DegenerateGeometryError
    on rank-deficient (e.g. collinear) configurations.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 3:
        raise ValueError("umeyama needs >= 3 paired points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, S, Vt = np.linalg.svd(cov)
    # rank 2 suffices for a unique rotation; rank < 2 means collinear/degenerate
    if S[1] < 1e-12 * max(S[0], 1e-300):
        raise DegenerateGeometryError("degenerate (collinear) point configuration")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mu_d - R @ mu_s
    return Pose6(R, t)


def cov_transport_compose(a: Pose6, mid: Pose6, b: Pose6, cov: np.ndarray) -> np.ndarray:
    """Covariance of x = a o mid o b given the tangent covariance of mid.

    Tangent convention matches retract: rotation perturbed on the right of
    mid's rotation, translation additive. Linear propagation through the fixed
    composition x(mid (+) delta).
    """
    J = np.zeros((6, 6))
    J[:3, :3] = b.r.T
    J[3:, :3] = -a.r @ mid.r @ skew(b.t)
    J[3:, 3:] = a.r
    out = J @ np.asarray(cov) @ J.T
    return 0.5 * (out + out.T)


def umeyama_align(est, ref) -> Pose6:
    """Alignment transform from trajectory translations: T.apply(est_t) ~= ref_t."""
    est_t = np.array([p.t for p in est])
    ref_t = np.array([p.t for p in ref])
    return umeyama(est_t, ref_t)
