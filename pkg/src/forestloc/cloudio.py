"""File formats: point clouds, trajectories, odometry logs, worlds and descriptor DBs.

Binary cloud format "CLC1" (little-endian):
    magic   4 bytes  b"CLC1"
    count   uint32
    flags   uint8    bit 0: labels present, bit 1: covariances present
    points  count * 3 float64
    labels  count * uint8                     (if flag bit 0)
    covs    count * 6 float64 upper-triangular (xx xy xz yy yz zz, if flag bit 1)

Trajectory files are line-oriented text: "timestamp tx ty tz qx qy qz qw".

Odometry logs are line-oriented text, one increment per line:
    "k tx ty tz qx qy qz qw s_00 .. s_55" with the 21 upper-triangular entries
    of the 6x6 covariance in tangent order [rotation, translation].

Descriptor DB format "FDB1" (little-endian):
    magic, uint32 n_entries, uint32 dim_global, uint32 dim_local, then per
    entry: int64 id, 3 float64 centroid, dim_global float64 global descriptor,
    uint32 n_keypoints, coords (n*3 f64), saliency uncertainties (n f64),
    local descriptors (n*dim_local f64).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .geometry import LabeledCloud, Pose6

CLOUD_MAGIC = b"CLC1"
DB_MAGIC = b"FDB1"

_TRIU = np.triu_indices(3)
_TRIU6 = np.triu_indices(6)


class FormatError(ValueError):
    """Raised on malformed input files."""


def write_cloud(path, cloud: LabeledCloud):
    n = len(cloud)
    flags = (1 if cloud.labels is not None else 0) | (2 if cloud.covariances is not None else 0)
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<IB", n, flags))
        f.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        if cloud.labels is not None:
            f.write(np.ascontiguousarray(cloud.labels, dtype=np.uint8).tobytes())
        if cloud.covariances is not None:
            tri = cloud.covariances[:, _TRIU[0], _TRIU[1]]
            f.write(np.ascontiguousarray(tri, dtype="<f8").tobytes())


def read_cloud(path) -> LabeledCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CLOUD_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {CLOUD_MAGIC!r}")
        n, flags = struct.unpack("<IB", f.read(5))
        pts = np.frombuffer(f.read(n * 24), dtype="<f8").reshape(n, 3).copy()
        labels = None
        covs = None
        if flags & 1:
            labels = np.frombuffer(f.read(n), dtype=np.uint8).copy()
        if flags & 2:
            tri = np.frombuffer(f.read(n * 48), dtype="<f8").reshape(n, 6)
            covs = np.zeros((n, 3, 3))
            covs[:, _TRIU[0], _TRIU[1]] = tri
            covs[:, _TRIU[1], _TRIU[0]] = tri
    return LabeledCloud(pts, labels, covs)


def write_cloud_text(path, cloud: LabeledCloud):
    with open(path, "w") as f:
        for i, p in enumerate(cloud.points):
            if cloud.labels is not None:
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {cloud.labels[i]}\n")
            else:
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def read_cloud_text(path) -> LabeledCloud:
    pts, labels = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            pts.append([float(v) for v in parts[:3]])
            if len(parts) > 3:
                labels.append(int(parts[3]))
    if labels and len(labels) != len(pts):
        raise FormatError(f"{path}: labels present on some lines only")
    return LabeledCloud(np.array(pts).reshape(-1, 3),
                        np.array(labels, dtype=np.uint8) if labels else None)


def write_trajectory(path, stamped_poses):
    """stamped_poses: iterable of (timestamp, Pose6)."""
    with open(path, "w") as f:
        for ts, pose in stamped_poses:
            q = pose.quat
            t = pose.t
            f.write(f"{ts:.9f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f}\n")


def read_trajectory(path):
    out = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise FormatError(f"{path}: expected 8 fields per line, got {len(parts)}")
            vals = [float(v) for v in parts]
            out.append((vals[0], Pose6.from_quat(vals[4:8], vals[1:4])))
    return out


def write_odometry(path, increments):
    """increments: iterable of (k, Pose6, cov6x6)."""
    with open(path, "w") as f:
        for k, pose, cov in increments:
            q = pose.quat
            t = pose.t
            tri = np.asarray(cov)[_TRIU6]
            f.write(f"{k} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.12f} {q[1]:.12f} {q[2]:.12f} {q[3]:.12f} "
                    + " ".join(f"{v:.12e}" for v in tri) + "\n")


def read_odometry(path):
    out = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8 + 21:
                raise FormatError(f"{path}: expected 29 fields per line, got {len(parts)}")
            k = int(parts[0])
            vals = [float(v) for v in parts[1:]]
            pose = Pose6.from_quat(vals[3:7], vals[0:3])
            cov = np.zeros((6, 6))
            cov[_TRIU6] = vals[7:]
            cov.T[_TRIU6] = vals[7:]
            out.append((k, pose, cov))
    return out


def write_keyvalue(path, mapping):
    """Self-describing key=value text file (scalars and flat numeric lists)."""
    with open(path, "w") as f:
        for key, value in mapping.items():
            if isinstance(value, (list, tuple, np.ndarray)):
                value = ",".join(repr(float(v)) for v in np.asarray(value).ravel())
            f.write(f"{key} = {value}\n")


def read_keyvalue(path):
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: malformed line {line!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def _pose_record(pose: Pose6):
    return {"t": [float(v) for v in pose.t], "q": [float(v) for v in pose.quat]}


def _pose_from_record(rec) -> Pose6:
    return Pose6.from_quat(rec["q"], rec["t"])


def write_submaps(dirpath, submaps):
    """Submap set as a directory: index.json + one CLC1 cloud per submap."""
    import os

    os.makedirs(dirpath, exist_ok=True)
    index = []
    for s in submaps:
        name = f"submap_{s.id:04d}.clc"
        write_cloud(os.path.join(dirpath, name), s.cloud)
        index.append({
            "id": s.id, "view": s.view, "cloud": name,
            "origin": _pose_record(s.origin),
            "timestamp": s.timestamp,
            "crop_radius": s.crop_radius,
            "sensor_offset": _pose_record(s.sensor_offset),
        })
    write_json(os.path.join(dirpath, "index.json"), index)


def read_submaps(dirpath):
    import os

    from .forest import Submap

    index_path = os.path.join(dirpath, "index.json")
    if not os.path.exists(index_path):
        raise FormatError(f"{dirpath}: no index.json (not a submap directory)")
    out = []
    for rec in read_json(index_path):
        cloud = read_cloud(os.path.join(dirpath, rec["cloud"]))
        out.append(Submap(int(rec["id"]), rec["view"], cloud,
                          _pose_from_record(rec["origin"]), rec["timestamp"],
                          float(rec["crop_radius"]),
                          _pose_from_record(rec["sensor_offset"])))
    return out


def write_descriptor_db(path, db):
    entries = db.entries
    with open(path, "wb") as f:
        f.write(DB_MAGIC)
        f.write(struct.pack("<III", len(entries), db.dim_global, db.dim_local))
        for e in entries:
            f.write(struct.pack("<q", e.submap_id))
            f.write(np.ascontiguousarray(e.centroid, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(e.global_desc, dtype="<f8").tobytes())
            m = len(e.keypoints.coords)
            f.write(struct.pack("<I", m))
            f.write(np.ascontiguousarray(e.keypoints.coords, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(e.keypoints.saliency_uncertainty, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(e.local_descs, dtype="<f8").tobytes())


def read_descriptor_db(path):
    from .reloc import DescriptorDB, DBEntry
    from .semantics import KeypointSet

    entries = []
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {DB_MAGIC!r}")
        n, dg, dl = struct.unpack("<III", f.read(12))
        for _ in range(n):
            (sid,) = struct.unpack("<q", f.read(8))
            centroid = np.frombuffer(f.read(24), dtype="<f8").copy()
            gdesc = np.frombuffer(f.read(8 * dg), dtype="<f8").copy()
            (m,) = struct.unpack("<I", f.read(4))
            coords = np.frombuffer(f.read(24 * m), dtype="<f8").reshape(m, 3).copy()
            sal = np.frombuffer(f.read(8 * m), dtype="<f8").copy()
            ldesc = np.frombuffer(f.read(8 * m * dl), dtype="<f8").reshape(m, dl).copy()
            entries.append(DBEntry(sid, centroid, gdesc, KeypointSet(coords, sal), ldesc))
    return DescriptorDB(entries, dim_global=dg, dim_local=dl)
