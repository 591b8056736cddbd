"""Run configuration: every tunable of the pipeline with its default.

Loaded from JSON; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields


@dataclass
class RunConfig:
    # world generation
    world_seed: int = 0
    extent: tuple = (200.0, 200.0)
    density_per_ha: float = 200.0
    min_spacing: float = 2.0
    terrain_amplitude: float = 1.5

    # sensing
    max_range: float = 100.0
    vertical_fov: float = 120.0
    angular_resolution: float = 2.0
    noise_sigma: float = 0.02
    aerial_view_step: float = 20.0

    # odometry simulation
    drift_rate: float = 0.01
    rot_drift_rate: float = 0.0
    noise_sigma_t: float = 0.005
    noise_sigma_r: float = 0.001
    odom_seed: int = 0

    # traverse
    speed: float = 1.5
    scan_rate: float = 2.0
    sim_seed: int = 0

    # submapping
    window_s: float = 1.0
    crop_radius: float = 30.0
    submap_rate: float = 0.5
    voxel: float = 0.3
    aerial_grid_step: float = 5.0

    # descriptors / retrieval
    guided_keypoints: bool = True
    max_keypoints: int = 128
    k_seg: int = 5
    descriptor_seed: int = 7
    retrieval_k: int = 5

    # coarse registration
    ransac_iterations: int = 2000
    ransac_inlier_threshold: float = 1.0
    ransac_seed: int = 0
    fitness_tau: float = 0.5
    fitness_threshold: float = 0.3

    # fine registration
    gicp_max_corr_dist: float = 1.0
    gicp_min_corr_dist: float = 0.6
    gicp_max_iterations: int = 64
    cov_knn: int = 20

    # smoothing
    lag: int = 25
    gate_quantile: float = 0.999

    # pipeline control
    f_max: int = 5
    tracking_radius: float = 15.0
    map_factors_enabled: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(mapping)
        if "extent" in kwargs:
            kwargs["extent"] = tuple(kwargs["extent"])
        return cls(**kwargs)


# owning module per key, surfaced by `forestloc config dump`
CONFIG_OWNERS = {
    "world_seed": "forest", "extent": "forest", "density_per_ha": "forest",
    "min_spacing": "forest", "terrain_amplitude": "forest",
    "max_range": "forest", "vertical_fov": "forest", "angular_resolution": "forest",
    "noise_sigma": "forest", "aerial_view_step": "forest",
    "drift_rate": "forest", "rot_drift_rate": "forest", "noise_sigma_t": "forest",
    "noise_sigma_r": "forest", "odom_seed": "forest",
    "speed": "forest", "scan_rate": "forest", "sim_seed": "forest",
    "window_s": "forest", "crop_radius": "forest", "submap_rate": "forest",
    "voxel": "forest", "aerial_grid_step": "forest",
    "guided_keypoints": "reloc", "max_keypoints": "reloc", "k_seg": "semantics",
    "descriptor_seed": "reloc", "retrieval_k": "reloc",
    "ransac_iterations": "reloc", "ransac_inlier_threshold": "reloc",
    "ransac_seed": "reloc", "fitness_tau": "reloc", "fitness_threshold": "reloc",
    "gicp_max_corr_dist": "gicp", "gicp_min_corr_dist": "gicp",
    "gicp_max_iterations": "gicp", "cov_knn": "gicp",
    "lag": "fgraph", "gate_quantile": "fgraph",
    "f_max": "pipeline", "tracking_radius": "pipeline",
    "map_factors_enabled": "pipeline",
}
