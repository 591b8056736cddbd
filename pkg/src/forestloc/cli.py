"""Command-line front end: reproducible experiments over the module pipeline.

Subcommands mirror the experiment stages::

    gen-world  -> world parameter file
    simulate   -> scans + odometry + ground-truth trajectory + aerial survey
    submaps    -> ground/aerial submap sets + per-submap odometry
    build-db   -> aerial descriptor database
    localize   -> estimated trajectory + diagnostics (+ wall-clock timings)
    evaluate   -> ATE / RTE / runtime CSVs
    plot       -> SVG figures from the evaluate outputs
    config     -> dump every config key, default and owning module
    db         -> inspect a descriptor database file

Every command validates inputs up front (exit 2 on bad input, 3 on runtime
failure) and removes partial outputs when it fails. Commands that produce run
artifacts write a JSON manifest *before* processing; `localize --manifest`
re-runs an experiment from one.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import logging
import os
import shutil
import sys

import numpy as np

from . import __version__
from .config import CONFIG_OWNERS, RunConfig
from . import cloudio
from .forest import (
    OdometryModel,
    SensorModel,
    WorldParams,
    build_aerial_submaps,
    build_ground_submaps,
    generate_world,
    render_aerial_map,
    simulate_traverse,
    world_from_mapping,
    world_to_mapping,
)
from .geometry import Pose6, compose
from .metrics import absolute_errors, relative_translation_error, runtime_report
from .pipeline import Dataset, diagnostics_rows, run, timing_rows
from .reloc import DescriptorDB, describe_submap

log = logging.getLogger("forestloc")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

DEFAULT_WAYPOINTS = "30,60;170,60;170,140;60,140"

# dataset-directory layout (relative names)
WORLD_FILE = "world.txt"
TRUTH_FILE = "truth.txt"
ODOM_FILE = "odometry.txt"
SCANS_DIR = "scans"
AERIAL_MAP_FILE = "aerial_map.clc"
GROUND_SUBMAPS_DIR = os.path.join("submaps", "ground")
AERIAL_SUBMAPS_DIR = os.path.join("submaps", "aerial")
SUBMAP_ODOM_FILE = "submap_odometry.txt"
DB_FILE = "db.fdb"


class ValidationError(ValueError):
    """User-facing input problem: missing file, bad config, malformed value."""


# -- config plumbing -------------------------------------------------------

def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValidationError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    return raw


def load_config(args) -> RunConfig:
    """Defaults, then --config file, then --set overrides (flags win)."""
    mapping = RunConfig().to_dict()
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ValidationError(f"config file not found: {args.config}")
        try:
            mapping.update(cloudio.read_json(args.config))
        except Exception as exc:
            raise ValidationError(f"cannot parse {args.config}: {exc}") from exc
    defaults = RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in mapping:
            raise ValidationError(f"unknown config key {key!r}")
        mapping[key] = _coerce(raw.strip(), getattr(defaults, key))
    try:
        return RunConfig.from_dict(mapping)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def _parse_waypoints(text):
    try:
        pts = [tuple(float(v) for v in p.split(",")) for p in text.split(";") if p.strip()]
    except ValueError as exc:
        raise ValidationError(f"malformed waypoints {text!r}") from exc
    if len(pts) < 2 or any(len(p) != 2 for p in pts):
        raise ValidationError("waypoints need at least two 'x,y' pairs separated by ';'")
    return pts


def _require(path, hint):
    if not os.path.exists(path):
        raise ValidationError(f"missing {path} ({hint})")
    return path


def _manifest(command, inputs, outputs, cfg: RunConfig, extra=None):
    m = {
        "tool": "forestloc",
        "version": __version__,
        "command": command,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "inputs": inputs,
        "outputs": outputs,
        "config": cfg.to_dict(),
    }
    if extra:
        m["args"] = extra
    return m


def _write_csv(path, rows):
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(rows)


# -- subcommand implementations --------------------------------------------

def cmd_gen_world(args, outputs):
    cfg = load_config(args)
    params = WorldParams(extent=cfg.extent, density_per_ha=cfg.density_per_ha,
                         min_spacing=cfg.min_spacing,
                         terrain_amplitude=cfg.terrain_amplitude)
    world = generate_world(params, seed=cfg.world_seed)
    outputs.append(args.out)
    cloudio.write_keyvalue(args.out, world_to_mapping(world))
    log.info("world: %d trees on %.0f x %.0f m -> %s",
             world.n_trees, *world.extent, args.out)


def _sensor_model(cfg: RunConfig) -> SensorModel:
    return SensorModel(max_range=cfg.max_range, vertical_fov=cfg.vertical_fov,
                       angular_resolution=cfg.angular_resolution,
                       noise_sigma=cfg.noise_sigma)


def cmd_simulate(args, outputs):
    cfg = load_config(args)
    world_path = _require(args.world, "run gen-world first")
    waypoints = _parse_waypoints(args.waypoints)
    os.makedirs(args.out, exist_ok=True)
    manifest_path = os.path.join(args.out, "simulate_manifest.json")
    outputs.append(manifest_path)
    cloudio.write_json(manifest_path, _manifest(
        "simulate", {"world": os.path.abspath(world_path)},
        {"dataset": os.path.abspath(args.out)}, cfg,
        {"waypoints": args.waypoints}))

    world = world_from_mapping(cloudio.read_keyvalue(world_path))
    model = _sensor_model(cfg)
    odom = OdometryModel(drift_rate=cfg.drift_rate, rot_drift_rate=cfg.rot_drift_rate,
                         noise_sigma_t=cfg.noise_sigma_t, noise_sigma_r=cfg.noise_sigma_r,
                         seed=cfg.odom_seed)
    true_poses, increments, scans = simulate_traverse(
        world, waypoints, cfg.speed, model, odom,
        scan_rate=cfg.scan_rate, seed=cfg.sim_seed)
    log.info("simulated %d scans over %.0f s", len(scans), true_poses[-1][0])

    world_copy = os.path.join(args.out, WORLD_FILE)
    outputs.append(world_copy)
    shutil.copyfile(world_path, world_copy)
    truth_path = os.path.join(args.out, TRUTH_FILE)
    outputs.append(truth_path)
    cloudio.write_trajectory(truth_path, true_poses)
    odom_path = os.path.join(args.out, ODOM_FILE)
    outputs.append(odom_path)
    cloudio.write_odometry(odom_path, [(k, p, c) for k, (p, c) in enumerate(increments)])
    scans_dir = os.path.join(args.out, SCANS_DIR)
    outputs.append(scans_dir)
    os.makedirs(scans_dir, exist_ok=True)
    for k, scan in enumerate(scans):
        cloudio.write_cloud(os.path.join(scans_dir, f"scan_{k:04d}.clc"), scan)

    aerial = render_aerial_map(world, model, view_step=cfg.aerial_view_step,
                               seed=cfg.sim_seed + 1000)
    aerial_path = os.path.join(args.out, AERIAL_MAP_FILE)
    outputs.append(aerial_path)
    cloudio.write_cloud(aerial_path, aerial)
    log.info("aerial survey: %d points -> %s", len(aerial), aerial_path)


def _read_scans(dataset):
    scans_dir = _require(os.path.join(dataset, SCANS_DIR), "run simulate first")
    names = sorted(n for n in os.listdir(scans_dir) if n.endswith(".clc"))
    if not names:
        raise ValidationError(f"no scans in {scans_dir}")
    return [cloudio.read_cloud(os.path.join(scans_dir, n)) for n in names]


def cmd_submaps(args, outputs):
    cfg = load_config(args)
    dataset = args.dataset
    truth = cloudio.read_trajectory(_require(os.path.join(dataset, TRUTH_FILE),
                                             "run simulate first"))
    increments = cloudio.read_odometry(_require(os.path.join(dataset, ODOM_FILE),
                                                "run simulate first"))
    scans = _read_scans(dataset)
    if len(scans) != len(truth) or len(increments) != len(truth) - 1:
        raise ValidationError(
            f"{len(scans)} scans / {len(truth)} truth poses / "
            f"{len(increments)} odometry increments are inconsistent")
    aerial_cloud = cloudio.read_cloud(_require(os.path.join(dataset, AERIAL_MAP_FILE),
                                               "run simulate first"))

    manifest_path = os.path.join(dataset, "submaps_manifest.json")
    outputs.append(manifest_path)
    cloudio.write_json(manifest_path, _manifest(
        "submaps", {"dataset": os.path.abspath(dataset)},
        {"ground": GROUND_SUBMAPS_DIR, "aerial": AERIAL_SUBMAPS_DIR,
         "odometry": SUBMAP_ODOM_FILE}, cfg))

    ground = build_ground_submaps(scans, truth, window_s=cfg.window_s,
                                  crop_radius=cfg.crop_radius,
                                  rate=cfg.submap_rate, voxel=cfg.voxel)
    aerial = build_aerial_submaps(aerial_cloud, grid_step=cfg.aerial_grid_step,
                                  crop_radius=cfg.crop_radius, voxel=cfg.voxel)
    log.info("%d ground submaps, %d aerial submaps", len(ground), len(aerial))
    if not ground or not aerial:
        raise ValidationError("empty submap set; check the traverse and sensing config")

    gdir = os.path.join(dataset, GROUND_SUBMAPS_DIR)
    outputs.append(gdir)
    cloudio.write_submaps(gdir, ground)
    adir = os.path.join(dataset, AERIAL_SUBMAPS_DIR)
    outputs.append(adir)
    cloudio.write_submaps(adir, aerial)

    # per-submap odometry: compose the per-scan increments between each
    # submap's anchor scan (the one nearest its window centre) and the next's
    times = np.array([t for t, _ in truth])
    anchors = [int(np.argmin(np.abs(times - s.timestamp))) for s in ground]
    sub_odo = []
    for i in range(len(ground) - 1):
        pose = Pose6.identity()
        cov = np.zeros((6, 6))
        for k in range(anchors[i], anchors[i + 1]):
            inc, c = increments[k][1], increments[k][2]
            pose = compose(pose, inc)
            cov = cov + c
        sub_odo.append((i, pose, cov))
    odo_path = os.path.join(dataset, SUBMAP_ODOM_FILE)
    outputs.append(odo_path)
    cloudio.write_odometry(odo_path, sub_odo)


def cmd_build_db(args, outputs):
    cfg = load_config(args)
    submaps = cloudio.read_submaps(_require(os.path.join(args.dataset, AERIAL_SUBMAPS_DIR),
                                            "run submaps first"))
    manifest_path = os.path.join(args.dataset, "build_db_manifest.json")
    outputs.append(manifest_path)
    cloudio.write_json(manifest_path, _manifest(
        "build-db", {"aerial_submaps": AERIAL_SUBMAPS_DIR}, {"db": DB_FILE}, cfg))
    entries = []
    for s in submaps:
        try:
            entries.append(describe_submap(s, guided=cfg.guided_keypoints,
                                           m_max=cfg.max_keypoints,
                                           desc_seed=cfg.descriptor_seed))
        except ValueError as exc:
            log.warning("aerial submap %d skipped: %s", s.id, exc)
    if not entries:
        raise ValidationError("no aerial submap produced a descriptor entry")
    db = DescriptorDB(entries)
    db_path = os.path.join(args.dataset, DB_FILE)
    outputs.append(db_path)
    cloudio.write_descriptor_db(db_path, db)
    log.info("descriptor DB: %d entries -> %s", len(db), db_path)


def _load_dataset(dataset_dir, keep_ids=None) -> Dataset:
    ground = cloudio.read_submaps(_require(os.path.join(dataset_dir, GROUND_SUBMAPS_DIR),
                                           "run submaps first"))
    aerial_all = cloudio.read_submaps(_require(os.path.join(dataset_dir, AERIAL_SUBMAPS_DIR),
                                               "run submaps first"))
    db = cloudio.read_descriptor_db(_require(os.path.join(dataset_dir, DB_FILE),
                                             "run build-db first"))
    described = {e.submap_id for e in db.entries}
    aerial = [s for s in aerial_all if s.id in described]
    odometry = [(p, c) for _, p, c in cloudio.read_odometry(
        _require(os.path.join(dataset_dir, SUBMAP_ODOM_FILE), "run submaps first"))]
    return Dataset(aerial, db, ground, odometry)


def cmd_localize(args, outputs):
    if args.manifest:
        m = cloudio.read_json(_require(args.manifest, "a localize manifest"))
        cfg = RunConfig.from_dict(m["config"])
        dataset_dir = m["inputs"]["dataset"]
        out_dir = args.out or m["outputs"]["run"]
    else:
        if not args.dataset or not args.out:
            raise ValidationError("localize needs --dataset and --out (or --manifest)")
        cfg = load_config(args)
        dataset_dir = args.dataset
        out_dir = args.out
    dataset = _load_dataset(dataset_dir)
    try:
        dataset.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, "manifest.json")
    outputs.append(manifest_path)
    cloudio.write_json(manifest_path, _manifest(
        "localize", {"dataset": os.path.abspath(dataset_dir)},
        {"run": os.path.abspath(out_dir)}, cfg))

    trajectory, diagnostics = run(dataset, cfg)
    if not trajectory:
        raise RuntimeError("localization never entered tracking; no trajectory produced")
    traj_path = os.path.join(out_dir, "trajectory.txt")
    outputs.append(traj_path)
    cloudio.write_trajectory(traj_path, trajectory)
    diag_path = os.path.join(out_dir, "diagnostics.csv")
    outputs.append(diag_path)
    _write_csv(diag_path, diagnostics_rows(diagnostics))
    timing_path = os.path.join(out_dir, "timings.csv")
    outputs.append(timing_path)
    _write_csv(timing_path, timing_rows(diagnostics))
    log.info("trajectory: %d poses -> %s", len(trajectory), traj_path)


def _summary_row(mode, kind, s):
    d = s.as_dict()
    return [mode, kind] + [f"{d[k]:.6f}" for k in ("rmse", "median", "mean", "std", "max")]


def cmd_evaluate(args, outputs):
    est = cloudio.read_trajectory(_require(os.path.join(args.run, "trajectory.txt"),
                                           "run localize first"))
    truth = cloudio.read_trajectory(_require(os.path.join(args.dataset, TRUTH_FILE),
                                             "a simulated dataset"))
    os.makedirs(args.out or args.run, exist_ok=True)
    out_dir = args.out or args.run

    ate_rows = [["mode", "error", "rmse", "median", "mean", "std", "max"]]
    for mode in ("3DoF", "6DoF"):
        terr, rerr = absolute_errors(est, truth, mode=mode)
        ate_rows.append(_summary_row(mode, "translation", terr))
        ate_rows.append(_summary_row(mode, "rotation_deg", rerr))
    ate_path = os.path.join(out_dir, "ate.csv")
    outputs.append(ate_path)
    _write_csv(ate_path, ate_rows)

    bins = [float(b) for b in args.rte_bins.split(",")]
    rte = relative_translation_error(est, truth, bins)
    rte_rows = [["distance", "median", "q1", "q3", "lo", "hi", "n"]]
    for d in sorted(rte):
        r = rte[d]
        rte_rows.append([f"{d:.1f}"] + [f"{r[k]:.6f}" for k in ("median", "q1", "q3", "lo", "hi")]
                        + [r["n"]])
    rte_path = os.path.join(out_dir, "rte.csv")
    outputs.append(rte_path)
    _write_csv(rte_path, rte_rows)

    # wall-clock report (not part of the deterministic outputs)
    timing_path = os.path.join(args.run, "timings.csv")
    if os.path.exists(timing_path):
        with open(timing_path, newline="") as f:
            rows = list(csv.DictReader(f))
        report = runtime_report([{k: float(r[k]) for k in r if k != "submap_id"}
                                 for r in rows])
        rt_rows = [["stage", "mean_s", "std_s"]]
        for stage, stats in report.items():
            rt_rows.append([stage, f"{stats['mean']:.6f}", f"{stats['std']:.6f}"])
        rt_path = os.path.join(out_dir, "runtime.csv")
        outputs.append(rt_path)
        _write_csv(rt_path, rt_rows)
    log.info("metrics -> %s", out_dir)


def cmd_plot(args, outputs):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    est = cloudio.read_trajectory(_require(os.path.join(args.run, "trajectory.txt"),
                                           "run localize first"))
    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 6))
    xy = np.array([p.t[:2] for _, p in est])
    ax.plot(xy[:, 0], xy[:, 1], "-", label="estimate", lw=1.5)
    if args.dataset:
        truth = cloudio.read_trajectory(os.path.join(args.dataset, TRUTH_FILE))
        txy = np.array([p.t[:2] for _, p in truth])
        ax.plot(txy[:, 0], txy[:, 1], "--", label="ground truth", lw=1.0)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend()
    traj_svg = os.path.join(out_dir, "trajectory.svg")
    outputs.append(traj_svg)
    fig.savefig(traj_svg)
    plt.close(fig)

    rte_path = os.path.join(args.run, "rte.csv")
    if os.path.exists(rte_path):
        with open(rte_path, newline="") as f:
            rows = list(csv.DictReader(f))
        fig, ax = plt.subplots(figsize=(6, 4))
        stats = [{
            "med": float(r["median"]), "q1": float(r["q1"]), "q3": float(r["q3"]),
            "whislo": float(r["lo"]), "whishi": float(r["hi"]),
            "label": r["distance"], "fliers": [],
        } for r in rows]
        ax.bxp(stats, showfliers=False)
        ax.set_xlabel("segment length [m]")
        ax.set_ylabel("relative translation error [m]")
        rte_svg = os.path.join(out_dir, "rte.svg")
        outputs.append(rte_svg)
        fig.savefig(rte_svg)
        plt.close(fig)
    log.info("plots -> %s", out_dir)


def cmd_config_dump(args, outputs):
    cfg = RunConfig()
    for f in dataclasses.fields(RunConfig):
        owner = CONFIG_OWNERS.get(f.name, "?")
        print(f"{f.name} = {getattr(cfg, f.name)!r}  # module: {owner}")


def cmd_db_inspect(args, outputs):
    db = cloudio.read_descriptor_db(_require(args.path, "a descriptor DB file"))
    print(f"entries: {len(db)}")
    print(f"global descriptor dim: {db.dim_global}")
    print(f"local descriptor dim: {db.dim_local}")
    kp = [len(e.keypoints.coords) for e in db.entries]
    print(f"keypoints per entry: min {min(kp)}, median {int(np.median(kp))}, max {max(kp)}")
    c = db.centroids()
    print(f"centroid bounds: x [{c[:, 0].min():.1f}, {c[:, 0].max():.1f}] "
          f"y [{c[:, 1].min():.1f}, {c[:, 1].max():.1f}]")


# -- parser -----------------------------------------------------------------

def _config_epilog():
    cfg = RunConfig()
    lines = ["config keys (default, owning module):"]
    for f in dataclasses.fields(RunConfig):
        lines.append(f"  {f.name} = {getattr(cfg, f.name)!r}  [{CONFIG_OWNERS.get(f.name, '?')}]")
    return "\n".join(lines)


def _add_config_args(p):
    p.add_argument("--config", help="JSON file of config overrides")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a single config key (wins over --config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forestloc",
        description="Cross-view forest localisation experiments.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"forestloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate a synthetic forest world file")
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("simulate", help="simulate a ground traverse and aerial survey")
    p.add_argument("--world", required=True, help="world file from gen-world")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--waypoints", default=DEFAULT_WAYPOINTS,
                   help="traverse waypoints 'x,y;x,y;...' in metres")
    _add_config_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("submaps", help="build ground and aerial submap sets")
    p.add_argument("--dataset", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_submaps)

    p = sub.add_parser("build-db", help="build the aerial descriptor database")
    p.add_argument("--dataset", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_build_db)

    p = sub.add_parser("localize", help="run the online localisation pipeline")
    p.add_argument("--dataset")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--manifest", help="re-run from an existing manifest")
    _add_config_args(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="score a run against ground truth")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", help="metrics directory (default: the run directory)")
    p.add_argument("--rte-bins", default="10,20,50,100,150",
                   help="comma-separated segment lengths in metres")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="SVG figures from a run (and its metrics)")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", help="overlay the ground-truth trajectory")
    p.add_argument("--out", help="figure directory (default: the run directory)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="config_command", required=True)
    d = csub.add_parser("dump", help="print every key, default and owning module")
    d.set_defaults(func=cmd_config_dump)

    p = sub.add_parser("db", help="descriptor database utilities")
    dsub = p.add_subparsers(dest="db_command", required=True)
    i = dsub.add_parser("inspect", help="print a DB summary")
    i.add_argument("path")
    i.set_defaults(func=cmd_db_inspect)

    return parser


def _cleanup(outputs):
    for path in reversed(outputs):
        try:
            if os.path.isdir(path):
                shutil.rmtree(path)
            elif os.path.exists(path):
                os.remove(path)
        except OSError:
            log.warning("could not remove partial output %s", path)


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("FORESTLOC_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    outputs: list[str] = []
    try:
        args.func(args, outputs)
        return EXIT_OK
    except (ValidationError, cloudio.FormatError) as exc:
        _cleanup(outputs)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - single CLI failure boundary
        _cleanup(outputs)
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
