"""Command-line entry point.

Subcommands: selftest, pipeline, augment, bench, gtdb. Every run is driven
by one seed plus a key-value config file overridable by flags (flags win).
All stage randomness is derived from that single seed through fixed
spawn-key lanes (see docs/formats.md), so outputs are byte-identical across
runs; wall-clock numbers live in a separate timings.json that is documented
as the only non-deterministic artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Tuple

import numpy as np

from .augment import AugmentConfig, augment_scene, build_object_database
from .bench import run_complexity_sweep, sweep_summary, write_bench_csv
from .fileio import (
    load_params,
    save_params,
    write_fused_csv,
    write_object_database,
    write_scene,
)
from .fusion import fuse_scene, make_dropout_mask, make_params
from .scenegen import SceneConfig, generate_pyramid, generate_scene
from .selftest import VALID_FAULTS, format_report, run_selftest
from .voxels import VoxelConfig, voxelize

#: Fixed spawn-key lanes for per-stage seed derivation. Adding a lane is
#: backwards compatible; renumbering is not.
STAGE_LANES = {
    "scene": 0,
    "params": 1,
    "dropout": 2,
    "augment": 3,
    "database": 4,
    "bench": 5,
}


def derive_seed(seed: int, stage: str, index: Optional[int] = None) -> int:
    """Counter-based fan-out: one master seed, one lane per pipeline stage."""
    key = (STAGE_LANES[stage],) if index is None else (STAGE_LANES[stage], index)
    ss = np.random.SeedSequence(seed, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class ConfigError(Exception):
    """Invalid configuration; carries the offending field name."""

    def __init__(self, field: str, message: str):
        super().__init__(f"field {field!r}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "voxfuse-out"
    camera_count: int = 6
    box_count: int = 8
    points_per_box: int = 600
    ground_points: int = 6000
    levels: int = 3
    keep_count: int = -1  # -1 keeps every camera
    heads: int = 4
    points: int = 8
    voxel_size: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    alpha: float = 0.6
    max_paste: int = 4
    augment: bool = False
    params_path: Optional[str] = None
    db_scenes: int = 2
    bench_sizes: Tuple[int, ...] = (64, 128, 256, 512)
    bench_reps: int = 10
    n_voxels: int = 10_000
    workers: int = 0
    parallel_workers: int = 0
    inject_fault: Optional[str] = None


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_vec3(text: str) -> Tuple[float, float, float]:
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) == 1:
        return (parts[0],) * 3
    if len(parts) == 3:
        return tuple(parts)
    raise ValueError("expected one or three numbers")


def _parse_sizes(text: str) -> Tuple[int, ...]:
    sizes = tuple(int(v) for v in text.replace(",", " ").split())
    if not sizes:
        raise ValueError("expected at least one size")
    return sizes


_CONVERTERS = {
    "seed": int,
    "out": str,
    "camera_count": int,
    "box_count": int,
    "points_per_box": int,
    "ground_points": int,
    "levels": int,
    "keep_count": int,
    "heads": int,
    "points": int,
    "voxel_size": _parse_vec3,
    "alpha": float,
    "max_paste": int,
    "augment": _parse_bool,
    "params_path": str,
    "db_scenes": int,
    "bench_sizes": _parse_sizes,
    "bench_reps": int,
    "n_voxels": int,
    "workers": int,
    "parallel_workers": int,
    "inject_fault": str,
}


def read_config_file(path: str) -> Dict[str, object]:
    """Parse the plain-text key-value grammar (docs/formats.md) into typed
    values. Unknown keys and unparsable values raise ConfigError."""
    values: Dict[str, object] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path!r}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key not in _CONVERTERS:
                raise ConfigError(key, f"unknown configuration field (line {lineno})")
            try:
                values[key] = _CONVERTERS[key](rest.strip())
            except (ValueError, TypeError) as exc:
                raise ConfigError(key, f"bad value {rest.strip()!r}: {exc}") from exc
    return values


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    if cfg.camera_count < 1:
        raise ConfigError("camera_count", "must be at least 1")
    if cfg.box_count < 0:
        raise ConfigError("box_count", "must be non-negative")
    if cfg.points_per_box < 1:
        raise ConfigError("points_per_box", "must be at least 1")
    if cfg.ground_points < 1:
        raise ConfigError("ground_points", "must be at least 1")
    if cfg.levels < 1:
        raise ConfigError("levels", "must be at least 1")
    if cfg.keep_count < -1 or cfg.keep_count > cfg.camera_count:
        raise ConfigError(
            "keep_count", f"must be -1 (all) or 0..{cfg.camera_count}"
        )
    if cfg.heads < 1:
        raise ConfigError("heads", "must be at least 1")
    if cfg.points < 1:
        raise ConfigError("points", "must be at least 1")
    if any(not (s > 0) for s in cfg.voxel_size):
        raise ConfigError("voxel_size", "all components must be positive")
    if not (0.0 < cfg.alpha <= 1.0):
        raise ConfigError("alpha", "must lie in (0, 1]")
    if cfg.max_paste < 0:
        raise ConfigError("max_paste", "must be non-negative")
    if cfg.db_scenes < 1:
        raise ConfigError("db_scenes", "must be at least 1")
    if any(s < 2 for s in cfg.bench_sizes):
        raise ConfigError("bench_sizes", "sizes must be at least 2")
    if cfg.bench_reps < 10:
        raise ConfigError("bench_reps", "need at least 10 repetitions")
    if cfg.n_voxels < 1:
        raise ConfigError("n_voxels", "must be at least 1")
    if cfg.workers < 0:
        raise ConfigError("workers", "must be non-negative")
    if cfg.parallel_workers < 0:
        raise ConfigError("parallel_workers", "must be non-negative")
    if cfg.inject_fault is not None and cfg.inject_fault not in VALID_FAULTS:
        raise ConfigError(
            "inject_fault", f"unknown fault; valid: {', '.join(VALID_FAULTS)}"
        )
    return cfg


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags (flags win)."""
    merged: Dict[str, object] = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            merged[f.name] = flag_value
    cfg = RunConfig(**merged)
    return _validate(cfg)


# ---------------------------------------------------------------------------
# Shared helpers


class _StageTimer:
    def __init__(self):
        self.seconds: Dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except Exception as exc:
            raise RuntimeError(f"pipeline stage {name!r} failed: {exc}") from exc
        self.seconds[name] = time.perf_counter() - start


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(
        camera_count=cfg.camera_count,
        box_count=cfg.box_count,
        points_per_box=cfg.points_per_box,
        ground_points=cfg.ground_points,
    )


def _histogram(values) -> Dict[str, int]:
    uniq, counts = np.unique(np.asarray(values), return_counts=True)
    return {str(int(u)): int(c) for u, c in zip(uniq, counts)}


def _build_database(cfg: RunConfig, scene_cfg: SceneConfig):
    donors = [
        generate_scene(derive_seed(cfg.seed, "database", i), scene_cfg)
        for i in range(cfg.db_scenes)
    ]
    return build_object_database(donors)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_selftest(cfg: RunConfig) -> int:
    results = run_selftest(cfg.seed, inject_fault=cfg.inject_fault)
    sys.stdout.write(format_report(results, cfg.seed))
    return 0 if all(r.passed for r in results) else 1


def cmd_pipeline(cfg: RunConfig) -> int:
    timer = _StageTimer()
    scene_cfg = _scene_config(cfg)
    os.makedirs(cfg.out, exist_ok=True)

    with timer.stage("generate"):
        scene = generate_scene(derive_seed(cfg.seed, "scene"), scene_cfg)
    if cfg.augment:
        with timer.stage("build-database"):
            db = _build_database(cfg, scene_cfg)
        with timer.stage("augment"):
            scene = augment_scene(
                scene,
                db,
                AugmentConfig(alpha=cfg.alpha, max_paste=cfg.max_paste),
                derive_seed(cfg.seed, "augment"),
            )
    with timer.stage("voxelize"):
        voxels = voxelize(
            scene.cloud, VoxelConfig(cfg.voxel_size, bounds=scene_cfg.bounds)
        )
    with timer.stage("pyramids"):
        pyramids = [generate_pyramid(img, cfg.levels) for img in scene.images]
    with timer.stage("params"):
        if cfg.params_path:
            params = load_params(cfg.params_path)
        else:
            params = make_params(
                np.random.default_rng(derive_seed(cfg.seed, "params")),
                heads=cfg.heads,
                points=cfg.points,
                img_channels=pyramids[0].levels[0].d,
                out_channels=voxels.feature_dim,
                random_sampling=True,
            )
    with timer.stage("dropout"):
        keep = cfg.camera_count if cfg.keep_count < 0 else cfg.keep_count
        mask = make_dropout_mask(
            cfg.camera_count, keep, derive_seed(cfg.seed, "dropout")
        )
    with timer.stage("fuse"):
        fused = fuse_scene(voxels, pyramids, scene.rig, params, mask, cfg.workers)

    with timer.stage("write"):
        write_scene(os.path.join(cfg.out, "scene"), scene)
        save_params(os.path.join(cfg.out, "params.dcfa"), params)
        write_fused_csv(os.path.join(cfg.out, "fused.csv"), fused)
        norms = np.linalg.norm(fused.fused - voxels.features, axis=1)
        n = len(voxels)
        provenance = np.where(fused.contributed, fused.cameras, -1)
        metrics = {
            "seed": cfg.seed,
            "augmented": cfg.augment,
            "point_count": scene.cloud.count,
            "voxel_count": n,
            "in_view_fraction": float(np.count_nonzero(fused.cameras >= 0) / n)
            if n
            else 0.0,
            "camera_histogram": _histogram(fused.cameras),
            "provenance_histogram": _histogram(provenance),
            "contributed_count": int(fused.contributed.sum()),
            "kept_cameras": [int(b) for b in mask.keep],
            "keep_count": mask.kept_count,
            "image_contribution_norm_max": float(norms.max()) if n else 0.0,
            "image_contribution_norm_mean": float(norms.mean()) if n else 0.0,
            "fused_checksum": hashlib.sha256(fused.fused.tobytes()).hexdigest(),
        }
        _write_json(os.path.join(cfg.out, "metrics.json"), metrics)

    _write_json(os.path.join(cfg.out, "timings.json"), timer.seconds)
    return 0


def cmd_augment(cfg: RunConfig) -> int:
    timer = _StageTimer()
    scene_cfg = _scene_config(cfg)
    os.makedirs(cfg.out, exist_ok=True)

    with timer.stage("generate"):
        scene = generate_scene(derive_seed(cfg.seed, "scene"), scene_cfg)
    with timer.stage("build-database"):
        db = _build_database(cfg, scene_cfg)
    with timer.stage("augment"):
        augmented = augment_scene(
            scene,
            db,
            AugmentConfig(alpha=cfg.alpha, max_paste=cfg.max_paste),
            derive_seed(cfg.seed, "augment"),
        )
    with timer.stage("write"):
        write_scene(os.path.join(cfg.out, "input"), scene)
        write_scene(os.path.join(cfg.out, "augmented"), augmented)
        pasted = augmented.annotations[len(scene.annotations):]
        metrics = {
            "seed": cfg.seed,
            "alpha": cfg.alpha,
            "input_points": scene.cloud.count,
            "output_points": augmented.cloud.count,
            "pasted_objects": len(pasted),
            "pasted_per_category": {
                cat: sum(1 for a in pasted if a.category == cat)
                for cat in sorted({a.category for a in pasted})
            },
            "database_objects": db.total,
        }
        _write_json(os.path.join(cfg.out, "metrics.json"), metrics)
    _write_json(os.path.join(cfg.out, "timings.json"), timer.seconds)
    return 0


def cmd_gtdb(cfg: RunConfig) -> int:
    timer = _StageTimer()
    scene_cfg = _scene_config(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    with timer.stage("build-database"):
        db = _build_database(cfg, scene_cfg)
    with timer.stage("write"):
        write_object_database(os.path.join(cfg.out, "db"), db)
        metrics = {
            "seed": cfg.seed,
            "scenes": cfg.db_scenes,
            "objects": db.total,
            "per_category": {
                cat: len(objs) for cat, objs in sorted(db.objects.items())
            },
        }
        _write_json(os.path.join(cfg.out, "metrics.json"), metrics)
    _write_json(os.path.join(cfg.out, "timings.json"), timer.seconds)
    return 0


def _time_parallel_fuse(cfg: RunConfig) -> Dict[str, float]:
    """Optional extra: fuse_scene serial vs thread-pool wall-clock."""
    scene_cfg = _scene_config(cfg)
    scene = generate_scene(derive_seed(cfg.seed, "scene"), scene_cfg)
    voxels = voxelize(scene.cloud, VoxelConfig(cfg.voxel_size, bounds=scene_cfg.bounds))
    pyramids = [generate_pyramid(img, cfg.levels) for img in scene.images]
    params = make_params(
        np.random.default_rng(derive_seed(cfg.seed, "params")),
        heads=cfg.heads,
        points=cfg.points,
        img_channels=pyramids[0].levels[0].d,
        out_channels=voxels.feature_dim,
        random_sampling=True,
    )
    mask = make_dropout_mask(cfg.camera_count, cfg.camera_count, 0)
    out: Dict[str, float] = {"workers": float(cfg.parallel_workers)}
    for label, workers in (("serial_s", 0), ("parallel_s", cfg.parallel_workers)):
        samples = []
        for _ in range(5):
            start = time.perf_counter()
            fuse_scene(voxels, pyramids, scene.rig, params, mask, workers)
            samples.append(time.perf_counter() - start)
        out[label] = float(np.median(samples))
    return out


def cmd_bench(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    results = run_complexity_sweep(
        sizes=[(s, s) for s in cfg.bench_sizes],
        n_voxels=cfg.n_voxels,
        heads=cfg.heads,
        points=cfg.points,
        reps=cfg.bench_reps,
        seed=derive_seed(cfg.seed, "bench"),
    )
    summary = sweep_summary(results)
    write_bench_csv(os.path.join(cfg.out, "bench.csv"), results)
    payload = {
        "rows": [
            {
                "operator": r.operator,
                "h": r.h,
                "w": r.w,
                "N": r.n_voxels,
                "M": r.heads,
                "K": r.points,
                "median_s": r.median_s,
                "iqr_s": r.iqr_s,
                "reps": r.reps,
                "inner_loops": r.inner_loops,
            }
            for r in results
        ],
        "summary": {
            "areas": summary["areas"],
            "deform_spread": summary["deform_spread"],
            "dense_scaling": summary["dense_scaling"],
            "dense_over_deform": {
                str(k): v for k, v in summary["dense_over_deform"].items()
            },
            "ratio_inversions": summary["ratio_inversions"],
            "ratio_monotone": summary["ratio_monotone"],
        },
    }
    if cfg.parallel_workers > 0:
        payload["parallel_fuse"] = _time_parallel_fuse(cfg)
    _write_json(os.path.join(cfg.out, "bench_summary.json"), payload)
    if not summary["ratio_monotone"]:
        sys.stderr.write("benchmark monotonicity invariant failed\n")
        return 3
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxfuse",
        description="Synthetic multi-camera LiDAR fusion pipeline and benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--config", default=None, help="key-value config file")
        sp.add_argument("--out", default=None, help="output directory")

    def scene_shape(sp):
        sp.add_argument("--camera-count", dest="camera_count", type=int, default=None)
        sp.add_argument("--box-count", dest="box_count", type=int, default=None)
        sp.add_argument(
            "--points-per-box", dest="points_per_box", type=int, default=None
        )
        sp.add_argument(
            "--ground-points", dest="ground_points", type=int, default=None
        )

    sp = sub.add_parser("selftest", help="run the invariant suite")
    common(sp)
    sp.add_argument(
        "--inject-fault",
        dest="inject_fault",
        choices=VALID_FAULTS,
        default=None,
        help="deliberately corrupt one computation to prove detection",
    )

    sp = sub.add_parser("pipeline", help="scene -> voxels -> fused features")
    common(sp)
    scene_shape(sp)
    sp.add_argument("--keep-count", dest="keep_count", type=int, default=None)
    sp.add_argument("--levels", type=int, default=None)
    sp.add_argument("--voxel-size", dest="voxel_size", type=_parse_vec3, default=None)
    sp.add_argument("--heads", type=int, default=None)
    sp.add_argument("--points", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--params", dest="params_path", default=None)
    sp.add_argument(
        "--augment", dest="augment", action="store_true", default=None,
        help="paste database objects before voxelizing",
    )
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--max-paste", dest="max_paste", type=int, default=None)
    sp.add_argument("--db-scenes", dest="db_scenes", type=int, default=None)

    sp = sub.add_parser("augment", help="write a scene and its augmented twin")
    common(sp)
    scene_shape(sp)
    sp.add_argument("--voxel-size", dest="voxel_size", type=_parse_vec3, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--max-paste", dest="max_paste", type=int, default=None)
    sp.add_argument("--db-scenes", dest="db_scenes", type=int, default=None)

    sp = sub.add_parser("bench", help="complexity sweep over map sizes")
    common(sp)
    sp.add_argument("--sizes", dest="bench_sizes", type=_parse_sizes, default=None)
    sp.add_argument("--reps", dest="bench_reps", type=int, default=None)
    sp.add_argument("--n-voxels", dest="n_voxels", type=int, default=None)
    sp.add_argument("--heads", type=int, default=None)
    sp.add_argument("--points", type=int, default=None)
    sp.add_argument(
        "--parallel-workers",
        dest="parallel_workers",
        type=int,
        default=None,
        help="also time the threaded fuse_scene path, reported separately",
    )

    sp = sub.add_parser("gtdb", help="build an object database from scenes")
    common(sp)
    scene_shape(sp)
    sp.add_argument("--db-scenes", dest="db_scenes", type=int, default=None)
    return parser


_COMMANDS = {
    "selftest": cmd_selftest,
    "pipeline": cmd_pipeline,
    "augment": cmd_augment,
    "bench": cmd_bench,
    "gtdb": cmd_gtdb,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    return _COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
