"""Microbenchmark harness for the two attention operators.

Compares the dense-attention baseline (cost grows with map area) against the
deformable operator (cost fixed by head/point counts) over a sweep of map
sizes at a fixed voxel count. Timing uses median-of-repetitions with warm-up
rather than the mean, so a stray scheduler hiccup does not skew the result.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .fusion import (
    dense_attention_batch,
    image_contribution_batch,
    make_dense_params,
    make_params,
)
from .nnops import FeatureMap

CSV_HEADER = (
    "operator", "h", "w", "N", "M", "K", "median_s", "iqr_s", "reps", "inner_loops",
)

# Each timed sample is padded with inner loops until it spans at least this
# many seconds, so clock granularity cannot produce a zero median.
_MIN_SAMPLE_SECONDS = 2.5e-3


@dataclass(frozen=True)
class BenchResult:
    operator: str
    h: int
    w: int
    n_voxels: int
    heads: int
    points: int
    median_s: float
    iqr_s: float
    reps: int
    # When a single call is too fast for the clock, each timed sample runs
    # this many back-to-back calls and reports the per-call time.
    inner_loops: int = 1

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0:
            raise ValueError("map dimensions must be positive")
        if self.n_voxels <= 0 or self.heads <= 0 or self.points <= 0:
            raise ValueError("N, M, K must be positive")
        if self.reps < 10:
            raise ValueError("need at least 10 repetitions for a stable median")
        if not (self.median_s > 0.0):
            raise ValueError("median must be positive")
        if self.iqr_s < 0.0 or not math.isfinite(self.iqr_s):
            raise ValueError("bad interquartile range")
        if self.inner_loops < 1:
            raise ValueError("inner_loops must be at least 1")

    @property
    def area(self) -> int:
        return self.h * self.w


def _time_callable(
    fn: Callable[[], object], reps: int, warmup: int
) -> Tuple[float, float, int]:
    """Median and IQR of per-call seconds over `reps` samples, plus loop count.

    Runs `warmup` untimed calls first, then picks an inner-loop count from a
    single probe so every timed sample stays above the clock-resolution floor.
    """
    for _ in range(warmup):
        fn()
    probe_start = time.perf_counter()
    fn()
    probe = time.perf_counter() - probe_start
    loops = max(1, min(1000, int(math.ceil(_MIN_SAMPLE_SECONDS / max(probe, 1e-9)))))
    samples = np.empty(reps)
    for r in range(reps):
        start = time.perf_counter()
        for _ in range(loops):
            fn()
        samples[r] = (time.perf_counter() - start) / loops
    q25, q50, q75 = np.percentile(samples, [25.0, 50.0, 75.0])
    return float(q50), float(q75 - q25), loops


def _bench_inputs(h: int, w: int, n: int, channels: int, rng: np.random.Generator):
    fmap = FeatureMap(rng.standard_normal((h, w, channels)))
    voxel_feats = rng.standard_normal((n, channels))
    refs = np.column_stack(
        [rng.uniform(0.0, w - 1.0, size=n), rng.uniform(0.0, h - 1.0, size=n)]
    )
    return fmap, refs, voxel_feats


def run_complexity_sweep(
    sizes: Sequence[Tuple[int, int]] = ((64, 64), (128, 128), (256, 256), (512, 512)),
    n_voxels: int = 10_000,
    heads: int = 4,
    points: int = 8,
    reps: int = 10,
    channels: int = 8,
    warmup: int = 2,
    seed: int = 2024,
) -> List[BenchResult]:
    """Time both operators at every map size; N, M, K stay fixed.

    Every benchmarked call is also checked for finite output once, so the
    sweep doubles as a stress test of the kernels on large inputs.
    """
    if reps < 10:
        raise ValueError("need at least 10 repetitions for a stable median")
    rng = np.random.default_rng(seed)
    deform_params = make_params(
        rng, heads=heads, points=points, img_channels=channels, random_sampling=True
    )
    dense_params = make_dense_params(rng, img_channels=channels, out_channels=channels)
    results: List[BenchResult] = []
    for h, w in sizes:
        fmap, refs, voxel_feats = _bench_inputs(h, w, n_voxels, channels, rng)

        out = image_contribution_batch((fmap,), refs, voxel_feats, deform_params)
        if not np.isfinite(out).all():
            raise FloatingPointError(f"deformable output not finite at {h}x{w}")
        med, iqr, loops = _time_callable(
            lambda: image_contribution_batch((fmap,), refs, voxel_feats, deform_params),
            reps,
            warmup,
        )
        results.append(
            BenchResult(
                "deformable", h, w, n_voxels, heads, points, med, iqr, reps, loops
            )
        )

        out = dense_attention_batch(fmap, voxel_feats, dense_params)
        if not np.isfinite(out).all():
            raise FloatingPointError(f"dense output not finite at {h}x{w}")
        med, iqr, loops = _time_callable(
            lambda: dense_attention_batch(fmap, voxel_feats, dense_params),
            reps,
            warmup,
        )
        results.append(
            BenchResult("dense", h, w, n_voxels, heads, points, med, iqr, reps, loops)
        )
    return results


def _medians_by_area(results: Sequence[BenchResult], operator: str) -> Dict[int, float]:
    table = {}
    for r in results:
        if r.operator == operator:
            table[r.area] = r.median_s
    return table


def sweep_summary(results: Sequence[BenchResult]) -> Dict[str, object]:
    """Ratios and the monotonicity verdict used by the CLI and the tests.

    deform_spread: max/min deformable median across areas.
    dense_scaling: dense median at the largest area over the smallest.
    dense_over_deform: per-area ratio, ascending by area.
    ratio_monotone: non-decreasing in area, one inversion tolerated as noise.
    """
    deform = _medians_by_area(results, "deformable")
    dense = _medians_by_area(results, "dense")
    if not deform or set(deform) != set(dense):
        raise ValueError("sweep must cover both operators at the same sizes")
    areas = sorted(deform)
    spread = max(deform.values()) / min(deform.values())
    scaling = dense[areas[-1]] / dense[areas[0]]
    ratios = [dense[a] / deform[a] for a in areas]
    inversions = sum(1 for a, b in zip(ratios, ratios[1:]) if b < a)
    return {
        "areas": areas,
        "deform_spread": spread,
        "dense_scaling": scaling,
        "dense_over_deform": dict(zip(areas, ratios)),
        "ratio_inversions": inversions,
        "ratio_monotone": inversions <= 1,
    }


def write_bench_csv(path, results: Sequence[BenchResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in results:
            writer.writerow(
                [
                    r.operator,
                    r.h,
                    r.w,
                    r.n_voxels,
                    r.heads,
                    r.points,
                    repr(r.median_s),
                    repr(r.iqr_s),
                    r.reps,
                    r.inner_loops,
                ]
            )


def read_bench_csv(path) -> List[BenchResult]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected benchmark CSV header: {header}")
        for row in reader:
            op, h, w, n, m, k, med, iqr, reps, loops = row
            out.append(
                BenchResult(
                    op, int(h), int(w), int(n), int(m), int(k),
                    float(med), float(iqr), int(reps), int(loops),
                )
            )
    return out
