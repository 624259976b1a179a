"""Dynamic voxelization: only occupied cells are ever materialized.

Points are bucketed with floor((p - origin) / voxel_size) over a half-open
range; a voxel's feature is the per-cell mean of the point feature columns
concatenated with the mean offset of its points from the cell center.
Per-cell means use math.fsum, which is exactly rounded, so the output is
bit-identical under any permutation of the input points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnops import as_finite_f64

Array = np.ndarray


@dataclass(frozen=True)
class PointCloud:
    """(n, 3 + k) float64 rows: x, y, z followed by k extra feature columns."""

    points: Array

    def __post_init__(self):
        pts = as_finite_f64(self.points, "points")
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError("points must be (n, >=3): x, y, z plus features")
        object.__setattr__(self, "points", np.ascontiguousarray(pts))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def extra_dims(self) -> int:
        return self.points.shape[1] - 3


@dataclass(frozen=True)
class VoxelConfig:
    """Voxel edge lengths and the axis-aligned crop range.

    The grid keeps only whole cells: cells_per_axis = floor(extent / size),
    so a trailing sliver of the range narrower than one voxel is treated as
    out of range. That keeps every cell center strictly inside the range.
    """

    voxel_size: tuple
    bounds: tuple  # (x0, y0, z0, x1, y1, z1)

    def __post_init__(self):
        size = tuple(float(s) for s in self.voxel_size)
        bnd = tuple(float(b) for b in self.bounds)
        if len(size) != 3 or any(not math.isfinite(s) or s <= 0 for s in size):
            raise ValueError("voxel_size must be three positive reals")
        if len(bnd) != 6 or any(not math.isfinite(b) for b in bnd):
            raise ValueError("bounds must be six finite reals")
        if any(bnd[i + 3] <= bnd[i] for i in range(3)):
            raise ValueError("bounds must be non-degenerate (upper > lower)")
        object.__setattr__(self, "voxel_size", size)
        object.__setattr__(self, "bounds", bnd)
        # 1e-9 relative slack so an exact multiple does not lose its last cell
        # to floating-point noise in the division.
        cells = tuple(
            int(math.floor((bnd[i + 3] - bnd[i]) / size[i] + 1e-9)) for i in range(3)
        )
        if any(n < 1 for n in cells):
            raise ValueError("range must hold at least one whole voxel per axis")
        object.__setattr__(self, "grid_cells", cells)

    grid_cells: tuple = None  # filled in __post_init__

    @property
    def origin(self) -> Array:
        return np.array(self.bounds[:3])


@dataclass(frozen=True)
class VoxelSet:
    """Occupied cells, ordered lexicographically by (ix, iy, iz).

    indices: (j, 3) int64 cell indices; centers: (j, 3) cell centers;
    features: (j, c) with c = extra point features + 3 mean-offset channels;
    counts: (j,) member point counts.
    """

    indices: Array
    centers: Array
    features: Array
    counts: Array

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.indices, dtype=np.int64))
        ctr = as_finite_f64(self.centers, "centers")
        feat = as_finite_f64(self.features, "features")
        cnt = np.ascontiguousarray(np.asarray(self.counts, dtype=np.int64))
        j = idx.shape[0]
        if idx.ndim != 2 or idx.shape[1] != 3:
            raise ValueError("indices must be (j, 3)")
        if ctr.shape != (j, 3) or feat.shape[0] != j or cnt.shape != (j,):
            raise ValueError("centers/features/counts must share the index count")
        if np.any(cnt < 1):
            raise ValueError("every stored voxel must be non-empty")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "centers", np.ascontiguousarray(ctr))
        object.__setattr__(self, "features", np.ascontiguousarray(feat))
        object.__setattr__(self, "counts", cnt)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def _fsum_mean(column) -> float:
    return math.fsum(column) / len(column)


def voxelize(cloud: PointCloud, cfg: VoxelConfig) -> VoxelSet:
    """Bucket a point cloud into occupied voxels.

    Only non-empty cells appear. The feature vector per cell is
    [mean extra features..., mean (p - center) offsets (3)], so its length is
    cloud.extra_dims + 3.
    """
    pts = cloud.points
    size = np.array(cfg.voxel_size)
    lo = cfg.origin
    ncells = np.array(cfg.grid_cells)
    hi = lo + ncells * size

    xyz = pts[:, :3]
    inside = np.all((xyz >= lo) & (xyz < hi), axis=1)
    kept = pts[inside]
    c = cloud.extra_dims + 3
    if kept.shape[0] == 0:
        return VoxelSet(
            indices=np.zeros((0, 3), dtype=np.int64),
            centers=np.zeros((0, 3)),
            features=np.zeros((0, c)),
            counts=np.zeros(0, dtype=np.int64),
        )

    cell = np.floor((kept[:, :3] - lo) / size).astype(np.int64)
    np.clip(cell, 0, ncells - 1, out=cell)
    # Linear index with x major so sorting it equals lexicographic (ix, iy, iz).
    lin = (cell[:, 0] * ncells[1] + cell[:, 1]) * ncells[2] + cell[:, 2]
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    starts = np.flatnonzero(np.r_[True, lin_sorted[1:] != lin_sorted[:-1]])
    ends = np.r_[starts[1:], lin_sorted.size]

    j = starts.size
    indices = np.empty((j, 3), dtype=np.int64)
    centers = np.empty((j, 3))
    features = np.empty((j, c))
    counts = np.empty(j, dtype=np.int64)
    for row, (s, e) in enumerate(zip(starts, ends)):
        members = kept[order[s:e]]
        idx = cell[order[s]]
        center = lo + (idx + 0.5) * size
        indices[row] = idx
        centers[row] = center
        counts[row] = e - s
        offs = members[:, :3] - center
        for col in range(cloud.extra_dims):
            features[row, col] = _fsum_mean(members[:, 3 + col].tolist())
        for axis in range(3):
            features[row, cloud.extra_dims + axis] = _fsum_mean(offs[:, axis].tolist())
    return VoxelSet(indices=indices, centers=centers, features=features, counts=counts)
