"""7-DoF upright boxes (center, size, yaw) and their BEV footprint tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnops import as_finite_f64

Array = np.ndarray


@dataclass(frozen=True)
class Box:
    """Upright box: center (x, y, z), full size (l, w, h), yaw about +z."""

    center: Array
    size: Array
    yaw: float

    def __post_init__(self):
        c = as_finite_f64(self.center, "box center")
        s = as_finite_f64(self.size, "box size")
        if c.shape != (3,) or s.shape != (3,):
            raise ValueError("box center and size must be 3-vectors")
        if np.any(s <= 0):
            raise ValueError("box size must be positive along every axis")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", float(self.yaw))


def yaw_matrix(yaw: float) -> Array:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box: Box) -> Array:
    """The 8 corners, (8, 3), in a fixed order (x varies fastest)."""
    half = box.size / 2.0
    signs = np.array(
        [
            [-1, -1, -1], [1, -1, -1], [-1, 1, -1], [1, 1, -1],
            [-1, -1, 1], [1, -1, 1], [-1, 1, 1], [1, 1, 1],
        ],
        dtype=np.float64,
    )
    return (yaw_matrix(box.yaw) @ (signs * half).T).T + box.center


def bev_rect(box: Box) -> Array:
    """BEV footprint corners, (4, 2), counter-clockwise."""
    hx, hy = box.size[0] / 2.0, box.size[1] / 2.0
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def points_in_box(box: Box, points) -> Array:
    """Boolean mask of points inside the box (boundary inclusive)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError("points must be (n, >=3)")
    local = (pts[:, :3] - box.center) @ yaw_matrix(box.yaw)
    half = box.size / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def bev_overlaps(a: Box, b: Box) -> bool:
    """True when the BEV footprints overlap with positive area.

    Separating-axis test over the four edge normals of the two rectangles;
    footprints that merely touch along an edge or corner do not count as
    overlapping.
    """
    ra = bev_rect(a)
    rb = bev_rect(b)
    for rect in (ra, rb):
        edges = np.roll(rect, -1, axis=0) - rect
        for ex, ey in edges[:2]:  # opposite edges share an axis
            axis = np.array([-ey, ex])
            pa = ra @ axis
            pb = rb @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return False
    return True
