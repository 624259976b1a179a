"""Camera calibration, lidar-to-image projection, and camera selection.

A lidar-frame point V projects to homogeneous pixel coordinates through
`intrinsics @ rect_rot @ (t_cam_lidar @ V)`; the perspective divide by the
third component yields the pixel, and that third component is the depth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .nnops import as_finite_f64

Array = np.ndarray

#: Depths at or below this are treated as behind the camera.
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraCalibration:
    """One camera: rectifying rotation, intrinsics, extrinsics, image size."""

    rect_rot: Array      # (3, 3) rotation applied after the extrinsic
    intrinsics: Array    # (3, 3) upper-triangular, [2, 2] == 1
    t_cam_lidar: Array   # (4, 4) rigid lidar -> camera transform
    image_width: int
    image_height: int

    def __post_init__(self):
        r = as_finite_f64(self.rect_rot, "rect_rot")
        k = as_finite_f64(self.intrinsics, "intrinsics")
        t = as_finite_f64(self.t_cam_lidar, "t_cam_lidar")
        if r.shape != (3, 3) or k.shape != (3, 3) or t.shape != (4, 4):
            raise ValueError("rect_rot/intrinsics must be 3x3 and t_cam_lidar 4x4")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("rect_rot must be orthonormal (within 1e-9) with det +1")
        if k[1, 0] != 0.0 or k[2, 0] != 0.0 or k[2, 1] != 0.0:
            raise ValueError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0 or k[2, 2] != 1.0:
            raise ValueError("intrinsics needs positive focal entries and [2,2] == 1")
        if not np.array_equal(t[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("t_cam_lidar bottom row must be (0, 0, 0, 1)")
        if int(self.image_width) < 1 or int(self.image_height) < 1:
            raise ValueError("image dimensions must be >= 1")
        object.__setattr__(self, "rect_rot", np.ascontiguousarray(r))
        object.__setattr__(self, "intrinsics", np.ascontiguousarray(k))
        object.__setattr__(self, "t_cam_lidar", np.ascontiguousarray(t))
        object.__setattr__(self, "image_width", int(self.image_width))
        object.__setattr__(self, "image_height", int(self.image_height))


@dataclass(frozen=True)
class CameraRig:
    """An ordered set of cameras plus the fetch-priority permutation."""

    cameras: tuple
    priority: tuple

    def __post_init__(self):
        cams = tuple(self.cameras)
        prio = tuple(int(p) for p in self.priority)
        if not cams:
            raise ValueError("rig needs at least one camera")
        if sorted(prio) != list(range(len(cams))):
            raise ValueError("priority must be a permutation of camera indices")
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "priority", prio)


@dataclass(frozen=True)
class ProjectionResult:
    """In-view projection: owning camera, pixel (x, y), and depth in meters."""

    camera_index: int
    pixel: tuple
    depth: float

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("projection depth must be positive")


def project_point_raw(calib: CameraCalibration, point) -> Optional[tuple]:
    """Project without the image-bounds test.

    Returns (x, y, depth) even when the pixel falls outside the image, or
    None when the point is at or behind the camera plane (depth <= 1e-9).
    Used for patch bounds and polygon rasterization, where off-screen corner
    positions still matter.
    """
    v = as_finite_f64(point, "point")
    if v.shape != (3,):
        raise ValueError("point must be a 3-vector")
    cam = calib.t_cam_lidar @ np.append(v, 1.0)
    hom = calib.intrinsics @ (calib.rect_rot @ cam[:3])
    depth = float(hom[2])
    if depth <= MIN_DEPTH:
        return None
    return float(hom[0] / depth), float(hom[1] / depth), depth


def project_point(
    calib: CameraCalibration, point, camera_index: int = 0
) -> Optional[ProjectionResult]:
    """Project a lidar-frame point; None when behind or outside the image.

    In-view means 0 <= x <= w-1 and 0 <= y <= h-1 (closed interval, so the
    border pixels count).
    """
    raw = project_point_raw(calib, point)
    if raw is None:
        return None
    x, y, depth = raw
    if not (0.0 <= x <= calib.image_width - 1 and 0.0 <= y <= calib.image_height - 1):
        return None
    return ProjectionResult(camera_index=camera_index, pixel=(x, y), depth=depth)


def select_camera(rig: CameraRig, point) -> Optional[ProjectionResult]:
    """First in-view camera in rig priority order, or None."""
    for idx in rig.priority:
        res = project_point(rig.cameras[idx], point, camera_index=idx)
        if res is not None:
            return res
    return None


@dataclass(frozen=True)
class ReferencePoints:
    """Per-pyramid-level reference pixels for one voxel center."""

    camera_index: int
    depth: float
    levels: tuple  # ((x, y), ...) one per pyramid level


def check_scales(scales: Sequence[float]) -> tuple:
    scales = tuple(float(s) for s in scales)
    if not scales or scales[0] != 1.0:
        raise ValueError("scale factors must start at 1.0 for level 0")
    if any(b >= a for a, b in zip(scales, scales[1:])) or any(s <= 0 for s in scales):
        raise ValueError("scale factors must be positive and strictly decreasing")
    return scales


def voxel_center_to_reference(
    center, rig: CameraRig, scales: Sequence[float]
) -> Optional[ReferencePoints]:
    """Priority camera + per-level reference points for one voxel center.

    Level-l references are the full-resolution pixel coordinates multiplied
    by that level's scale factor. Returns None when no camera sees the point.
    """
    scales = check_scales(scales)
    res = select_camera(rig, center)
    if res is None:
        return None
    x, y = res.pixel
    levels = tuple((x * s, y * s) for s in scales)
    return ReferencePoints(camera_index=res.camera_index, depth=res.depth, levels=levels)
