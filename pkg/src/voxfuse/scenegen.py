"""Synthetic multi-camera scenes for exercising the fusion stack.

A scene is a ring of outward-facing cameras, a handful of flat-colored boxes
with points sampled on their faces, and a ground plane. Box silhouettes are
painted into each camera image in far-to-near painter's order, so image
content and projection geometry agree by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .boxes import Box, bev_overlaps, box_corners
from .geometry import CameraCalibration, CameraRig, project_point_raw
from .nnops import FeatureMap
from .voxels import PointCloud

Array = np.ndarray


class GenerationError(RuntimeError):
    """Raised when a scene cannot be generated under its config."""


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for generate_scene; defaults give a desk-scale 6-camera scene."""

    camera_count: int = 6
    box_count: int = 8
    points_per_box: int = 600
    ground_points: int = 6000
    image_width: int = 160
    image_height: int = 120
    focal: float = 90.0
    bounds: tuple = (-12.0, -12.0, -0.5, 12.0, 12.0, 3.5)
    camera_radius: float = 0.4
    camera_height: float = 1.5
    box_distance: tuple = (3.0, 9.0)
    box_length: tuple = (1.5, 3.5)
    box_width: tuple = (1.2, 2.4)
    box_height: tuple = (1.0, 2.2)
    placement_retries: int = 60

    def __post_init__(self):
        if self.camera_count < 1:
            raise ValueError("camera_count must be >= 1")
        if self.box_count < 0 or self.points_per_box < 1 or self.ground_points < 0:
            raise ValueError("box/point counts out of range")
        if self.image_width < 8 or self.image_height < 8 or self.focal <= 0:
            raise ValueError("image dimensions/focal out of range")


# Flat box colors with a unique dominant channel each; background is neutral
# gray, so mixing a box color with background never moves its argmax.
BOX_PALETTE = (
    (0.90, 0.15, 0.10),
    (0.10, 0.85, 0.15),
    (0.10, 0.20, 0.90),
    (0.85, 0.60, 0.10),
    (0.60, 0.10, 0.85),
    (0.10, 0.75, 0.60),
)
BACKGROUND = 0.5
CATEGORIES = ("car", "truck", "cart")


@dataclass(frozen=True)
class Annotation:
    box: Box
    category: str
    color: tuple = field(default=(BACKGROUND,) * 3)


@dataclass(frozen=True)
class SceneSample:
    """One synthetic frame: cloud, per-camera images, rig, annotations."""

    cloud: PointCloud
    images: tuple  # FeatureMap per camera
    rig: CameraRig
    annotations: tuple

    def __post_init__(self):
        if len(self.images) != len(self.rig.cameras):
            raise ValueError("need exactly one image per rig camera")
        for img, cam in zip(self.images, self.rig.cameras):
            if (img.h, img.w) != (cam.image_height, cam.image_width):
                raise ValueError("image dims must match the camera calibration")


@dataclass(frozen=True)
class FeaturePyramid:
    """Feature maps from full resolution downward plus their scale factors.

    Level l has nominal scale 2^-l; dims follow truncating 2x2 pooling, i.e.
    dims_l = floor(dims_{l-1} / 2), which matches ceil(dims_0 * scale) until
    an odd dimension is halved.
    """

    levels: tuple
    scales: tuple

    def __post_init__(self):
        levels = tuple(self.levels)
        scales = tuple(float(s) for s in self.scales)
        if not levels or len(levels) != len(scales):
            raise ValueError("need one scale per level")
        if scales[0] != 1.0 or any(b >= a for a, b in zip(scales, scales[1:])):
            raise ValueError("scales must start at 1.0 and strictly decrease")
        d = levels[0].d
        prev = None
        for fm in levels:
            if fm.d != d:
                raise ValueError("all levels must share the channel count")
            if prev is not None:
                if (fm.h, fm.w) != (prev.h // 2, prev.w // 2):
                    raise ValueError("level dims must be floor(previous / 2)")
            prev = fm
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "scales", scales)


def generate_pyramid(image: FeatureMap, levels: int) -> FeaturePyramid:
    """Average-pooling pyramid: level 0 is the image, each next level 2x2
    mean-pools the previous one (odd trailing rows/cols are truncated)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    maps = [image]
    for _ in range(1, levels):
        prev = maps[-1].data
        h2, w2 = prev.shape[0] // 2, prev.shape[1] // 2
        if h2 < 1 or w2 < 1:
            raise ValueError("image too small for the requested level count")
        pooled = prev[: 2 * h2, : 2 * w2]
        pooled = pooled.reshape(h2, 2, w2, 2, prev.shape[2]).mean(axis=(1, 3))
        maps.append(FeatureMap(pooled))
    scales = tuple(2.0 ** -l for l in range(levels))
    return FeaturePyramid(levels=tuple(maps), scales=scales)


def ring_rig(cfg: SceneConfig) -> CameraRig:
    """Outward-facing cameras evenly spaced in yaw, priority in index order."""
    k = np.array(
        [
            [cfg.focal, 0.0, (cfg.image_width - 1) / 2.0],
            [0.0, cfg.focal, (cfg.image_height - 1) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    cams = []
    for i in range(cfg.camera_count):
        yaw = 2.0 * math.pi * i / cfg.camera_count
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        rot = np.stack([right, down, fwd])  # rows: camera x, y, z in lidar frame
        center = fwd * cfg.camera_radius + np.array([0.0, 0.0, cfg.camera_height])
        t = np.eye(4)
        t[:3, :3] = rot
        t[:3, 3] = -rot @ center
        cams.append(
            CameraCalibration(
                rect_rot=np.eye(3),
                intrinsics=k,
                t_cam_lidar=t,
                image_width=cfg.image_width,
                image_height=cfg.image_height,
            )
        )
    return CameraRig(cameras=tuple(cams), priority=tuple(range(cfg.camera_count)))


def _convex_hull(points: Array) -> Array:
    """Monotone-chain convex hull of (n, 2) points, counter-clockwise."""
    pts = sorted(map(tuple, points))
    if len(pts) <= 2:
        return np.asarray(pts, dtype=np.float64)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1], dtype=np.float64)


def paint_hull(img: Array, hull: Array, color) -> None:
    """Fill pixels whose centers lie inside a convex CCW polygon (in place)."""
    if hull.shape[0] < 3:
        return
    h, w, _ = img.shape
    x0 = max(0, int(math.floor(hull[:, 0].min())))
    x1 = min(w - 1, int(math.ceil(hull[:, 0].max())))
    y0 = max(0, int(math.floor(hull[:, 1].min())))
    y1 = min(h - 1, int(math.ceil(hull[:, 1].max())))
    if x1 < x0 or y1 < y0:
        return
    xs = np.arange(x0, x1 + 1, dtype=np.float64)
    ys = np.arange(y0, y1 + 1, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    for i in range(hull.shape[0]):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % hull.shape[0]]
        cross = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
        inside &= cross >= -1e-9
    img[y0 : y1 + 1, x0 : x1 + 1][inside] = color


def render_images(rig: CameraRig, annotations) -> tuple:
    """Paint box silhouettes over gray, far-to-near per camera.

    A box is painted only when all 8 corners project in front of the camera;
    the painted region is the convex hull of the projected corners.
    """
    images = []
    for cam in rig.cameras:
        img = np.full((cam.image_height, cam.image_width, 3), BACKGROUND)
        drawable = []
        for ann in annotations:
            raws = [project_point_raw(cam, corner) for corner in box_corners(ann.box)]
            if any(r is None for r in raws):
                continue
            pix = np.array([[r[0], r[1]] for r in raws])
            center_raw = project_point_raw(cam, ann.box.center)
            if center_raw is None:
                continue
            drawable.append((center_raw[2], pix, ann.color))
        drawable.sort(key=lambda item: -item[0])  # far first, near overwrites
        for _, pix, color in drawable:
            paint_hull(img, _convex_hull(pix), color)
        images.append(FeatureMap(img))
    return tuple(images)


def _sample_box_points(rng: np.random.Generator, box: Box, n: int) -> Array:
    """Points uniform over the box surface (area-weighted faces), kept a hair
    inside the boundary so the exact point-in-box test always passes."""
    half = box.size * 0.5 * (1.0 - 1e-9)
    lx, ly, lz = box.size
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    axis = faces // 2
    sign = np.where(faces % 2 == 0, -1.0, 1.0)
    local[np.arange(n), axis] = sign * half[axis]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def generate_scene(seed, config: Optional[SceneConfig] = None) -> SceneSample:
    """Deterministic synthetic scene for a seed.

    Boxes are placed collision-free in BEV (bounded retries, else
    GenerationError), points are sampled on box faces and the ground plane,
    and camera images are painted to match the projection geometry.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    rig = ring_rig(cfg)

    x0, y0, z0, x1, y1, z1 = cfg.bounds
    boxes = []
    tries = 0
    budget = max(1, cfg.placement_retries) * max(1, cfg.box_count)
    while len(boxes) < cfg.box_count:
        if tries >= budget:
            raise GenerationError(
                f"could not place {cfg.box_count} collision-free boxes "
                f"in {budget} attempts"
            )
        tries += 1
        dist = rng.uniform(*cfg.box_distance)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        size = np.array(
            [
                rng.uniform(*cfg.box_length),
                rng.uniform(*cfg.box_width),
                rng.uniform(*cfg.box_height),
            ]
        )
        center = np.array([dist * math.cos(ang), dist * math.sin(ang), size[2] / 2.0])
        cand = Box(center=center, size=size, yaw=rng.uniform(0.0, 2.0 * math.pi))
        corners = box_corners(cand)
        if (
            corners[:, 0].min() < x0 or corners[:, 0].max() > x1
            or corners[:, 1].min() < y0 or corners[:, 1].max() > y1
            or corners[:, 2].min() < z0 or corners[:, 2].max() > z1
        ):
            continue
        if any(bev_overlaps(cand, b) for b in boxes):
            continue
        boxes.append(cand)

    annotations = tuple(
        Annotation(
            box=b,
            category=CATEGORIES[i % len(CATEGORIES)],
            color=BOX_PALETTE[i % len(BOX_PALETTE)],
        )
        for i, b in enumerate(boxes)
    )

    rows = []
    if cfg.ground_points:
        gx = rng.uniform(x0 * 0.95, x1 * 0.95, size=cfg.ground_points)
        gy = rng.uniform(y0 * 0.95, y1 * 0.95, size=cfg.ground_points)
        gi = rng.uniform(0.0, 1.0, size=cfg.ground_points)
        rows.append(np.column_stack([gx, gy, np.zeros(cfg.ground_points), gi]))
    for b in boxes:
        pts = _sample_box_points(rng, b, cfg.points_per_box)
        inten = rng.uniform(0.0, 1.0, size=cfg.points_per_box)
        rows.append(np.column_stack([pts, inten]))
    cloud = PointCloud(np.vstack(rows) if rows else np.zeros((0, 4)))

    images = render_images(rig, annotations)
    return SceneSample(cloud=cloud, images=images, rig=rig, annotations=annotations)
