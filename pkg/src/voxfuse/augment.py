"""Ground-truth object database and depth-ordered paste augmentation.

Objects harvested from scenes carry their in-box points and the image patch
under their projected footprint on the priority camera. Pasting composites
patches far-to-near with `new = alpha * current + (1 - alpha) * patch`, so a
patch occluded by n later (nearer) pastes keeps a coefficient of
(1 - alpha) * alpha^n and the untouched background keeps alpha^n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .boxes import Box, bev_overlaps, box_corners, points_in_box
from .geometry import project_point_raw, select_camera
from .nnops import FeatureMap, as_finite_f64
from .scenegen import Annotation, SceneSample
from .voxels import PointCloud

Array = np.ndarray


@dataclass(frozen=True)
class ObjectSample:
    """One database entry: points, image patch, and where it came from.

    patch_bounds is the half-open (x0, y0, x1, y1) pixel window of `patch`
    on camera `camera_index`; depth is the rectified-frame z of the box
    center on that camera and is the far-to-near compositing key.
    """

    points: Array
    patch: FeatureMap
    patch_bounds: tuple
    camera_index: int
    depth: float
    box: Box
    category: str

    def __post_init__(self):
        pts = as_finite_f64(self.points, "object points")
        if pts.ndim != 2 or pts.shape[1] < 3 or pts.shape[0] < 1:
            raise ValueError("object points must be a non-empty (n, >=3) array")
        x0, y0, x1, y1 = (int(v) for v in self.patch_bounds)
        if x1 <= x0 or y1 <= y0:
            raise ValueError("patch bounds must be a non-empty half-open window")
        if (self.patch.h, self.patch.w) != (y1 - y0, x1 - x0):
            raise ValueError("patch dims must match patch bounds")
        if not self.depth > 0:
            raise ValueError("object depth must be positive")
        object.__setattr__(self, "points", np.ascontiguousarray(pts))
        object.__setattr__(self, "patch_bounds", (x0, y0, x1, y1))
        object.__setattr__(self, "camera_index", int(self.camera_index))
        object.__setattr__(self, "depth", float(self.depth))


@dataclass(frozen=True)
class ObjectDatabase:
    """Objects grouped by category."""

    objects: Dict[str, tuple]

    def __post_init__(self):
        objs = {str(k): tuple(v) for k, v in self.objects.items()}
        if any(len(v) == 0 for v in objs.values()):
            raise ValueError("database categories must be non-empty")
        object.__setattr__(self, "objects", objs)

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.objects.values())


@dataclass(frozen=True)
class AugmentConfig:
    """alpha is the surviving weight of the current image under each paste
    (alpha = 1 leaves images untouched); max_paste caps pasted objects per
    category, either one int for all or a per-category dict."""

    alpha: float = 0.6
    max_paste: object = 4
    collision_policy: str = "no-overlap"

    def __post_init__(self):
        a = float(self.alpha)
        if not (math.isfinite(a) and 0.0 < a <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.collision_policy != "no-overlap":
            raise ValueError("the only supported collision policy is 'no-overlap'")
        object.__setattr__(self, "alpha", a)

    def paste_limit(self, category: str) -> int:
        if isinstance(self.max_paste, dict):
            return int(self.max_paste.get(category, 0))
        return int(self.max_paste)


def filter_colliding_boxes(candidates: Sequence[Box], existing: Sequence[Box]) -> list:
    """Greedy acceptance in candidate order.

    A candidate is accepted when its BEV footprint has zero-area overlap with
    every existing box and every previously accepted candidate. Returns the
    accepted candidate indices.
    """
    kept_boxes = list(existing)
    accepted = []
    for i, cand in enumerate(candidates):
        if any(bev_overlaps(cand, other) for other in kept_boxes):
            continue
        accepted.append(i)
        kept_boxes.append(cand)
    return accepted


def patch_window(calib, box: Box) -> Optional[tuple]:
    """Half-open integer patch bounds of a box on one camera.

    Projects all 8 corners (skipping the box when any corner is at or behind
    the camera plane), clips the min/max pixel coordinates to the image, and
    widens to whole pixels: start = floor(min), end = floor(max) + 1.
    """
    raws = [project_point_raw(calib, c) for c in box_corners(box)]
    if any(r is None for r in raws):
        return None
    xs = [r[0] for r in raws]
    ys = [r[1] for r in raws]
    w, h = calib.image_width, calib.image_height
    min_x = min(max(min(xs), 0.0), w - 1.0)
    max_x = min(max(max(xs), 0.0), w - 1.0)
    min_y = min(max(min(ys), 0.0), h - 1.0)
    max_y = min(max(max(ys), 0.0), h - 1.0)
    x0 = int(math.floor(min_x))
    x1 = int(math.floor(max_x)) + 1
    y0 = int(math.floor(min_y))
    y1 = int(math.floor(max_y)) + 1
    if x1 <= x0 or y1 <= y0:
        return None
    return x0, y0, x1, y1


def build_object_database(scenes: Sequence[SceneSample]) -> ObjectDatabase:
    """Harvest every usable annotated object from the given scenes.

    An object is skipped when no camera sees its box center, when any box
    corner sits at or behind the priority camera, when its patch window is
    empty, or when it contains no points.
    """
    grouped: Dict[str, list] = {}
    for scene in scenes:
        pts = scene.cloud.points
        for ann in scene.annotations:
            res = select_camera(scene.rig, ann.box.center)
            if res is None:
                continue
            cam_idx = res.camera_index
            calib = scene.rig.cameras[cam_idx]
            window = patch_window(calib, ann.box)
            if window is None:
                continue
            mask = points_in_box(ann.box, pts)
            if not np.any(mask):
                continue
            x0, y0, x1, y1 = window
            patch = FeatureMap(scene.images[cam_idx].data[y0:y1, x0:x1].copy())
            grouped.setdefault(ann.category, []).append(
                ObjectSample(
                    points=pts[mask].copy(),
                    patch=patch,
                    patch_bounds=window,
                    camera_index=cam_idx,
                    depth=res.depth,
                    box=ann.box,
                    category=ann.category,
                )
            )
    return ObjectDatabase(objects={k: tuple(v) for k, v in grouped.items()})


def composite_patch(img: Array, obj: ObjectSample, alpha: float) -> None:
    """One paste step, in place: crop the current image under the patch
    window, blend `alpha * current + (1 - alpha) * patch`, write it back.
    Windows reaching outside the target image are clipped on both sides."""
    h, w, _ = img.shape
    x0, y0, x1, y1 = obj.patch_bounds
    tx0, ty0 = max(0, x0), max(0, y0)
    tx1, ty1 = min(w, x1), min(h, y1)
    if tx1 <= tx0 or ty1 <= ty0:
        return
    patch = obj.patch.data[ty0 - y0 : ty1 - y0, tx0 - x0 : tx1 - x0]
    region = img[ty0:ty1, tx0:tx1]
    img[ty0:ty1, tx0:tx1] = alpha * region + (1.0 - alpha) * patch


def augment_scene(
    scene: SceneSample, db: ObjectDatabase, cfg: AugmentConfig, seed
) -> SceneSample:
    """Paste database objects into a scene.

    Per category (sorted for determinism) candidates are drawn in a seeded
    random order, filtered for zero BEV overlap against scene annotations and
    everything already accepted, and capped at the category's paste limit.
    Accepted object points are appended to the cloud; image patches are
    composited far-to-near per camera. alpha == 1 leaves every image
    byte-identical (points and annotations are still added).
    """
    rng = np.random.default_rng(seed)
    existing = [ann.box for ann in scene.annotations]
    accepted: list = []
    for cat in sorted(db.objects):
        limit = cfg.paste_limit(cat)
        if limit <= 0:
            continue
        pool = db.objects[cat]
        order = rng.permutation(len(pool))
        cand = [pool[i] for i in order]
        keep = filter_colliding_boxes([o.box for o in cand], existing)[:limit]
        for i in keep:
            accepted.append(cand[i])
            existing.append(cand[i].box)

    new_images = [img.data.copy() for img in scene.images]
    if cfg.alpha != 1.0:
        per_cam: Dict[int, list] = {}
        for obj in accepted:
            per_cam.setdefault(obj.camera_index, []).append(obj)
        for cam_idx, objs in per_cam.items():
            if cam_idx >= len(new_images):
                raise ValueError("object camera index outside the scene rig")
            objs.sort(key=lambda o: -o.depth)  # far first, near last
            for obj in objs:
                composite_patch(new_images[cam_idx], obj, cfg.alpha)

    rows = [scene.cloud.points]
    width = scene.cloud.points.shape[1]
    for obj in accepted:
        if obj.points.shape[1] != width:
            raise ValueError("object point rows do not match the scene cloud")
        rows.append(obj.points)
    cloud = PointCloud(np.vstack(rows))

    annotations = tuple(scene.annotations) + tuple(
        Annotation(box=obj.box, category=obj.category) for obj in accepted
    )
    return SceneSample(
        cloud=cloud,
        images=tuple(FeatureMap(img) for img in new_images),
        rig=scene.rig,
        annotations=annotations,
    )
