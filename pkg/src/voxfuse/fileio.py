"""On-disk formats: binary feature maps and point clouds, attention-operator
parameter files, calibration text, annotation CSV, scene and object-database
directories.

All binary payloads are little-endian; float64 arrays round-trip bit-exactly
because they are written with tobytes() and read back with frombuffer. Text
files write floats with repr(), which Python parses back to the identical
double. See docs/formats.md for the byte-level and grammar documentation.
"""

from __future__ import annotations

import csv
import os
import struct
from typing import List, Optional, Sequence

import numpy as np

from .augment import ObjectDatabase, ObjectSample
from .boxes import Box
from .fusion import FusedVoxelSet, FusionParams
from .geometry import CameraCalibration, CameraRig
from .nnops import FeatureMap, LinearLayer
from .scenegen import Annotation, SceneSample
from .voxels import PointCloud

FMAP_MAGIC = b"FMAP"
PCLD_MAGIC = b"PCLD"
PARAMS_MAGIC = b"DCFA"
PARAMS_VERSION = 1

ANNOTATION_HEADER = ("category", "cx", "cy", "cz", "sx", "sy", "sz", "yaw", "r", "g", "b")


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated file while reading {what}")
    return buf


def _f64_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_f64(fh, count: int, what: str):
    buf = _read_exact(fh, 8 * count, what)
    return np.frombuffer(buf, dtype="<f8", count=count).copy()


# ---------------------------------------------------------------------------
# FMAP: feature maps


def write_feature_map(path, fmap: FeatureMap) -> None:
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<III", fmap.h, fmap.w, fmap.d))
        fh.write(_f64_bytes(fmap.data))


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != FMAP_MAGIC:
            raise ValueError(f"not a feature-map file (magic {magic!r})")
        h, w, d = struct.unpack("<III", _read_exact(fh, 12, "header"))
        data = _read_f64(fh, h * w * d, "feature data").reshape(h, w, d)
        if fh.read(1):
            raise ValueError("trailing bytes after feature data")
    return FeatureMap(data)


# ---------------------------------------------------------------------------
# PCLD: point clouds (binary) and the x,y,z,intensity CSV alternative


def write_point_cloud(path, cloud: PointCloud) -> None:
    if cloud.points.shape[1] != 4:
        raise ValueError("point-cloud files store exactly x, y, z, intensity")
    with open(path, "wb") as fh:
        fh.write(PCLD_MAGIC)
        fh.write(struct.pack("<I", cloud.count))
        fh.write(_f64_bytes(cloud.points))


def write_point_cloud_csv(path, cloud: PointCloud) -> None:
    if cloud.points.shape[1] != 4:
        raise ValueError("point-cloud files store exactly x, y, z, intensity")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("x", "y", "z", "intensity"))
        for row in cloud.points:
            writer.writerow([repr(float(v)) for v in row])


def read_point_cloud(path) -> PointCloud:
    """Reads either format; the binary magic decides."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == PCLD_MAGIC:
            (count,) = struct.unpack("<I", _read_exact(fh, 4, "count"))
            pts = _read_f64(fh, count * 4, "point rows").reshape(count, 4)
            if fh.read(1):
                raise ValueError("trailing bytes after point rows")
            return PointCloud(pts)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != ("x", "y", "z", "intensity"):
            raise ValueError(f"unexpected point-cloud CSV header: {header}")
        rows = [[float(v) for v in row] for row in reader]
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 4))


# ---------------------------------------------------------------------------
# DCFA: fusion operator parameters


def _write_layer(fh, layer: LinearLayer) -> None:
    fh.write(_f64_bytes(layer.weight))
    fh.write(_f64_bytes(layer.bias))


def _read_layer(fh, out_dim: int, in_dim: int, what: str) -> LinearLayer:
    weight = _read_f64(fh, out_dim * in_dim, what + " weight").reshape(out_dim, in_dim)
    bias = _read_f64(fh, out_dim, what + " bias")
    return LinearLayer(weight, bias)


def save_params(path, params: FusionParams) -> None:
    m, k = params.heads, params.points
    d, c = params.img_channels, params.out_channels
    t, dh = params.token_dim, params.head_dim
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", PARAMS_VERSION))
        has_map = 0 if params.voxel_map is None else 1
        fh.write(struct.pack("<7I", m, k, d, c, t, dh, has_map))
        _write_layer(fh, params.token_fc)
        _write_layer(fh, params.offset_net)
        _write_layer(fh, params.attn_net)
        fh.write(_f64_bytes(params.value_proj))
        fh.write(_f64_bytes(params.output_proj))
        if params.voxel_map is not None:
            _write_layer(fh, params.voxel_map)


def load_params(path) -> FusionParams:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != PARAMS_MAGIC:
            raise ValueError(f"not a fusion-parameter file (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        m, k, d, c, t, dh, has_map = struct.unpack(
            "<7I", _read_exact(fh, 28, "shape header")
        )
        token_fc = _read_layer(fh, t, d, "token")
        offset_net = _read_layer(fh, 2 * m * k, t, "offset")
        attn_net = _read_layer(fh, m * k, t, "attention")
        value_proj = _read_f64(fh, m * dh * d, "value projection").reshape(m, dh, d)
        output_proj = _read_f64(fh, m * c * dh, "output projection").reshape(m, c, dh)
        voxel_map = _read_layer(fh, d, c, "voxel adapter") if has_map else None
        if fh.read(1):
            raise ValueError("trailing bytes after parameters")
    return FusionParams(
        heads=m,
        points=k,
        token_fc=token_fc,
        offset_net=offset_net,
        attn_net=attn_net,
        value_proj=value_proj,
        output_proj=output_proj,
        voxel_map=voxel_map,
    )


# ---------------------------------------------------------------------------
# Calibration text format


def _format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).ravel())


def write_calibration(path, rig: CameraRig) -> None:
    lines = [
        "# camera rig calibration",
        f"cameras {len(rig.cameras)}",
        "priority " + " ".join(str(i) for i in rig.priority),
    ]
    for idx, cam in enumerate(rig.cameras):
        lines.append("")
        lines.append(f"[camera {idx}]")
        lines.append(f"width {cam.image_width}")
        lines.append(f"height {cam.image_height}")
        lines.append("intrinsics " + _format_floats(cam.intrinsics))
        lines.append("rect_rot " + _format_floats(cam.rect_rot))
        lines.append("t_cam_lidar " + _format_floats(cam.t_cam_lidar))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_kv_lines(path):
    """Yields (key, value-string) pairs; section headers come through as
    ('[camera', 'N]')-style keys already split, so we normalize them here."""
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line


def read_calibration(path) -> CameraRig:
    count: Optional[int] = None
    priority: Optional[List[int]] = None
    sections: List[dict] = []
    current: Optional[dict] = None
    for line in _parse_kv_lines(path):
        if line.startswith("[camera"):
            idx = int(line.strip("[]").split()[1])
            if idx != len(sections):
                raise ValueError(f"camera sections out of order at index {idx}")
            current = {}
            sections.append(current)
            continue
        key, _, rest = line.partition(" ")
        if key == "cameras":
            count = int(rest)
        elif key == "priority":
            priority = [int(v) for v in rest.split()]
        elif current is None:
            raise ValueError(f"key {key!r} outside any camera section")
        else:
            current[key] = rest
    if count is None or priority is None:
        raise ValueError("calibration file missing rig-level keys")
    if len(sections) != count:
        raise ValueError(
            f"calibration file declares {count} cameras, found {len(sections)}"
        )
    cameras = []
    for sec in sections:
        try:
            width = int(sec["width"])
            height = int(sec["height"])
            intr = np.array([float(v) for v in sec["intrinsics"].split()]).reshape(3, 3)
            rect = np.array([float(v) for v in sec["rect_rot"].split()]).reshape(3, 3)
            t = np.array([float(v) for v in sec["t_cam_lidar"].split()]).reshape(4, 4)
        except KeyError as exc:
            raise ValueError(f"camera section missing key {exc}") from exc
        cameras.append(
            CameraCalibration(
                intrinsics=intr,
                rect_rot=rect,
                t_cam_lidar=t,
                image_width=width,
                image_height=height,
            )
        )
    return CameraRig(tuple(cameras), tuple(priority))


# ---------------------------------------------------------------------------
# Annotations CSV


def write_annotations(path, annotations: Sequence[Annotation]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for ann in annotations:
            box = ann.box
            row = [ann.category]
            row += [repr(float(v)) for v in box.center]
            row += [repr(float(v)) for v in box.size]
            row.append(repr(float(box.yaw)))
            row += [repr(float(v)) for v in ann.color]
            writer.writerow(row)


def read_annotations(path) -> List[Annotation]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != ANNOTATION_HEADER:
            raise ValueError(f"unexpected annotation CSV header: {header}")
        for row in reader:
            category = row[0]
            vals = [float(v) for v in row[1:]]
            box = Box(np.array(vals[0:3]), np.array(vals[3:6]), vals[6])
            out.append(Annotation(box, category, tuple(vals[7:10])))
    return out


# ---------------------------------------------------------------------------
# Fused voxel CSV


def write_fused_csv(path, fused: FusedVoxelSet) -> None:
    """One row per voxel: cell index, metric center, member count, the
    in-view camera (-1 when none), whether image features were added, and
    the fused feature vector."""
    vox = fused.voxels
    c = vox.feature_dim
    header = ["ix", "iy", "iz", "cx", "cy", "cz", "count", "camera", "contributed"]
    header += [f"fused_{i}" for i in range(c)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(vox)):
            row = [int(v) for v in vox.indices[i]]
            row += [repr(float(v)) for v in vox.centers[i]]
            row.append(int(vox.counts[i]))
            row.append(int(fused.cameras[i]))
            row.append(int(fused.contributed[i]))
            row += [repr(float(v)) for v in fused.fused[i]]
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Scene directories


def write_scene(directory, scene: SceneSample) -> None:
    os.makedirs(directory, exist_ok=True)
    write_point_cloud(os.path.join(directory, "cloud.pcld"), scene.cloud)
    write_calibration(os.path.join(directory, "calibration.txt"), scene.rig)
    write_annotations(os.path.join(directory, "annotations.csv"), scene.annotations)
    for idx, img in enumerate(scene.images):
        write_feature_map(os.path.join(directory, f"image_{idx:02d}.fmap"), img)


def read_scene(directory) -> SceneSample:
    cloud = read_point_cloud(os.path.join(directory, "cloud.pcld"))
    rig = read_calibration(os.path.join(directory, "calibration.txt"))
    annotations = read_annotations(os.path.join(directory, "annotations.csv"))
    images = tuple(
        read_feature_map(os.path.join(directory, f"image_{idx:02d}.fmap"))
        for idx in range(len(rig.cameras))
    )
    return SceneSample(cloud, images, rig, tuple(annotations))


# ---------------------------------------------------------------------------
# Object database directories


def _write_object_meta(path, obj: ObjectSample) -> None:
    x0, y0, x1, y1 = obj.patch_bounds
    lines = [
        f"category {obj.category}",
        f"camera_index {obj.camera_index}",
        f"depth {repr(float(obj.depth))}",
        "center " + _format_floats(obj.box.center),
        "size " + _format_floats(obj.box.size),
        f"yaw {repr(float(obj.box.yaw))}",
        f"patch_bounds {x0} {y0} {x1} {y1}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_object_meta(path) -> dict:
    meta = {}
    for line in _parse_kv_lines(path):
        key, _, rest = line.partition(" ")
        meta[key] = rest
    return meta


def write_object_database(directory, db: ObjectDatabase) -> None:
    os.makedirs(directory, exist_ok=True)
    for category, objects in db.objects.items():
        cat_dir = os.path.join(directory, category)
        os.makedirs(cat_dir, exist_ok=True)
        for idx, obj in enumerate(objects):
            stem = os.path.join(cat_dir, f"obj_{idx:03d}")
            write_point_cloud(stem + ".pcld", PointCloud(obj.points))
            write_feature_map(stem + ".fmap", obj.patch)
            _write_object_meta(stem + ".txt", obj)


def read_object_database(directory) -> ObjectDatabase:
    objects = {}
    for category in sorted(os.listdir(directory)):
        cat_dir = os.path.join(directory, category)
        if not os.path.isdir(cat_dir):
            continue
        bucket = []
        stems = sorted(
            name[:-5] for name in os.listdir(cat_dir) if name.endswith(".pcld")
        )
        for stem in stems:
            base = os.path.join(cat_dir, stem)
            points = read_point_cloud(base + ".pcld").points
            patch = read_feature_map(base + ".fmap")
            meta = _read_object_meta(base + ".txt")
            if meta["category"] != category:
                raise ValueError(
                    f"object {base} claims category {meta['category']!r}"
                )
            center = np.array([float(v) for v in meta["center"].split()])
            size = np.array([float(v) for v in meta["size"].split()])
            box = Box(center, size, float(meta["yaw"]))
            bounds = tuple(int(v) for v in meta["patch_bounds"].split())
            bucket.append(
                ObjectSample(
                    points=points,
                    patch=patch,
                    patch_bounds=bounds,
                    camera_index=int(meta["camera_index"]),
                    depth=float(meta["depth"]),
                    box=box,
                    category=category,
                )
            )
        if bucket:
            objects[category] = tuple(bucket)
    if not objects:
        raise ValueError(f"no objects found under {directory!r}")
    return ObjectDatabase(objects)
