"""Slow scalar reference implementations used for verification.

Every function here recomputes a production operator with plain Python
loops and math-module arithmetic, deliberately sharing no code with the
vectorized paths. The self-test command and the test suite compare the two
routes; keep these independent when touching either side.
"""

from __future__ import annotations

import math

import numpy as np


def bilinear_ref(data, x, y):
    """Four-corner interpolation, one channel at a time, zero padding."""
    h, w, d = data.shape
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    out = [0.0] * d
    corners = (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    )
    for yy, xx, wgt in corners:
        if 0 <= yy < h and 0 <= xx < w:
            for ch in range(d):
                out[ch] += wgt * float(data[yy, xx, ch])
    return np.array(out)


def linear_ref(weight, bias, x):
    out_dim, in_dim = weight.shape
    out = []
    for i in range(out_dim):
        acc = float(bias[i])
        for j in range(in_dim):
            acc += float(weight[i, j]) * float(x[j])
        out.append(acc)
    return np.array(out)


def softmax_ref(logits):
    mx = max(float(v) for v in logits)
    exps = [math.exp(float(v) - mx) for v in logits]
    total = math.fsum(exps)
    return np.array([e / total for e in exps])


def deform_ref(level_datas, references, voxel_feat, params):
    """Scalar mirror of fusion.image_contribution.

    level_datas: list of raw (h, w, d) arrays; references: one (x, y) per
    level. Follows the same chain: level-0 sample, adapter, token, offsets,
    per-head softmax, K samples per head per level, value/output projection,
    level average.
    """
    m, k = params.heads, params.points
    d = params.img_channels
    dh = params.head_dim
    c = params.out_channels

    if params.voxel_map is not None:
        p_img = linear_ref(params.voxel_map.weight, params.voxel_map.bias, voxel_feat)
    else:
        p_img = np.array([float(v) for v in voxel_feat])
    f0 = bilinear_ref(level_datas[0], references[0][0], references[0][1])
    prod = np.array([float(f0[i]) * float(p_img[i]) for i in range(d)])
    token = linear_ref(params.token_fc.weight, params.token_fc.bias, prod)
    off_flat = linear_ref(params.offset_net.weight, params.offset_net.bias, token)
    logit_flat = linear_ref(params.attn_net.weight, params.attn_net.bias, token)

    out = [0.0] * c
    n_levels = len(level_datas)
    for data, (rx, ry) in zip(level_datas, references):
        for mi in range(m):
            attn = softmax_ref([logit_flat[mi * k + ki] for ki in range(k)])
            head = [0.0] * dh
            for ki in range(k):
                ox = float(off_flat[2 * (mi * k + ki)])
                oy = float(off_flat[2 * (mi * k + ki) + 1])
                sample = bilinear_ref(data, rx + ox, ry + oy)
                for i in range(dh):
                    acc = 0.0
                    for j in range(d):
                        acc += float(params.value_proj[mi, i, j]) * float(sample[j])
                    head[i] += float(attn[ki]) * acc
            for ci in range(c):
                acc = 0.0
                for j in range(dh):
                    acc += float(params.output_proj[mi, ci, j]) * head[j]
                out[ci] += acc / n_levels
    return np.array(out)


def dense_ref(data, voxel_feat, params):
    """Scalar mirror of fusion.dense_attention."""
    h, w, d = data.shape
    dk = params.key_dim
    q = linear_ref(params.query.weight, params.query.bias, voxel_feat)
    scores = []
    feats = []
    for r in range(h):
        for cc in range(w):
            f = [float(data[r, cc, ch]) for ch in range(d)]
            key = linear_ref(params.key.weight, params.key.bias, f)
            dot = math.fsum(float(q[i]) * float(key[i]) for i in range(dk))
            scores.append(dot / math.sqrt(dk))
            feats.append(f)
    wts = softmax_ref(scores)
    dv = params.value.out_dim
    ctx = [0.0] * dv
    for wgt, f in zip(wts, feats):
        val = linear_ref(params.value.weight, params.value.bias, f)
        for i in range(dv):
            ctx[i] += float(wgt) * float(val[i])
    return linear_ref(params.out.weight, params.out.bias, np.array(ctx))


def project_ref(calib, point):
    """Hand-rolled projection chain; mirrors geometry.project_point."""
    x, y, z = (float(v) for v in point)
    t = calib.t_cam_lidar
    cam = [
        t[0, 0] * x + t[0, 1] * y + t[0, 2] * z + t[0, 3],
        t[1, 0] * x + t[1, 1] * y + t[1, 2] * z + t[1, 3],
        t[2, 0] * x + t[2, 1] * y + t[2, 2] * z + t[2, 3],
    ]
    r = calib.rect_rot
    rect = [
        r[0, 0] * cam[0] + r[0, 1] * cam[1] + r[0, 2] * cam[2],
        r[1, 0] * cam[0] + r[1, 1] * cam[1] + r[1, 2] * cam[2],
        r[2, 0] * cam[0] + r[2, 1] * cam[1] + r[2, 2] * cam[2],
    ]
    k = calib.intrinsics
    hom = [
        k[0, 0] * rect[0] + k[0, 1] * rect[1] + k[0, 2] * rect[2],
        k[1, 1] * rect[1] + k[1, 2] * rect[2],
        rect[2],
    ]
    depth = hom[2]
    if depth <= 1e-9:
        return None
    px = hom[0] / depth
    py = hom[1] / depth
    if not (0.0 <= px <= calib.image_width - 1 and 0.0 <= py <= calib.image_height - 1):
        return None
    return px, py, depth


def select_camera_ref(rig, point):
    """Exhaustive in-view check over all cameras, then priority-first pick."""
    in_view = {}
    for idx in range(len(rig.cameras)):
        res = project_ref(rig.cameras[idx], point)
        if res is not None:
            in_view[idx] = res
    for idx in rig.priority:
        if idx in in_view:
            return idx, in_view[idx]
    return None


def voxelize_ref(points, cfg):
    """Dense-grid bucketing oracle for voxels.voxelize.

    Walks the full conceptual grid as a dict keyed by cell tuple, applies the
    same half-open range and whole-cell rules, and pools with fsum means.
    Returns (indices, centers, features, counts) arrays sorted by cell index.
    """
    size = cfg.voxel_size
    lo = cfg.bounds[:3]
    ncells = cfg.grid_cells
    grid = {}
    for row in points:
        x, y, z = (float(row[i]) for i in range(3))
        ok = True
        cell = []
        for axis, v in enumerate((x, y, z)):
            if v < lo[axis] or v >= lo[axis] + ncells[axis] * size[axis]:
                ok = False
                break
            ci = math.floor((v - lo[axis]) / size[axis])
            cell.append(min(max(ci, 0), ncells[axis] - 1))
        if ok:
            grid.setdefault(tuple(cell), []).append([float(v) for v in row])
    extra = points.shape[1] - 3 if len(points) else 0
    indices, centers, features, counts = [], [], [], []
    for cell in sorted(grid):
        members = grid[cell]
        center = [lo[a] + (cell[a] + 0.5) * size[a] for a in range(3)]
        feat = []
        for col in range(extra):
            feat.append(math.fsum(mbr[3 + col] for mbr in members) / len(members))
        for axis in range(3):
            feat.append(
                math.fsum(mbr[axis] - center[axis] for mbr in members) / len(members)
            )
        indices.append(list(cell))
        centers.append(center)
        features.append(feat)
        counts.append(len(members))
    return (
        np.array(indices, dtype=np.int64).reshape(-1, 3),
        np.array(centers).reshape(-1, 3),
        np.array(features).reshape(-1, extra + 3),
        np.array(counts, dtype=np.int64),
    )


def pool2x2_ref(data):
    """Scalar 2x2 mean pooling with edge truncation."""
    h, w, d = data.shape
    h2, w2 = h // 2, w // 2
    out = np.zeros((h2, w2, d))
    for r in range(h2):
        for cc in range(w2):
            for ch in range(d):
                out[r, cc, ch] = (
                    float(data[2 * r, 2 * cc, ch])
                    + float(data[2 * r, 2 * cc + 1, ch])
                    + float(data[2 * r + 1, 2 * cc, ch])
                    + float(data[2 * r + 1, 2 * cc + 1, ch])
                ) / 4.0
    return out
