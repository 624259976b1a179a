"""Cross-modal fusion kernels.

The main operator gathers image features for one voxel: a token built from
the elementwise product of the sampled image feature and the (adapted) voxel
feature predicts per-head sampling offsets and attention logits; K offset
samples per head are value-projected, attention-weighted, head-projected,
summed over heads, and averaged over pyramid levels. A dense baseline
attends over every pixel instead, which is what makes the two complexity
classes measurable in the benchmark.

All forwards have hand-derived backward passes (see
:func:`image_contribution_backward`) verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import CameraRig, select_camera
from .nnops import (
    FeatureMap,
    LinearLayer,
    as_finite_f64,
    bilinear_sample,
    bilinear_sample_grad,
    linear_backward,
    linear_forward,
    sample_grid,
    softmax,
)
from .voxels import VoxelSet

Array = np.ndarray


@dataclass(frozen=True)
class FusionParams:
    """Learnable state of the deformable fusion operator.

    heads (M) and points (K) shape the sampling pattern. token_fc maps the
    d-dim product feature to the token; offset_net and attn_net map the token
    to 2*M*K offset coordinates and M*K attention logits. value_proj (M, dh, d)
    and output_proj (M, c, dh) are bias-free per-head matrices: keeping them
    bias-free guarantees a zeroed image contributes exactly zero. voxel_map
    adapts c-dim voxel features to the d-dim image space and may be None only
    when c == d.
    """

    heads: int
    points: int
    token_fc: LinearLayer
    offset_net: LinearLayer
    attn_net: LinearLayer
    value_proj: Array
    output_proj: Array
    voxel_map: Optional[LinearLayer] = None

    def __post_init__(self):
        m = int(self.heads)
        k = int(self.points)
        if m < 1 or k < 1:
            raise ValueError("heads and points must be >= 1")
        vp = as_finite_f64(self.value_proj, "value_proj")
        op = as_finite_f64(self.output_proj, "output_proj")
        if vp.ndim != 3 or vp.shape[0] != m:
            raise ValueError("value_proj must be (heads, head_dim, img_channels)")
        dh, d = vp.shape[1], vp.shape[2]
        if op.ndim != 3 or op.shape[0] != m or op.shape[2] != dh:
            raise ValueError("output_proj must be (heads, out_channels, head_dim)")
        c = op.shape[1]
        t = self.token_fc.out_dim
        if self.token_fc.in_dim != d:
            raise ValueError("token_fc must consume img_channels inputs")
        if self.offset_net.in_dim != t or self.offset_net.out_dim != 2 * m * k:
            raise ValueError("offset_net must map token_dim -> 2*heads*points")
        if self.attn_net.in_dim != t or self.attn_net.out_dim != m * k:
            raise ValueError("attn_net must map token_dim -> heads*points")
        if self.voxel_map is None:
            if c != d:
                raise ValueError(
                    "voxel_map may be omitted only when out_channels == img_channels"
                )
        else:
            if self.voxel_map.in_dim != c or self.voxel_map.out_dim != d:
                raise ValueError("voxel_map must map out_channels -> img_channels")
        object.__setattr__(self, "heads", m)
        object.__setattr__(self, "points", k)
        object.__setattr__(self, "value_proj", np.ascontiguousarray(vp))
        object.__setattr__(self, "output_proj", np.ascontiguousarray(op))

    @property
    def img_channels(self) -> int:
        return self.value_proj.shape[2]

    @property
    def head_dim(self) -> int:
        return self.value_proj.shape[1]

    @property
    def out_channels(self) -> int:
        return self.output_proj.shape[1]

    @property
    def token_dim(self) -> int:
        return self.token_fc.out_dim


def make_params(
    rng: np.random.Generator,
    heads: int,
    points: int,
    img_channels: int,
    out_channels: Optional[int] = None,
    token_dim: Optional[int] = None,
    head_dim: Optional[int] = None,
    random_sampling: bool = False,
) -> FusionParams:
    """Draw fusion parameters.

    By default the offset net starts at exactly zero (samples sit on the
    reference point) and the attention logits at zero (uniform weights), so
    the fresh operator behaves as multi-point bilinear sampling. Pass
    `random_sampling=True` to randomize those nets as well (tests, benches).
    """
    d = int(img_channels)
    c = d if out_channels is None else int(out_channels)
    t = d if token_dim is None else int(token_dim)
    dh = max(1, d // heads) if head_dim is None else int(head_dim)
    token_fc = LinearLayer(
        rng.normal(size=(t, d)) / math.sqrt(d), 0.1 * rng.normal(size=t)
    )
    if random_sampling:
        offset_net = LinearLayer(
            0.2 * rng.normal(size=(2 * heads * points, t)),
            0.5 * rng.normal(size=2 * heads * points),
        )
        attn_net = LinearLayer(
            0.5 * rng.normal(size=(heads * points, t)),
            0.5 * rng.normal(size=heads * points),
        )
    else:
        offset_net = LinearLayer.zeros(2 * heads * points, t)
        attn_net = LinearLayer.zeros(heads * points, t)
    value_proj = rng.normal(size=(heads, dh, d)) / math.sqrt(d)
    output_proj = rng.normal(size=(heads, c, dh)) / math.sqrt(dh)
    voxel_map = None
    if c != d:
        voxel_map = LinearLayer(
            rng.normal(size=(d, c)) / math.sqrt(c), 0.1 * rng.normal(size=d)
        )
    return FusionParams(
        heads=heads,
        points=points,
        token_fc=token_fc,
        offset_net=offset_net,
        attn_net=attn_net,
        value_proj=value_proj,
        output_proj=output_proj,
        voxel_map=voxel_map,
    )


def identity_projection_params(
    rng: np.random.Generator, heads: int, points: int, channels: int
) -> FusionParams:
    """Params whose value/output projections compose to the identity.

    Each head's value projection selects a contiguous channel block and the
    output projection writes it back, so with zero offsets and uniform
    attention the operator reduces to plain bilinear sampling at the
    reference point. Requires channels divisible by heads.
    """
    if channels % heads != 0:
        raise ValueError("channels must be divisible by heads")
    dh = channels // heads
    params = make_params(rng, heads, points, channels, head_dim=dh)
    value = np.zeros((heads, dh, channels))
    output = np.zeros((heads, channels, dh))
    for m in range(heads):
        for i in range(dh):
            value[m, i, m * dh + i] = 1.0
            output[m, m * dh + i, i] = 1.0
    return replace(params, value_proj=value, output_proj=output)


def adapted_voxel_feature(voxel_feat, params: FusionParams) -> Array:
    """Voxel feature in image-channel space (through voxel_map when present)."""
    p = as_finite_f64(voxel_feat, "voxel_feat")
    if params.voxel_map is not None:
        return linear_forward(params.voxel_map, p)
    if p.shape != (params.img_channels,):
        raise ValueError(
            "voxel feature length must equal img_channels when voxel_map is None"
        )
    return p


def make_token(img_feat, voxel_feat, params: FusionParams) -> Array:
    """Token = token_fc(img_feat * adapted voxel feature), a t-vector."""
    f = as_finite_f64(img_feat, "img_feat")
    if f.shape != (params.img_channels,):
        raise ValueError("img_feat length must equal img_channels")
    p = adapted_voxel_feature(voxel_feat, params)
    return linear_forward(params.token_fc, f * p)


def _offsets_attention(token: Array, params: FusionParams):
    """Offsets (M, K, 2) in pixels and attention weights (M, K), softmax per head."""
    m, k = params.heads, params.points
    off = linear_forward(params.offset_net, token).reshape(m, k, 2)
    logits = linear_forward(params.attn_net, token).reshape(m, k)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    attn = e / e.sum(axis=1, keepdims=True)
    return off, attn


def _attend_level(data: Array, ref, offsets: Array, attn: Array, params: FusionParams) -> Array:
    pos = np.asarray(ref, dtype=np.float64) + offsets  # (M, K, 2)
    m, k = params.heads, params.points
    s = sample_grid(data, pos[..., 0].ravel(), pos[..., 1].ravel())
    s = s.reshape(m, k, params.img_channels)
    v = np.einsum("mij,mkj->mki", params.value_proj, s)
    head_sum = np.einsum("mk,mki->mi", attn, v)
    return np.einsum("mcj,mj->c", params.output_proj, head_sum)


def attend_single_level(fmap: FeatureMap, reference, token, params: FusionParams) -> Array:
    """Deformable attention on one level; returns the c-vector contribution."""
    if fmap.d != params.img_channels:
        raise ValueError("feature map channels do not match params")
    ref = as_finite_f64(reference, "reference")
    if ref.shape != (2,):
        raise ValueError("reference must be an (x, y) pair")
    tok = as_finite_f64(token, "token")
    off, attn = _offsets_attention(tok, params)
    return _attend_level(fmap.data, ref, off, attn, params)


def attend_pyramid(levels: Sequence[FeatureMap], references, token, params: FusionParams) -> Array:
    """Single-level attention applied per level with shared offsets, averaged."""
    levels = list(levels)
    refs = list(references)
    if not levels or len(levels) != len(refs):
        raise ValueError("need one reference point per pyramid level")
    tok = as_finite_f64(token, "token")
    off, attn = _offsets_attention(tok, params)
    out = None
    for fmap, ref in zip(levels, refs):
        if fmap.d != params.img_channels:
            raise ValueError("feature map channels do not match params")
        ref = as_finite_f64(ref, "reference")
        y = _attend_level(fmap.data, ref, off, attn, params)
        out = y if out is None else out + y
    return out / len(levels)


def image_contribution(levels: Sequence[FeatureMap], references, voxel_feat, params: FusionParams) -> Array:
    """Full per-voxel image contribution.

    Samples the level-0 map at the level-0 reference for the token, then runs
    the shared-offset pyramid attention. Returns a c-vector; the caller adds
    it to the raw voxel feature (residual combine).
    """
    levels = list(levels)
    refs = [as_finite_f64(r, "reference") for r in references]
    if not levels or len(levels) != len(refs):
        raise ValueError("need one reference point per pyramid level")
    f0 = bilinear_sample(levels[0], refs[0][0], refs[0][1])
    token = make_token(f0, voxel_feat, params)
    return attend_pyramid(levels, refs, token, params)


@dataclass(frozen=True)
class FusionGrads:
    """Gradients of a scalar loss for every parameter group and both inputs."""

    token_fc_weight: Array
    token_fc_bias: Array
    offset_weight: Array
    offset_bias: Array
    attn_weight: Array
    attn_bias: Array
    value_proj: Array
    output_proj: Array
    voxel_map_weight: Optional[Array]
    voxel_map_bias: Optional[Array]
    level_maps: tuple  # one (h, w, d) array per pyramid level
    voxel_feat: Array


#: Parameter-group names usable with get_group / with_group / grad_group.
PARAM_GROUPS = (
    "token_fc_weight",
    "token_fc_bias",
    "offset_weight",
    "offset_bias",
    "attn_weight",
    "attn_bias",
    "value_proj",
    "output_proj",
    "voxel_map_weight",
    "voxel_map_bias",
)


def get_group(params: FusionParams, name: str) -> Optional[Array]:
    """Copy of one named parameter group (None for an absent voxel_map)."""
    if name == "token_fc_weight":
        return params.token_fc.weight.copy()
    if name == "token_fc_bias":
        return params.token_fc.bias.copy()
    if name == "offset_weight":
        return params.offset_net.weight.copy()
    if name == "offset_bias":
        return params.offset_net.bias.copy()
    if name == "attn_weight":
        return params.attn_net.weight.copy()
    if name == "attn_bias":
        return params.attn_net.bias.copy()
    if name == "value_proj":
        return params.value_proj.copy()
    if name == "output_proj":
        return params.output_proj.copy()
    if name == "voxel_map_weight":
        return None if params.voxel_map is None else params.voxel_map.weight.copy()
    if name == "voxel_map_bias":
        return None if params.voxel_map is None else params.voxel_map.bias.copy()
    raise KeyError(name)


def with_group(params: FusionParams, name: str, values) -> FusionParams:
    """A new FusionParams with one named group replaced (shape preserved)."""
    cur = get_group(params, name)
    if cur is None:
        raise KeyError(f"group {name} absent in these params")
    arr = np.asarray(values, dtype=np.float64).reshape(cur.shape)
    if name.startswith("token_fc"):
        layer = params.token_fc
        layer = LinearLayer(
            arr if name.endswith("weight") else layer.weight,
            arr if name.endswith("bias") else layer.bias,
        )
        return replace(params, token_fc=layer)
    if name.startswith("offset"):
        layer = params.offset_net
        layer = LinearLayer(
            arr if name.endswith("weight") else layer.weight,
            arr if name.endswith("bias") else layer.bias,
        )
        return replace(params, offset_net=layer)
    if name.startswith("attn"):
        layer = params.attn_net
        layer = LinearLayer(
            arr if name.endswith("weight") else layer.weight,
            arr if name.endswith("bias") else layer.bias,
        )
        return replace(params, attn_net=layer)
    if name == "value_proj":
        return replace(params, value_proj=arr)
    if name == "output_proj":
        return replace(params, output_proj=arr)
    if name.startswith("voxel_map"):
        layer = params.voxel_map
        layer = LinearLayer(
            arr if name.endswith("weight") else layer.weight,
            arr if name.endswith("bias") else layer.bias,
        )
        return replace(params, voxel_map=layer)
    raise KeyError(name)


def grad_group(grads: FusionGrads, name: str) -> Optional[Array]:
    if name not in PARAM_GROUPS:
        raise KeyError(name)
    return getattr(grads, name)


def image_contribution_backward(
    levels: Sequence[FeatureMap], references, voxel_feat, params: FusionParams, upstream
) -> FusionGrads:
    """Analytic gradients of `upstream . image_contribution(...)`.

    Covers the whole chain: output and value projections, the per-head
    softmax, bilinear sampling (both the map values and the offset
    coordinates via the sample-position derivatives), the token FC, the
    elementwise product, and the voxel adapter when present.
    """
    maps = list(levels)
    refs = [as_finite_f64(r, "reference") for r in references]
    if not maps or len(maps) != len(refs):
        raise ValueError("need one reference point per pyramid level")
    g = as_finite_f64(upstream, "upstream")
    if g.shape != (params.out_channels,):
        raise ValueError("upstream length must equal out_channels")
    m, k = params.heads, params.points
    n_levels = len(maps)

    # Forward intermediates.
    p_vox = as_finite_f64(voxel_feat, "voxel_feat")
    p_img = adapted_voxel_feature(p_vox, params)
    f0 = bilinear_sample(maps[0], refs[0][0], refs[0][1])
    u = f0 * p_img
    token = linear_forward(params.token_fc, u)
    off, attn = _offsets_attention(token, params)

    grad_maps = [np.zeros_like(fm.data) for fm in maps]
    g_off = np.zeros((m, k, 2))
    g_attn = np.zeros((m, k))
    g_value = np.zeros_like(params.value_proj)
    g_output = np.zeros_like(params.output_proj)

    gl = g / n_levels
    for li, fmap in enumerate(maps):
        pos = refs[li] + off  # (M, K, 2)
        s = sample_grid(fmap.data, pos[..., 0].ravel(), pos[..., 1].ravel())
        s = s.reshape(m, k, params.img_channels)
        v = np.einsum("mij,mkj->mki", params.value_proj, s)

        head_sum = np.einsum("mk,mki->mi", attn, v)
        g_output += np.einsum("c,mj->mcj", gl, head_sum)
        gh = np.einsum("mcj,c->mj", params.output_proj, gl)
        g_attn += np.einsum("mi,mki->mk", gh, v)
        gv = attn[..., None] * gh[:, None, :]
        g_value += np.einsum("mki,mkj->mij", gv, s)
        gs = np.einsum("mij,mki->mkj", params.value_proj, gv)
        for mi in range(m):
            for ki in range(k):
                corners, gx, gy = bilinear_sample_grad(
                    fmap, pos[mi, ki, 0], pos[mi, ki, 1], gs[mi, ki]
                )
                for yy, xx, wgt in corners:
                    grad_maps[li][yy, xx] += wgt * gs[mi, ki]
                g_off[mi, ki, 0] += gx
                g_off[mi, ki, 1] += gy

    # Per-head softmax backward, then the two token-driven nets.
    g_logits = attn * (g_attn - np.sum(g_attn * attn, axis=1, keepdims=True))
    attn_w, attn_b, g_tok_a = linear_backward(
        params.attn_net, token, g_logits.reshape(m * k)
    )
    off_w, off_b, g_tok_o = linear_backward(
        params.offset_net, token, g_off.reshape(2 * m * k)
    )
    g_token = g_tok_a + g_tok_o
    tok_w, tok_b, g_u = linear_backward(params.token_fc, u, g_token)

    g_f0 = g_u * p_img
    g_p_img = g_u * f0
    corners, _, _ = bilinear_sample_grad(maps[0], refs[0][0], refs[0][1], g_f0)
    for yy, xx, wgt in corners:
        grad_maps[0][yy, xx] += wgt * g_f0

    if params.voxel_map is not None:
        vmap_w, vmap_b, g_p = linear_backward(params.voxel_map, p_vox, g_p_img)
    else:
        vmap_w = vmap_b = None
        g_p = g_p_img.copy()

    return FusionGrads(
        token_fc_weight=tok_w,
        token_fc_bias=tok_b,
        offset_weight=off_w,
        offset_bias=off_b,
        attn_weight=attn_w,
        attn_bias=attn_b,
        value_proj=g_value,
        output_proj=g_output,
        voxel_map_weight=vmap_w,
        voxel_map_bias=vmap_b,
        level_maps=tuple(grad_maps),
        voxel_feat=g_p,
    )


def image_contribution_batch(
    levels: Sequence[FeatureMap], references, voxel_feats, params: FusionParams
) -> Array:
    """Vectorized :func:`image_contribution` over N voxels.

    `references` is (N, 2) for a single level or (N, L, 2); returns (N, c).
    Used by the benchmark harness and the threaded fuse path.
    """
    maps = list(levels)
    refs = np.asarray(references, dtype=np.float64)
    if refs.ndim == 2:
        refs = refs[:, None, :]
    if refs.ndim != 3 or refs.shape[2] != 2 or refs.shape[1] != len(maps):
        raise ValueError("references must be (N, L, 2) matching the level count")
    feats = np.asarray(voxel_feats, dtype=np.float64)
    n = feats.shape[0]
    m, k, d = params.heads, params.points, params.img_channels
    if n == 0:
        return np.zeros((0, params.out_channels))

    if params.voxel_map is None:
        p_img = feats
    else:
        p_img = feats @ params.voxel_map.weight.T + params.voxel_map.bias
    f0 = sample_grid(maps[0].data, refs[:, 0, 0], refs[:, 0, 1])
    token = (f0 * p_img) @ params.token_fc.weight.T + params.token_fc.bias
    off = (token @ params.offset_net.weight.T + params.offset_net.bias).reshape(n, m, k, 2)
    logits = (token @ params.attn_net.weight.T + params.attn_net.bias).reshape(n, m, k)
    z = logits - logits.max(axis=2, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=2, keepdims=True)

    out = None
    for li, fmap in enumerate(maps):
        pos = refs[:, li][:, None, None, :] + off
        s = sample_grid(fmap.data, pos[..., 0].ravel(), pos[..., 1].ravel())
        s = s.reshape(n, m, k, d)
        v = np.einsum("mij,nmkj->nmki", params.value_proj, s)
        head_sum = np.einsum("nmk,nmki->nmi", z, v)
        y = np.einsum("mcj,nmj->nc", params.output_proj, head_sum)
        out = y if out is None else out + y
    return out / len(maps)


# ---------------------------------------------------------------------------
# Dense baseline: attention over every pixel.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseAttentionParams:
    """Query/key/value/output projections for attention over all positions."""

    query: LinearLayer  # voxel feature c -> dk
    key: LinearLayer    # image feature d -> dk
    value: LinearLayer  # image feature d -> dv
    out: LinearLayer    # dv -> c

    def __post_init__(self):
        if self.query.out_dim != self.key.out_dim:
            raise ValueError("query and key must share their output width")
        if self.out.in_dim != self.value.out_dim:
            raise ValueError("out must consume value outputs")
        if self.out.out_dim != self.query.in_dim:
            raise ValueError("out must produce voxel-feature-sized vectors")

    @property
    def key_dim(self) -> int:
        return self.key.out_dim


def make_dense_params(
    rng: np.random.Generator,
    img_channels: int,
    out_channels: int,
    key_dim: Optional[int] = None,
    value_dim: Optional[int] = None,
) -> DenseAttentionParams:
    d = int(img_channels)
    c = int(out_channels)
    dk = d if key_dim is None else int(key_dim)
    dv = d if value_dim is None else int(value_dim)

    def lin(o, i):
        return LinearLayer(rng.normal(size=(o, i)) / math.sqrt(i), 0.1 * rng.normal(size=o))

    return DenseAttentionParams(query=lin(dk, c), key=lin(dk, d), value=lin(dv, d), out=lin(c, dv))


def dense_attention(fmap: FeatureMap, voxel_feat, params: DenseAttentionParams) -> Array:
    """Attention of one voxel over every pixel of the map.

    Weights are softmax over all h*w positions of query(voxel) . key(pixel)
    scaled by 1/sqrt(dk); the output is the out-projected weighted value sum.
    Cost grows with the image area, unlike the deformable operator.
    """
    p = as_finite_f64(voxel_feat, "voxel_feat")
    flat = fmap.data.reshape(-1, fmap.d)
    q = linear_forward(params.query, p)
    scores = (flat @ params.key.weight.T + params.key.bias) @ q
    scores /= math.sqrt(params.key_dim)
    wts = softmax(scores)
    ctx = wts @ (flat @ params.value.weight.T + params.value.bias)
    return linear_forward(params.out, ctx)


def dense_attention_batch(
    fmap: FeatureMap,
    voxel_feats,
    params: DenseAttentionParams,
    chunk_elems: int = 8_000_000,
) -> Array:
    """Vectorized :func:`dense_attention` over N voxels, chunked over rows so
    the (chunk, h*w) score matrix stays within a bounded footprint."""
    feats = np.asarray(voxel_feats, dtype=np.float64)
    n = feats.shape[0]
    if n == 0:
        return np.zeros((0, params.out.out_dim))
    flat = fmap.data.reshape(-1, fmap.d)
    keys = flat @ params.key.weight.T + params.key.bias
    vals = flat @ params.value.weight.T + params.value.bias
    q = feats @ params.query.weight.T + params.query.bias
    scale = math.sqrt(params.key_dim)
    chunk = max(1, int(chunk_elems // max(1, keys.shape[0])))
    out = np.empty((n, params.out.out_dim))
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        sc = q[s:e] @ keys.T
        sc /= scale
        sc -= sc.max(axis=1, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=1, keepdims=True)
        out[s:e] = (sc @ vals) @ params.out.weight.T + params.out.bias
    return out


# ---------------------------------------------------------------------------
# Image-level dropout and whole-scene fusion.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DropoutMask:
    """Per-camera keep flags; a dropped camera contributes exactly zero."""

    keep: tuple

    def __post_init__(self):
        object.__setattr__(self, "keep", tuple(bool(b) for b in self.keep))

    @property
    def kept_count(self) -> int:
        return sum(self.keep)


def make_dropout_mask(camera_count: int, keep_count: int, rng_seed) -> DropoutMask:
    """Uniformly choose keep_count cameras to keep; the rest are dropped."""
    n = int(camera_count)
    k = int(keep_count)
    if n < 1:
        raise ValueError("camera_count must be >= 1")
    if not 0 <= k <= n:
        raise ValueError("keep_count must be between 0 and camera_count")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    kept = rng.choice(n, size=k, replace=False)
    keep = np.zeros(n, dtype=bool)
    keep[kept] = True
    return DropoutMask(keep=tuple(keep.tolist()))


@dataclass(frozen=True)
class FusedVoxelSet:
    """Voxels plus fused features and fusion provenance.

    `cameras[i]` is the priority-first in-view camera for voxel i (-1 when no
    camera sees it) regardless of the dropout mask; `contributed[i]` is True
    only when that camera was kept and image features were actually added.
    """

    voxels: VoxelSet
    fused: Array
    cameras: Array
    contributed: Array

    def __post_init__(self):
        fused = as_finite_f64(self.fused, "fused features")
        cams = np.asarray(self.cameras, dtype=np.int64)
        contrib = np.asarray(self.contributed, dtype=bool)
        j = len(self.voxels)
        if fused.shape != (j, self.voxels.feature_dim):
            raise ValueError("fused features must be (j, c)")
        if cams.shape != (j,) or contrib.shape != (j,):
            raise ValueError("cameras/contributed must be length j")
        object.__setattr__(self, "fused", np.ascontiguousarray(fused))
        object.__setattr__(self, "cameras", np.ascontiguousarray(cams))
        object.__setattr__(self, "contributed", np.ascontiguousarray(contrib))


def fuse_scene(
    voxels: VoxelSet,
    pyramids: Sequence,
    rig: CameraRig,
    params: FusionParams,
    mask: DropoutMask,
    workers: int = 0,
) -> FusedVoxelSet:
    """Fuse image features into every voxel of a scene.

    `pyramids[j]` is camera j's FeaturePyramid; it may be None only when
    camera j is dropped. Each voxel picks its priority-first in-view camera;
    if that camera is kept, the image contribution is added to the voxel
    feature, otherwise the voxel passes through unchanged. Voxels are
    independent, so the optional thread pool (workers > 1) changes nothing
    but wall-clock.
    """
    n_cam = len(rig.cameras)
    if len(pyramids) != n_cam:
        raise ValueError("need one pyramid slot per rig camera")
    if len(mask.keep) != n_cam:
        raise ValueError("dropout mask length must match the camera count")
    if voxels.feature_dim != params.out_channels:
        raise ValueError("voxel feature width must equal params.out_channels")

    scales = None
    for j in range(n_cam):
        if mask.keep[j]:
            pyr = pyramids[j]
            if pyr is None:
                raise ValueError(f"kept camera {j} has no feature pyramid")
            if pyr.levels[0].d != params.img_channels:
                raise ValueError(f"camera {j} pyramid channels do not match params")
            if scales is None:
                scales = tuple(pyr.scales)
            elif tuple(pyr.scales) != scales:
                raise ValueError("all kept pyramids must share scale factors")

    j_total = len(voxels)
    fused = voxels.features.copy()
    cameras = np.full(j_total, -1, dtype=np.int64)
    contributed = np.zeros(j_total, dtype=bool)

    def fuse_range(lo: int, hi: int) -> None:
        for i in range(lo, hi):
            res = select_camera(rig, voxels.centers[i])
            if res is None:
                continue
            cam = res.camera_index
            cameras[i] = cam
            if not mask.keep[cam]:
                continue
            refs = tuple((res.pixel[0] * s, res.pixel[1] * s) for s in scales)
            contrib = image_contribution(
                pyramids[cam].levels, refs, voxels.features[i], params
            )
            fused[i] = voxels.features[i] + contrib
            contributed[i] = True

    if workers and workers > 1 and j_total:
        from concurrent.futures import ThreadPoolExecutor

        step = max(1, -(-j_total // workers))
        spans = [(s, min(s + step, j_total)) for s in range(0, j_total, step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda span: fuse_range(*span), spans))
    else:
        fuse_range(0, j_total)

    return FusedVoxelSet(voxels=voxels, fused=fused, cameras=cameras, contributed=contributed)
