"""Dense numeric kernels shared by every other module.

Feature maps, linear layers, softmax, bilinear sampling with analytic
gradients, and a central finite-difference gradient checker. Everything is
float64 and no operation mutates its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Array = np.ndarray


def as_finite_f64(values, name: str) -> Array:
    """Coerce to a float64 array, rejecting NaN/inf."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Dense (h, w, d) float64 feature map, row-major with channels last.

    `data[row, col, channel]`; column index is the x pixel coordinate and
    row index the y pixel coordinate used by :func:`bilinear_sample`.
    """

    data: Array

    def __post_init__(self):
        arr = as_finite_f64(self.data, "feature map")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError("feature map must be (h, w, d) with all dims >= 1")
        object.__setattr__(self, "data", np.ascontiguousarray(arr))

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LinearLayer:
    """Affine map x -> weight @ x + bias with weight (out, in), bias (out,)."""

    weight: Array
    bias: Array

    def __post_init__(self):
        w = as_finite_f64(self.weight, "weight")
        b = as_finite_f64(self.bias, "bias")
        if w.ndim != 2:
            raise ValueError("weight must be 2-D (out, in)")
        if b.shape != (w.shape[0],):
            raise ValueError(
                f"bias shape {b.shape} does not match weight rows {w.shape[0]}"
            )
        object.__setattr__(self, "weight", np.ascontiguousarray(w))
        object.__setattr__(self, "bias", np.ascontiguousarray(b))

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @staticmethod
    def identity(n: int) -> "LinearLayer":
        return LinearLayer(np.eye(n), np.zeros(n))

    @staticmethod
    def zeros(out_dim: int, in_dim: int) -> "LinearLayer":
        return LinearLayer(np.zeros((out_dim, in_dim)), np.zeros(out_dim))


def linear_forward(layer: LinearLayer, x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.in_dim,):
        raise ValueError(
            f"input length {x.shape} does not match layer in_dim {layer.in_dim}"
        )
    return layer.weight @ x + layer.bias


def linear_backward(layer: LinearLayer, x: Array, upstream: Array):
    """Gradients of `upstream . (W x + b)`.

    Returns (grad_weight, grad_bias, grad_input).
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (layer.out_dim,):
        raise ValueError("upstream length does not match layer out_dim")
    return np.outer(g, x), g.copy(), layer.weight.T @ g


def softmax(logits: Array) -> Array:
    """Numerically stable softmax over a 1-D logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("logits must be a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_backward(output: Array, upstream: Array) -> Array:
    """Gradient of softmax given its output probabilities."""
    y = np.asarray(output, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if y.shape != g.shape:
        raise ValueError("output and upstream shapes differ")
    return y * (g - float(g @ y))


# The four bilinear corners in a fixed order: (dy, dx, weight function).
# Keeping the order fixed keeps summation deterministic.
def _corner_terms(fx: float, fy: float):
    return (
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    )


def bilinear_sample(fmap: FeatureMap, x: float, y: float) -> Array:
    """Bilinearly interpolate the map at continuous pixel coords (x, y).

    Integer coordinates land exactly on pixels; samples outside the closed
    [0, w-1] x [0, h-1] window blend with zero padding, so the result decays
    continuously to zero within one pixel of the border.
    """
    x = float(x)
    y = float(y)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    h, w = fmap.h, fmap.w
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0
    out = np.zeros(fmap.d)
    for dy, dx, wgt in _corner_terms(fx, fy):
        yy = y0 + dy
        xx = x0 + dx
        if 0 <= yy < h and 0 <= xx < w:
            out += wgt * fmap.data[yy, xx]
    return out


def bilinear_sample_grad(fmap: FeatureMap, x: float, y: float, upstream: Array):
    """Gradients of `upstream . bilinear_sample(fmap, x, y)`.

    Returns (corners, grad_x, grad_y) where corners is a list of
    (row, col, weight) for the in-range corners; the gradient w.r.t.
    map[row, col, :] is weight * upstream.
    """
    x = float(x)
    y = float(y)
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("sample coordinates must be finite")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (fmap.d,):
        raise ValueError("upstream length does not match map channels")
    h, w = fmap.h, fmap.w
    x0 = math.floor(x)
    y0 = math.floor(y)
    fx = x - x0
    fy = y - y0

    def corner_val(dy: int, dx: int) -> Array:
        yy = y0 + dy
        xx = x0 + dx
        if 0 <= yy < h and 0 <= xx < w:
            return fmap.data[yy, xx]
        return np.zeros(fmap.d)

    c00 = corner_val(0, 0)
    c10 = corner_val(0, 1)  # +x neighbour
    c01 = corner_val(1, 0)  # +y neighbour
    c11 = corner_val(1, 1)

    dval_dx = (1.0 - fy) * (c10 - c00) + fy * (c11 - c01)
    dval_dy = (1.0 - fx) * (c01 - c00) + fx * (c11 - c10)
    grad_x = float(g @ dval_dx)
    grad_y = float(g @ dval_dy)

    corners = []
    for dy, dx, wgt in _corner_terms(fx, fy):
        yy = y0 + dy
        xx = x0 + dx
        if 0 <= yy < h and 0 <= xx < w:
            corners.append((yy, xx, wgt))
    return corners, grad_x, grad_y


def sample_grid(data: Array, xs: Array, ys: Array) -> Array:
    """Vectorized bilinear sampling of many points on a raw (h, w, d) array.

    Same zero-padding convention and corner summation order as
    :func:`bilinear_sample`; used by the batched fusion kernels.
    """
    h, w, _ = data.shape
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0f = np.floor(xs)
    y0f = np.floor(ys)
    fx = xs - x0f
    fy = ys - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    out = None
    for dy, dx, wgt in _corner_terms(fx, fy):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        term = (wgt * ok)[..., None] * data[yc, xc]
        out = term if out is None else out + term
    return out


@dataclass(frozen=True)
class GradCheckReport:
    """Result of a finite-difference sweep over one flat parameter vector."""

    max_relative_error: float
    worst_index: int
    analytic: float
    numeric: float

    def ok(self, tol: float) -> bool:
        return self.max_relative_error < tol


def finite_diff_check(function, point, analytic_grad, step: float = 1e-5) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    `function` maps a flat float64 vector to a scalar. Every coordinate of
    `point` is perturbed by +/- step; the relative error uses the denominator
    max(|analytic|, |numeric|, floor) with floor = 1e-6 * the gradient's own
    infinity norm (never below 1e-8). Without the scale term, a coordinate
    whose true derivative sits below the difference quotient's cancellation
    noise reports a spurious error no matter how exact the analytic gradient;
    with it, only discrepancies beneath that noise are forgiven — anything
    large relative to the gradient still lands in the numerator.
    """
    if not (math.isfinite(step) and step > 0):
        raise ValueError("step must be a positive finite real")
    p = np.array(point, dtype=np.float64).ravel()
    g = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError("point and analytic gradient sizes differ")

    scale_floor = max(1e-8, 1e-6 * float(np.abs(g).max(initial=0.0)))
    worst_err = 0.0
    worst_idx = -1
    worst_a = 0.0
    worst_n = 0.0
    work = p.copy()
    for i in range(p.size):
        base = work[i]
        work[i] = base + step
        f_plus = float(function(work))
        work[i] = base - step
        f_minus = float(function(work))
        work[i] = base
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError("function returned a non-finite value during probing")
        numeric = (f_plus - f_minus) / (2.0 * step)
        analytic = g[i]
        denom = max(abs(analytic), abs(numeric), scale_floor)
        err = abs(analytic - numeric) / denom
        if err > worst_err:
            worst_err = err
            worst_idx = i
            worst_a = analytic
            worst_n = numeric
    return GradCheckReport(worst_err, worst_idx, worst_a, worst_n)
