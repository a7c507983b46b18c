"""Deformable convolution with shared offsets for symmetric midpoint pairs.

Single-image numpy implementation (stride 1, same padding, zero fill outside
the map). Offsets are laid out ``[2*T, H, W]`` with ``(dy, dx)`` per tap and
taps in row-major kernel order. Arithmetic is float64 throughout.
"""
from __future__ import annotations

import numpy as np

from .heatmap import ShapeError

DIRECTIONS = ("left", "right", "up", "down")


def _left_cell(v):
    # at integer coordinates the cell to the left/above is used, so the
    # sampled value is exact and the derivative is the backward difference
    lo = np.ceil(v) - 1
    return lo.astype(np.int64), v - lo


def _gather(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """``img[..., ys, xs]`` with zeros outside the map."""
    h, w = img.shape[-2:]
    inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    vals = img[..., np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)]
    return np.where(inside, vals, 0.0)


def bilinear_sample(channel: np.ndarray, x: float, y: float) -> float:
    img = np.asarray(channel, dtype=np.float64)
    (x0,), (fx,) = _left_cell(np.array([x], dtype=np.float64))
    (y0,), (fy,) = _left_cell(np.array([y], dtype=np.float64))
    corners = _gather(img, np.array([y0, y0, y0 + 1, y0 + 1]), np.array([x0, x0 + 1, x0, x0 + 1]))
    wts = np.array([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return float(corners @ wts)


def _taps(kh: int, kw: int) -> tuple[np.ndarray, np.ndarray]:
    ty, tx = np.mgrid[0:kh, 0:kw]
    return (ty - kh // 2).ravel(), (tx - kw // 2).ravel()


def _check(inp, weight, bias, offsets):
    if inp.ndim != 3 or weight.ndim != 4:
        raise ShapeError("input must be [C,H,W] and kernel [O,C,kh,kw]")
    c, h, w = inp.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if bias is not None and np.shape(bias) != (o,):
        raise ShapeError(f"bias must have shape ({o},)")
    if offsets.shape != (2 * kh * kw, h, w):
        raise ShapeError(f"offsets must have shape {(2 * kh * kw, h, w)}, got {offsets.shape}")


def _sampling(inp, kh, kw, offsets):
    """Corner indices, fractional weights and sampled columns [C, T, H, W]."""
    _, h, w = inp.shape
    tdy, tdx = _taps(kh, kw)
    gy, gx = np.mgrid[0:h, 0:w]
    sy = gy[None] + tdy[:, None, None] + offsets[0::2]
    sx = gx[None] + tdx[:, None, None] + offsets[1::2]
    y0, fy = _left_cell(sy)
    x0, fx = _left_cell(sx)
    v00 = _gather(inp, y0, x0)
    v01 = _gather(inp, y0, x0 + 1)
    v10 = _gather(inp, y0 + 1, x0)
    v11 = _gather(inp, y0 + 1, x0 + 1)
    cols = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    return y0, x0, fy, fx, (v00, v01, v10, v11), cols


def deform_conv(inp, weight, offsets, bias=None) -> np.ndarray:
    inp = np.asarray(inp, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    _check(inp, weight, bias, offsets)
    o, c, kh, kw = weight.shape
    *_, cols = _sampling(inp, kh, kw, offsets)
    out = np.einsum("oct,cthw->ohw", weight.reshape(o, c, kh * kw), cols)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def symmetric_pair_forward(inp, weight_a, weight_b, offsets, bias_a=None, bias_b=None, factor: float = 2.0):
    """Two deformable convolutions over one input driven by a single offset field.

    Branch ``a`` samples at the offsets as given, branch ``b`` at ``factor``
    times them, reaching the opposite midpoint of a symmetric pair.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    wa, wb = np.shape(weight_a), np.shape(weight_b)
    if wa[2:] != wb[2:]:
        raise ShapeError("both branches need the same kernel size")
    out_a = deform_conv(inp, weight_a, offsets, bias_a)
    out_b = deform_conv(inp, weight_b, factor * offsets, bias_b)
    return out_a, out_b


def deform_conv_grad(inp, weight, offsets, upstream, bias=None):
    """Gradients of ``sum(upstream * deform_conv(...))``.

    Returns ``(grad_input, grad_weight, grad_offsets, grad_bias)``.
    """
    inp = np.asarray(inp, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    _check(inp, weight, bias, offsets)
    o, c, kh, kw = weight.shape
    _, h, w = inp.shape
    if up.shape != (o, h, w):
        raise ShapeError(f"upstream must have shape {(o, h, w)}, got {up.shape}")
    t = kh * kw
    y0, x0, fy, fx, (v00, v01, v10, v11), cols = _sampling(inp, kh, kw, offsets)
    w3 = weight.reshape(o, c, t)

    grad_bias = up.sum(axis=(1, 2))
    grad_weight = np.einsum("ohw,cthw->oct", up, cols).reshape(weight.shape)
    grad_cols = np.einsum("oct,ohw->cthw", w3, up)

    d_sx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_sy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    grad_offsets = np.empty_like(offsets)
    grad_offsets[0::2] = (grad_cols * d_sy).sum(axis=0)
    grad_offsets[1::2] = (grad_cols * d_sx).sum(axis=0)

    grad_input = np.zeros_like(inp)
    for dy, dx, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ys, xs = y0 + dy, x0 + dx
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        contrib = grad_cols * wt  # [C, T, H, W]
        flat = (ys * w + xs)[ok]
        for ch in range(c):
            np.add.at(grad_input[ch].reshape(-1), flat, contrib[ch][ok])
    return grad_input, grad_weight, grad_offsets, grad_bias


def conv2d_same(inp, weight, bias=None) -> np.ndarray:
    """Plain stride-1 zero-padded correlation, the zero-offset reference."""
    inp = np.asarray(inp, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    o, c, kh, kw = weight.shape
    _, h, w = inp.shape
    py, px = kh // 2, kw // 2
    padded = np.pad(inp, ((0, 0), (py, py), (px, px)))
    out = np.zeros((o, h, w))
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("oc,chw->ohw", weight[:, :, i, j], padded[:, i : i + h, j : j + w])
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def directional_pool(fmap, direction: str) -> np.ndarray:
    """Running maximum scanned from a border toward each pixel.

    ``left`` takes the max over columns at or right of x (the scan runs
    leftward from the right border); ``right``, ``up`` and ``down`` follow.
    """
    a = np.asarray(fmap)
    if direction == "left":
        return np.maximum.accumulate(a[..., ::-1], axis=-1)[..., ::-1]
    if direction == "right":
        return np.maximum.accumulate(a, axis=-1)
    if direction == "up":
        return np.maximum.accumulate(a[..., ::-1, :], axis=-2)[..., ::-1, :]
    if direction == "down":
        return np.maximum.accumulate(a, axis=-2)
    raise ValueError(f"direction must be one of {DIRECTIONS}")
