"""Differentiable operators with hand-written backward passes.

Each public function takes :class:`Tensor` inputs, computes the forward value
with numpy (or the compiled loops in :mod:`kernels`) and registers a closure
mapping the output gradient to input gradients. Shapes are never broadcast;
mismatches raise ``ValueError``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, as_tensor, note_branch, record


def _tuple(v, n: int) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v!r}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# convolution


def _conv2d_forward(x, w, stride, padding, dilation):
    B, C, H, W = x.shape
    O, _, KH, KW = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    OH = (H + 2 * ph - dh * (KH - 1) - 1) // sh + 1
    OW = (W + 2 * pw - dw * (KW - 1) - 1) // sw + 1
    if OH <= 0 or OW <= 0:
        raise ValueError(f"conv2d: empty output for input {x.shape} and kernel {w.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(x)
    cols = np.empty((C * KH * KW, B * OH * OW), dtype=x.dtype)
    kernels.im2col(xp, cols, KH, KW, sh, sw, dh, dw, OH, OW)
    out = (w.reshape(O, -1) @ cols).reshape(O, B, OH, OW).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols, xp.shape


def _conv2d_backward(g, cols, w, x_shape, xp_shape, stride, padding, dilation):
    B, C, H, W = x_shape
    O, _, KH, KW = w.shape
    _, _, OH, OW = g.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    gm = g.transpose(1, 0, 2, 3).reshape(O, -1)
    gw = (gm @ cols.T).reshape(w.shape)
    gc = w.reshape(O, -1).T @ gm
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    kernels.col2im(gc, gxp, KH, KW, sh, sw, dh, dw, OH, OW)
    return gxp[:, :, ph: ph + H, pw: pw + W], gw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0, dilation=1) -> Tensor:
    """Zero-padded 2D cross-correlation over a BCHW input."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects BCHW input and OCKhKw weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")
    stride, padding, dilation = _tuple(stride, 2), _tuple(padding, 2), _tuple(dilation, 2)
    if min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1, padding >= 0")
    out, cols, xp_shape = _conv2d_forward(x.data, weight.data, stride, padding, dilation)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx, gw = _conv2d_backward(g, cols, weight.data, x.shape, xp_shape, stride, padding, dilation)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("conv2d", inputs, out, backward)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Zero-padded 3D cross-correlation over a BCDHW input."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects BCDHW input and OCKdKhKw weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv3d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}")
    if x.dtype != weight.dtype:
        raise ValueError(f"conv3d: dtype mismatch {x.dtype} vs {weight.dtype}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({weight.shape[0]},)")
    stride, padding = _tuple(stride, 3), _tuple(padding, 3)
    if min(stride) < 1 or min(padding) < 0:
        raise ValueError("conv3d: stride must be >= 1, padding >= 0")
    B, C, D, H, W = x.shape
    O, _, KD, KH, KW = weight.shape
    pd, ph, pw = padding
    sd, sh, sw = stride
    OD = (D + 2 * pd - KD) // sd + 1
    OH = (H + 2 * ph - KH) // sh + 1
    OW = (W + 2 * pw - KW) // sw + 1
    if OD <= 0 or OH <= 0 or OW <= 0:
        raise ValueError(f"conv3d: empty output for input {x.shape} and kernel {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    out = np.zeros((B, O, OD, OH, OW), dtype=x.dtype)
    unit = stride == (1, 1, 1)
    if unit:
        kernels.conv3d_forward_unit(xp, weight.data, out)
    else:
        kernels.conv3d_forward(xp, weight.data, out, sd, sh, sw)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        if unit:
            kernels.conv3d_backward_unit(xp, weight.data, g, gxp, gw)
        else:
            kernels.conv3d_backward(xp, weight.data, g, gxp, gw, sd, sh, sw)
        gx = gxp[:, :, pd: pd + D, ph: ph + H, pw: pw + W]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("conv3d", inputs, out, backward)


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    note_branch(x.data > 0)
    return record("relu", [x], out, lambda g: (g * (out > 0),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record("sigmoid", [x], out, lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record("add", [a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record("sub", [a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", [x], x.data * x.dtype.type(c), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default); other extents must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return record("concat", tensors, out, backward)


def pointwise(a: Tensor, b, kind: str) -> Tensor:
    """Dispatch for the binary maps: ``add``, ``mul``, ``concat_channels``, ``scale``.

    For ``scale`` the second argument is a Python number.
    """
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "concat_channels":
        return concat([a, b], axis=1)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    shifted = x.data + x.dtype.type(eps)
    return record("log", [x], np.log(shifted), lambda g: (g / shifted,))


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber penalty with unit threshold."""
    d = x.data
    ad = np.abs(d)
    out = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    note_branch(ad < 1.0)
    return record("smooth_l1", [x], out, lambda g: (g * np.clip(d, -1.0, 1.0),))


# ---------------------------------------------------------------------------
# shape plumbing and reductions


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    return record("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(old),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ValueError(f"slice [{start}, {stop}) out of range for axis {axis} of extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return record("slice", [x], x.data[index], backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, 1, start, stop)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _check_same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    return record("stack", tensors, out, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)
    return record("sum_axis", [x], out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def reduce_mean(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over all elements, or over the elements where ``mask`` is 1."""
    if mask is None:
        count = x.data.size
        if count == 0:
            raise ValueError("reduce_mean: no valid pixels")
        out = np.asarray(x.data.sum() / count, dtype=x.dtype)
        return record("reduce_mean", [x], out, lambda g: (np.full(x.shape, g / count, dtype=x.dtype),))
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ValueError(f"reduce_mean: mask shape {mask.shape} != input shape {x.shape}")
    sel = mask.astype(x.dtype)
    count = float(sel.sum())
    if count == 0:
        raise ValueError("reduce_mean: no valid pixels")
    out = np.asarray((x.data * sel).sum() / count, dtype=x.dtype)
    return record("reduce_mean", [x], out, lambda g: (sel * (g / count),))


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", [x], out, backward)


def weighted_index_sum(p: Tensor, axis: int = 1) -> Tensor:
    """Sum over ``axis`` of ``index * p``; with ``p`` a distribution this is its mean index."""
    n = p.shape[axis]
    shape = [1] * p.ndim
    shape[axis] = n
    idx = np.arange(n, dtype=p.dtype).reshape(shape)
    out = (p.data * idx).sum(axis=axis)
    return record("weighted_index_sum", [p], out, lambda g: (np.expand_dims(g, axis) * idx,))


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n: int, mode: str, dtype) -> np.ndarray:
    m = np.zeros((2 * n, n), dtype=dtype)
    if mode == "nearest":
        m[np.arange(2 * n), np.arange(2 * n) // 2] = 1.0
        return m
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    return m


def upsample2x(x: Tensor, mode: str = "bilinear") -> Tensor:
    """Double H and W of a BCHW tensor (bilinear uses half-pixel centres, no corner alignment)."""
    if x.ndim != 4:
        raise ValueError(f"upsample2x expects BCHW, got {x.shape}")
    mh = _interp_matrix(x.shape[2], mode, x.dtype)
    mw = _interp_matrix(x.shape[3], mode, x.dtype)
    out = mh @ (x.data @ mw.T)
    return record("upsample2x", [x], out, lambda g: ((mh.T @ g) @ mw,))


def _disparity_matrix(n: int, dtype) -> np.ndarray:
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        lo = min(i // 2, n - 1)
        hi = min((i + 1) // 2, n - 1)
        m[i, lo] += 0.5
        m[i, hi] += 0.5
    return m


def upsample_disparity2x(x: Tensor) -> Tensor:
    """Double the disparity axis (axis 1) of B×D×H×W scores.

    Level ``i`` of the output reads level ``i/2`` of the input, so a score at
    half resolution keeps its meaning as a shift of ``2·k`` full-resolution pixels.
    """
    if x.ndim != 4:
        raise ValueError(f"upsample_disparity2x expects BDHW, got {x.shape}")
    m = _disparity_matrix(x.shape[1], x.dtype)
    out = np.einsum("ij,bjhw->bihw", m, x.data, optimize=True)
    return record("upsample_disparity2x", [x], out, lambda g: (np.einsum("ij,bihw->bjhw", m, g, optimize=True),))


def bilinear_sample(src: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample a B×C×H×W map at fractional pixel coordinates ``(xs, ys)`` of shape B×H×W.

    Coordinates are clamped to the image (border replication); the coordinate
    gradient is zero wherever clamping is active.
    """
    if src.ndim != 4:
        raise ValueError(f"bilinear_sample expects a BCHW map, got {src.shape}")
    B, C, H, W = src.shape
    if xs.shape != (B, H, W) or ys.shape != (B, H, W):
        raise ValueError(f"bilinear_sample: coordinates must be {(B, H, W)}, got {xs.shape} and {ys.shape}")
    dt = src.dtype
    xc = np.clip(xs.data, 0, W - 1)
    yc = np.clip(ys.data, 0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    note_branch(x0, y0, xc == xs.data, yc == ys.data)
    fx = (xc - x0).astype(dt).reshape(B, 1, H * W)
    fy = (yc - y0).astype(dt).reshape(B, 1, H * W)
    flat = src.data.reshape(B, C, H * W)
    idx = [(yy * W + xx).reshape(B, 1, H * W) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    v00, v01, v10, v11 = (np.take_along_axis(flat, i, axis=2) for i in idx)
    # weighted form rather than a + f·(b − a): exact when f is 0 or 1
    top = (1 - fx) * v00 + fx * v01
    bot = (1 - fx) * v10 + fx * v11
    out = ((1 - fy) * top + fy * bot).reshape(B, C, H, W)
    inside_x = ((xs.data > 0) & (xs.data < W - 1)).reshape(B, 1, H * W)
    inside_y = ((ys.data > 0) & (ys.data < H - 1)).reshape(B, 1, H * W)

    def backward(g):
        g = g.reshape(B, C, H * W)
        weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
        base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
        pos = np.concatenate([np.broadcast_to(base + i, (B, C, H * W)).ravel() for i in idx])
        vals = np.concatenate([(g * wgt).ravel() for wgt in weights])
        gsrc = np.bincount(pos, weights=vals, minlength=B * C * H * W).astype(dt).reshape(B, C, H, W)
        dx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        dy = bot - top
        gx = ((g * dx).sum(axis=1, keepdims=True) * inside_x).reshape(B, H, W)
        gy = ((g * dy).sum(axis=1, keepdims=True) * inside_y).reshape(B, H, W)
        return gsrc, gx, gy

    return record("bilinear_sample", [src, xs, ys], out, backward)


def modulated_mean(samples: Tensor, m: Tensor, eps: float) -> Tensor:
    """Weighted mean of B×N×C×H×W samples with B×N×H×W weights: Σ mᵢSᵢ / max(Σ mᵢ, eps).

    The floor only guards against vanishing weights; above it the result is an
    exact convex combination.
    """
    if samples.ndim != 5 or m.shape != samples.shape[:2] + samples.shape[3:]:
        raise ValueError(f"modulated_mean: incompatible shapes {samples.shape} and {m.shape}")
    s, md = samples.data, m.data
    total = md.sum(axis=1)
    z = np.maximum(total, samples.dtype.type(eps))
    active = total >= eps
    note_branch(active)
    out = (md[:, :, None] * s).sum(axis=1) / z[:, None]

    def backward(g):
        gs = g[:, None] * (md / z[:, None])[:, :, None]
        # d/dm of the normalised mean is (S - out) / Σm; with the floor active it is S / eps
        centred = s - np.where(active, 1.0, 0.0)[:, None, None].astype(s.dtype) * out[:, None]
        gm = (g[:, None] * centred).sum(axis=2) / z[:, None]
        return gs, gm

    return record("modulated_mean", [samples, m], out, backward)


# ---------------------------------------------------------------------------
# local similarity


def neighbor_cosine(f: Tensor, shifts: Sequence[tuple], eps: float) -> Tensor:
    """Cosine similarity between each pixel's channel vector and its shifted neighbours.

    ``shifts`` is a list of ``(dy, dx)``; output channel ``k`` compares pixel
    ``(y, x)`` with ``(y+dy, x+dx)``. Out-of-image neighbours are zero vectors.
    Norms are floored per operand: ``dot / (max(|a|, eps) · max(|b|, eps))``.
    """
    if f.ndim != 4:
        raise ValueError(f"neighbor_cosine expects BCHW, got {f.shape}")
    B, C, H, W = f.shape
    dt = f.dtype
    R = max([max(abs(dy), abs(dx)) for dy, dx in shifts] + [0])
    fd = f.data
    sq = (fd * fd).sum(axis=1)
    nrm = np.sqrt(sq)
    # floored squared norms; sqrt(s * s) == s exactly, so equal vectors give exactly 1
    sqf = np.maximum(sq, dt.type(eps) ** 2)
    na = np.sqrt(sqf)
    note_branch(nrm > eps)
    fp = np.pad(fd, ((0, 0), (0, 0), (R, R), (R, R)))
    nap = np.pad(na, ((0, 0), (R, R), (R, R)), constant_values=dt.type(eps))
    sqfp = np.pad(sqf, ((0, 0), (R, R), (R, R)), constant_values=dt.type(eps) ** 2)
    K = len(shifts)
    out = np.empty((B, K, H, W), dtype=dt)
    for k, (dy, dx) in enumerate(shifts):
        nb = fp[:, :, R + dy: R + dy + H, R + dx: R + dx + W]
        den = np.sqrt(sqf * sqfp[:, R + dy: R + dy + H, R + dx: R + dx + W])
        out[:, k] = (fd * nb).sum(axis=1) / den
    # rounding can leave |cos| one ulp above 1
    np.clip(out, -1.0, 1.0, out=out)

    def backward(g):
        gfp = np.zeros_like(fp)
        gnap = np.zeros_like(nap)
        gf = np.zeros_like(fd)
        gna = np.zeros_like(na)
        for k, (dy, dx) in enumerate(shifts):
            ys, xs = slice(R + dy, R + dy + H), slice(R + dx, R + dx + W)
            nbn = nap[:, ys, xs]
            gk = g[:, k] / (na * nbn)
            gf += gk[:, None] * fp[:, :, ys, xs]
            gfp[:, :, ys, xs] += gk[:, None] * fd
            go = g[:, k] * out[:, k]
            gna -= go / na
            gnap[:, ys, xs] -= go / nbn
        gf += gfp[:, :, R: R + H, R: R + W]
        gna += gnap[:, R: R + H, R: R + W]
        active = nrm > eps
        coef = np.where(active, gna / np.where(active, nrm, 1.0), 0.0).astype(dt)
        gf += coef[:, None] * fd
        return (gf,)

    return record("neighbor_cosine", [f], out, backward)


# ---------------------------------------------------------------------------
# cost volume


def concat_volume(f_left: Tensor, f_right: Tensor, d_max: int) -> Tensor:
    """B×2C×D×H×W volume; slice ``d`` pairs left(x) with right(x−d), zeros where x−d < 0."""
    _check_same_shape(f_left, f_right, "concat_volume")
    B, C, H, W = f_left.shape
    if d_max < 1:
        raise ValueError("concat_volume: d_max must be >= 1")
    if d_max > W:
        raise ValueError(f"concat_volume: d_max {d_max} exceeds feature width {W}")
    out = np.zeros((B, 2 * C, d_max, H, W), dtype=f_left.dtype)
    out[:, :C] = f_left.data[:, :, None]
    for d in range(d_max):
        out[:, C:, d, :, d:] = f_right.data[:, :, :, : W - d]

    def backward(g):
        gl = g[:, :C].sum(axis=2)
        gr = np.zeros_like(f_right.data)
        for d in range(d_max):
            gr[:, :, :, : W - d] += g[:, C:, d, :, d:]
        return gl, gr

    return record("concat_volume", [f_left, f_right], out, backward)


def concat_volume_conv3d(f_left: Tensor, f_right: Tensor, weight: Tensor, bias: Optional[Tensor], d_max: int) -> Tensor:
    """``conv3d(concat_volume(f_left, f_right, d_max), weight, bias, padding=1)`` without the volume.

    The left half of the volume is constant along disparity and the right half
    is a horizontally shifted copy of ``f_right``, so the 3×3×3 convolution
    collapses to a handful of 2D convolutions whose outputs are added at
    disparity-dependent column shifts.
    """
    _check_same_shape(f_left, f_right, "concat_volume_conv3d")
    B, C, H, W = f_left.shape
    O = weight.shape[0]
    if weight.shape != (O, 2 * C, 3, 3, 3):
        raise ValueError(f"concat_volume_conv3d: weight must be ({O}, {2 * C}, 3, 3, 3), got {weight.shape}")
    if d_max < 1 or d_max > W:
        raise ValueError(f"concat_volume_conv3d: d_max {d_max} must lie in [1, {W}]")
    D = d_max
    wd = weight.data
    dt = f_left.dtype
    one, pad1, pad_v = (1, 1), (1, 1), (1, 0)
    out = np.zeros((B, O, D, H, W), dtype=dt)
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    left_cache = []
    for kd in range(3):
        a, cols, xps = _conv2d_forward(f_left.data, np.ascontiguousarray(wd[:, :C, kd]), one, pad1, one)
        lo, hi = max(0, 1 - kd), min(D, D + 1 - kd)
        out[:, :, lo:hi] += a[:, :, None]
        left_cache.append((cols, xps, lo, hi))
    right_cache = []
    for kd in range(3):
        for kx in range(3):
            wk = np.ascontiguousarray(wd[:, C:, kd, :, kx][..., None])
            hk, cols, xps = _conv2d_forward(f_right.data, wk, one, pad_v, one)
            spans = []
            for d in range(D):
                dp = d + kd - 1
                if not 0 <= dp < D:
                    continue
                s = kx - 1 - dp
                xlo, xhi = max(0, -s), min(W, W - kx + 1)
                if xlo >= xhi:
                    continue
                out[:, :, d, :, xlo:xhi] += hk[:, :, :, xlo + s: xhi + s]
                spans.append((d, s, xlo, xhi))
            right_cache.append((kd, kx, wk, cols, xps, spans))

    def backward(g):
        gw = np.zeros_like(wd)
        gl = np.zeros_like(f_left.data)
        gr = np.zeros_like(f_right.data)
        for kd, (cols, xps, lo, hi) in enumerate(left_cache):
            ga = np.ascontiguousarray(g[:, :, lo:hi].sum(axis=2))
            gx, gwk = _conv2d_backward(ga, cols, np.ascontiguousarray(wd[:, :C, kd]), f_left.shape, xps, one, pad1, one)
            gl += gx
            gw[:, :C, kd] += gwk
        for kd, kx, wk, cols, xps, spans in right_cache:
            gh = np.zeros((B, O, H, W), dtype=dt)
            for d, s, xlo, xhi in spans:
                gh[:, :, :, xlo + s: xhi + s] += g[:, :, d, :, xlo:xhi]
            gx, gwk = _conv2d_backward(gh, cols, wk, f_right.shape, xps, one, pad_v, one)
            gr += gx
            gw[:, C:, kd, :, kx] += gwk[..., 0]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return gl, gr, gw, gb

    inputs = [f_left, f_right, weight] + ([bias] if bias is not None else [])
    return record("concat_volume_conv3d", inputs, out, backward)


__all__ = [
    "as_tensor",
    "conv2d",
    "conv3d",
    "relu",
    "sigmoid",
    "activation",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "pointwise",
    "log",
    "smooth_l1",
    "reshape",
    "slice_axis",
    "channel_slice",
    "stack",
    "sum_axis",
    "reduce_mean",
    "softmax_axis",
    "weighted_index_sum",
    "upsample2x",
    "upsample_disparity2x",
    "bilinear_sample",
    "modulated_mean",
    "neighbor_cosine",
    "concat_volume",
    "concat_volume_conv3d",
]
