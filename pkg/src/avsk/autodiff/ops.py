"""Differentiable primitives.

Shapes are checked at every boundary. The only implicit broadcast is
``add_bias`` over trailing axes; everything else must match exactly or go
through an explicitly named op (``outer_add``, ``mask_mul``).
"""
from __future__ import annotations

import math

import numpy as np

from avsk.autodiff.tensor import Tensor, make_result
from avsk.errors import ConfigError, ContractError, DimensionError


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _const(x, like):
    return np.asarray(x, dtype=like.dtype)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    c = float(c)
    return make_result(a.data * _const(c, a.data), (a,), lambda g: (g * c,), "scale")


def mask_mul(a, mask):
    """Multiply by a constant (non-differentiated) array broadcastable to ``a``."""
    m = _const(mask, a.data)
    try:
        out = a.data * m
    except ValueError as exc:
        raise DimensionError(f"mask_mul: mask shape {m.shape} vs {a.shape}") from exc
    if out.shape != a.shape:
        raise DimensionError(f"mask_mul: mask shape {m.shape} would broadcast {a.shape}")
    return make_result(out, (a,), lambda g: (g * m,), "mask_mul")


def add_bias(x, b):
    """Add ``b`` over the trailing axes of ``x`` (``b.shape == x.shape[-b.ndim:]``)."""
    if b.ndim < 1 or b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def bw(g):
        return g, g.sum(axis=lead) if lead else g
    return make_result(x.data + b.data, (x, b), bw, "add_bias")


def outer_add(a, b):
    """(..., T, J) + (..., U, J) -> (..., T, U, J)."""
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"outer_add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data[..., :, None, :] + b.data[..., None, :, :]

    def bw(g):
        return g.sum(axis=-2), g.sum(axis=-3)
    return make_result(out, (a, b), bw, "outer_add")


def sigmoid(x):
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x):
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def swish(x):
    s = _sigmoid(x.data)
    xd = x.data
    y = xd * s
    return make_result(y, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "swish")


def relu(x):
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                       lambda g: (g * pos,), "relu")


def exp(x):
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def glu(x):
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    d2 = x.shape[-1]
    if d2 % 2:
        raise DimensionError(f"glu: last axis {d2} is odd")
    d = d2 // 2
    a, b = x.data[..., :d], x.data[..., d:]
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)
    return make_result(a * s, (x,), bw, "glu")


# -- reductions ------------------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x, axis=None):
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / n)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """(..., K) @ (K, N) -> (..., N); the right operand must be a matrix."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    k, n = bd.shape
    a2 = ad.reshape(-1, k)
    out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ bd.T).reshape(ad.shape)
        return ga, a2.T @ g2
    return make_result(out, (a, b), bw, "matmul")


def bmm(a, b):
    """(..., M, K) @ (..., K, N) with identical leading dims."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return make_result(ad @ bd, (a, b), bw, "bmm")


# -- shape ops -------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[a.shape for a in arrs]} along axis {axis}") from exc
    sizes = [a.shape[axis] for a in arrs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))
    return make_result(out, tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))
    return make_result(out, tensors, bw, "stack")


def slice_axis(x, axis, start, stop):
    shape, dtype = x.shape, x.dtype
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)
    return make_result(x.data[idx], (x,), bw, "slice")


def index_axis(x, axis, i):
    shape, dtype = x.shape, x.dtype
    idx = [slice(None)] * x.ndim
    idx[axis] = i
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)
    return make_result(x.data[idx], (x,), bw, "index")


def split(x, sizes, axis=-1):
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, axis, start, start + s))
        start += s
    if start != x.shape[axis]:
        raise DimensionError(f"split: sizes {sizes} do not cover axis of extent {x.shape[axis]}")
    return out


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: id out of range for table with {table.shape[0]} rows")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)
    return make_result(table.data[ids], (table,), bw, "embedding")


def pick(x, ids):
    """Gather ``x[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise DimensionError(f"pick: ids {ids.shape} vs leading dims {x.shape[:-1]}")
    shape, dtype = x.shape, x.dtype
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
        return (full,)
    return make_result(out, (x,), bw, "pick")


# -- normalisation / softmax ----------------------------------------------

def softmax(x):
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return make_result(y, (x,), bw, "softmax")


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return make_result(y, (x,), bw, "log_softmax")


def normalize(x, eps=1e-6):
    """Zero-mean, unit-variance over the last axis (no affine)."""
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return make_result(xhat, (x,), bw, "normalize")


def layer_norm(x, gain, bias, eps=1e-6):
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gain {gain.shape}/bias {bias.shape} vs last axis of {x.shape}")
    xhat = normalize(x, eps)
    lead = tuple(range(x.ndim - 1))
    gd, hd = gain.data, xhat.data

    def bw(g):
        return g * gd, (g * hd).sum(axis=lead) if lead else g * hd
    scaled = make_result(hd * gd, (xhat, gain), bw, "layer_norm_gain")
    return add_bias(scaled, bias)


def dropout(x, rate, rng):
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mask_mul(x, keep)


# -- convolutions ----------------------------------------------------------

def depthwise_conv1d(x, kernel, bias=None):
    """Same-padded per-channel convolution over the time axis.

    ``x`` is (..., T, D) and ``kernel`` is (K, D) with K odd; tap k multiplies
    ``x[t + k - (K-1)/2]`` (cross-correlation, zero padding).
    """
    if kernel.ndim != 2:
        raise DimensionError(f"depthwise_conv1d: kernel must be (K, D), got {kernel.shape}")
    k, d = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv1d needs an odd kernel, got K={k}", field="conv_kernel")
    if x.ndim < 2 or x.shape[-1] != d:
        raise DimensionError(f"depthwise_conv1d: input {x.shape} vs kernel {kernel.shape}")
    t = x.shape[-2]
    r = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + t, :] * w[j]

    def bw(g):
        gp = np.zeros_like(xp)
        gw = np.empty_like(w)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            gp[..., j:j + t, :] += g * w[j]
            gw[j] = (g * xp[..., j:j + t, :]).sum(axis=lead)
        return gp[..., r:r + t, :], gw
    y = make_result(out, (x, kernel), bw, "depthwise_conv1d")
    return add_bias(y, bias) if bias is not None else y


def _same_pad(n, k, s):
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernels, stride=1, padding="same"):
    """2D cross-correlation on (N, H, W, Cin) or (H, W, Cin) input."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}", field="stride")
    if padding not in ("same", "valid"):
        raise ConfigError(f"padding must be 'same' or 'valid', got {padding!r}", field="padding")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[-1] != kernels.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernels {kernels.shape}")
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernels.shape
    s = stride
    if padding == "same":
        ho, pt, pb = _same_pad(h, kh, s)
        wo, pl, pr = _same_pad(w, kw, s)
    else:
        if kh > h or kw > w:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w} (valid padding)")
        ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
        pt = pb = pl = pr = 0
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    wk = kernels.data
    out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :]
            out += patch @ wk[i, j]

    def bw(g):
        gp = np.zeros_like(xp)
        gw = np.empty_like(wk)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(i, i + s * (ho - 1) + 1, s),
                      slice(j, j + s * (wo - 1) + 1, s), slice(None))
                gp[sl] += g @ wk[i, j].T
                gw[i, j] = xp[sl].reshape(-1, cin).T @ g2
        return gp[:, pt:pt + h, pl:pl + w, :], gw
    y = make_result(out, (x, kernels), bw, "conv2d")
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def max_pool2d(x, size=2):
    """Non-overlapping max pooling on (..., H, W, C); trailing remainder is cropped."""
    *lead, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"max_pool2d: {h}x{w} smaller than pool {size}")
    xc = x.data[..., :ho * size, :wo * size, :]
    blocks = xc.reshape(*lead, ho, size, wo, size, c)
    out = blocks.max(axis=(-4, -2))
    winner = blocks == out[..., :, None, :, None, :]
    # split ties evenly so the gradient stays a valid subgradient
    winner = winner / winner.sum(axis=(-4, -2), keepdims=True)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gb = winner * g[..., :, None, :, None, :]
        full = np.zeros(shape, dtype=dtype)
        full[..., :ho * size, :wo * size, :] = gb.reshape(*lead, ho * size, wo * size, c)
        return (full,)
    return make_result(out.astype(dtype), (x,), bw, "max_pool2d")


def sinusoidal_positions(t, d, dtype=np.float64):
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    rates = np.exp(-math.log(10000.0) * (2 * (i // 2)) / d)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang)).astype(dtype)


def add_const(x, c):
    """Add a constant array of identical shape (no gradient to the constant)."""
    c = _const(c, x.data)
    if c.shape != x.shape:
        raise DimensionError(f"add_const: constant {c.shape} vs tensor {x.shape}")
    return make_result(x.data + c, (x,), lambda g: (g,), "add_const")


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    lp = log_softmax(logits)
    picked = pick(lp, targets)
    return scale(sum(picked), -1.0 / picked.size)
