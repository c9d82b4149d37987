"""Differentiable operations over :class:`Tensor`.

Image tensors are NHWC. Convolution kernels are ``(kh, kw, c_in, c_out)``;
depthwise kernels are ``(kh, kw, c)``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from flowpix.nn.tensor import Tensor, as_tensor, make_result

LOG_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _lift(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)

    def back(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(a.data * b.data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return make_result(x.data * mask, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def back(g):
        x._accumulate(g * out * (1.0 - out))

    return make_result(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        x._accumulate(g * (1.0 - out * out))

    return make_result(out, (x,), back)


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def back(g):
        x._accumulate(g.reshape(old))

    return make_result(x.data.reshape(shape), (x,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(xs, np.split(g, bounds, axis=ax)):
            if t.requires_grad:
                t._accumulate(piece)

    return make_result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), back)


def take(x: Tensor, index) -> Tensor:
    """Gather rows of ``x`` along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.intp)

    def back(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accumulate(dx)

    return make_result(x.data[idx], (x,), back)


# -- reductions -------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    def back(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return make_result(np.asarray(x.data.sum()), (x,), back)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return make_result(np.asarray(x.data.mean()), (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    n, h, w, c = x.shape

    def back(g):
        x._accumulate(np.broadcast_to(g[:, None, None, :] / (h * w), x.shape))

    return make_result(x.data.mean(axis=(1, 2)), (x,), back)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_result(a.data @ b.data, (a, b), back)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -- convolution ------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """Return (output size, pad before, pad after) along one axis."""
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input extent {size} smaller than kernel {k} with valid padding")
        return (size - k) // stride + 1, 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")


def _pad_geometry(shape, kh, kw, stride, padding):
    _, h, w, _ = shape
    ho, pt, pb = conv_output_size(h, kh, stride, padding)
    wo, pl, pr = conv_output_size(w, kw, stride, padding)
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _window(xp, u, v, ho, wo, stride):
    return xp[:, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride, :]


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    """(N, Hp, Wp, C) -> contiguous (N*ho*wo, kh*kw*C) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * xp.shape[3])


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of an NHWC batch with a ``(kh, kw, c_in, c_out)`` kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    kh, kw, cin, cout = kernel.shape
    ho, wo, pads = _pad_geometry(x.shape, kh, kw, stride, padding)
    xp = np.pad(x.data, pads) if padding == "same" else x.data
    n = x.shape[0]
    if kh == kw == 1 and stride == 1:
        cols = xp.reshape(-1, cin)
    else:
        cols = _im2col(xp, kh, kw, ho, wo, stride)
    k2 = kernel.data.reshape(-1, cout)
    out = (cols @ k2).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        if kernel.requires_grad:
            kernel._accumulate((cols.T @ g2).reshape(kernel.shape))
        if x.requires_grad:
            if kh == kw == 1 and stride == 1:
                x._accumulate((g2 @ k2.T).reshape(x.shape))
                return
            k4 = kernel.data
            gxp = _scatter_windows(xp.shape, xp.dtype, kh, kw, ho, wo, stride,
                                   lambda u, v: (g2 @ k4[u, v].T).reshape(n, ho, wo, cin))
            x._accumulate(_crop(gxp, pads))

    return make_result(out, (x, kernel), back)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel spatial convolution with a ``(kh, kw, c)`` kernel."""
    if x.ndim != 4 or kernel.ndim != 3 or x.shape[3] != kernel.shape[2]:
        raise ShapeError(f"depthwise conv shape mismatch: input {x.shape}, kernel {kernel.shape}")
    kh, kw, c = kernel.shape
    ho, wo, pads = _pad_geometry(x.shape, kh, kw, stride, padding)
    xp = np.pad(x.data, pads) if padding == "same" else x.data
    k = kernel.data
    out = np.zeros((x.shape[0], ho, wo, c), dtype=np.result_type(x.data, k))
    for u in range(kh):
        for v in range(kw):
            out += _window(xp, u, v, ho, wo, stride) * k[u, v]

    def back(g):
        if kernel.requires_grad:
            gk = np.empty_like(k)
            for u in range(kh):
                for v in range(kw):
                    gk[u, v] = np.einsum("nhwc,nhwc->c", _window(xp, u, v, ho, wo, stride), g)
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = _scatter_windows(xp.shape, xp.dtype, kh, kw, ho, wo, stride, lambda u, v: g * k[u, v])
            x._accumulate(_crop(gxp, pads))

    return make_result(out, (x, kernel), back)


def _scatter_windows(shape, dtype, kh, kw, ho, wo, stride, piece) -> np.ndarray:
    """Sum ``piece(u, v)`` (N, ho, wo, C) into the window each kernel tap read from.

    Work happens on one dense array per stride phase so every add touches
    contiguous rows; the phases are interleaved once at the end.
    """
    n, hp, wp, c = shape
    s = stride
    phases = {(p, q): np.zeros((n, -(-(hp - p) // s), -(-(wp - q) // s), c), dtype=dtype)
              for p in range(min(s, kh)) for q in range(min(s, kw))}
    for u in range(kh):
        for v in range(kw):
            phases[u % s, v % s][:, u // s:u // s + ho, v // s:v // s + wo, :] += piece(u, v)
    if s == 1:
        return phases[0, 0]
    out = np.zeros(shape, dtype=dtype)
    for (p, q), a in phases.items():
        out[:, p::s, q::s, :] = a
    return out


def _crop(a: np.ndarray, pads) -> np.ndarray:
    (_, _), (pt, pb), (pl, pr), (_, _) = pads
    return a[:, pt:a.shape[1] - pb, pl:a.shape[2] - pr, :]


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor,
                     stride: int = 1, padding: str = "same") -> Tensor:
    """Depthwise spatial filter followed by a 1x1 channel-mixing convolution."""
    return conv2d(depthwise_conv2d(x, depthwise, stride, padding), pointwise, 1, "valid")


# -- normalization ----------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
               running_var: Tensor, training: bool, eps: float = BN_EPS,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Normalize over every axis but the last (channels).

    In training mode the batch statistics are used (biased variance) and the
    running buffers are updated in place as ``m * running + (1 - m) * batch``.
    """
    if x.data.size == 0 or x.shape[0] == 0:
        raise ShapeError("batch_norm needs a non-empty batch")
    axes = tuple(range(x.ndim - 1))
    d = x.data
    if training:
        m = d.size // d.shape[-1]
        mu = d.mean(axis=axes)
        centered = d - mu
        flat = centered.reshape(-1, d.shape[-1])
        var = np.einsum("ic,ic->c", flat, flat) / m
        running_mean.data *= momentum
        running_mean.data += (1.0 - momentum) * mu
        running_var.data *= momentum
        running_var.data += (1.0 - momentum) * var
    else:
        mu = running_mean.data
        var = running_var.data
        centered = d - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data
            if training:
                gx = (inv / m) * (m * gx - gx.sum(axis=axes) - xhat * (gx * xhat).sum(axis=axes))
            else:
                gx = gx * inv
            x._accumulate(gx)

    return make_result(out, (x, gamma, beta), back)


# -- classification head ----------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        logits._accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return make_result(p, (logits,), back)


def weighted_cross_entropy(probs: Tensor, one_hot, weights) -> Tensor:
    """Mean over the batch of ``-w_i * sum_k y_ik * log p_ik``.

    ``weights`` is the per-sample class weight (the weight of the sample's
    true class). Probabilities below ``LOG_FLOOR`` are clamped; the clamp
    blocks gradient.
    """
    y = np.asarray(one_hot, dtype=probs.dtype)
    w = np.asarray(weights, dtype=probs.dtype).reshape(-1)
    if y.shape != probs.shape:
        raise ShapeError(f"label shape {y.shape} does not match probabilities {probs.shape}")
    if np.any(w <= 0):
        raise ValueError("class weights must be positive")
    b = probs.shape[0]
    clamped = np.maximum(probs.data, LOG_FLOOR)
    loss = -(w[:, None] * y * np.log(clamped)).sum() / b

    def back(g):
        live = probs.data > LOG_FLOOR
        probs._accumulate(g * (-(w[:, None] * y) / (clamped * b)) * live)

    return make_result(np.asarray(loss, dtype=probs.dtype), (probs,), back)


def parameter_count(shape: Sequence[int]) -> int:
    return math.prod(shape)
