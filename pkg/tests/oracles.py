"""Slow, obviously-correct reference implementations used only by tests."""
from __future__ import annotations

import math

import numpy as np


def same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2


def naive_conv2d(x, k, stride=1, padding="valid"):
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    if padding == "valid":
        ho, wo, pt, pl = (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0
    else:
        ho, pt = same_pads(h, kh, stride)
        wo, pl = same_pads(w, kw, stride)
    out = np.zeros((n, ho, wo, cout))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            r, c = i * stride + u - pt, j * stride + v - pl
                            if 0 <= r < h and 0 <= c < w:
                                for ci in range(cin):
                                    acc += x[b, r, c, ci] * k[u, v, ci, o]
                    out[b, i, j, o] = acc
    return out


def naive_depthwise(x, k, stride=1, padding="same"):
    n, h, w, c = x.shape
    kh, kw, _ = k.shape
    out = []
    for ch in range(c):
        kk = np.zeros((kh, kw, 1, 1))
        kk[:, :, 0, 0] = k[:, :, ch]
        out.append(naive_conv2d(x[..., ch:ch + 1], kk, stride, padding))
    return np.concatenate(out, axis=-1)


def naive_batch_norm_train(x, gamma, beta, eps=1e-5):
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    m = flat.shape[0]
    mean = [sum(flat[:, j]) / m for j in range(c)]
    var = [sum((flat[i, j] - mean[j]) ** 2 for i in range(m)) / m for j in range(c)]
    out = np.empty_like(flat)
    for i in range(m):
        for j in range(c):
            out[i, j] = gamma[j] * (flat[i, j] - mean[j]) / math.sqrt(var[j] + eps) + beta[j]
    return out.reshape(x.shape), np.array(mean), np.array(var)


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_lstm_step(x, h, c, wx, wh, b):
    """Gate formulas written out element by element (gate order i, f, g, o)."""
    units = h.shape[-1]
    h_new = np.empty(units)
    c_new = np.empty(units)
    for u in range(units):
        def pre(gate):
            col = gate * units + u
            return sum(x[i] * wx[i, col] for i in range(len(x))) + sum(h[k] * wh[k, col] for k in range(units)) + b[col]
        i_g, f_g, g_g, o_g = _sig(pre(0)), _sig(pre(1)), math.tanh(pre(2)), _sig(pre(3))
        c_new[u] = f_g * c[u] + i_g * g_g
        h_new[u] = o_g * math.tanh(c_new[u])
    return h_new, c_new


def naive_bilinear(img, target):
    """Per-output-pixel half-pixel-centre bilinear interpolation, plain Python floats."""
    h, w, ch = img.shape
    out = np.empty((target, target, ch))

    def coord(i, n_in):
        s = (i + 0.5) * (n_in / target) - 0.5
        if s < 0.0:
            s = 0.0
        lo = min(int(math.floor(s)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    for i in range(target):
        y0, y1, wy = coord(i, h)
        for j in range(target):
            x0, x1, wx = coord(j, w)
            for c in range(ch):
                p00, p01 = float(img[y0, x0, c]), float(img[y0, x1, c])
                p10, p11 = float(img[y1, x0, c]), float(img[y1, x1, c])
                top = p00 + wx * (p01 - p00)
                bottom = p10 + wx * (p11 - p10)
                out[i, j, c] = (top + wy * (bottom - top)) / 255.0
    return out


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
