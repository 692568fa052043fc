"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, direct sums) and
shares no code with the library's kernels.
"""

import numpy as np


def conv2d_naive(x, w, b, pad):
    """Direct 6-loop cross-correlation. x: NCHW, w: (k, k, ci, co)."""
    n, ci, h, wd = x.shape
    k = w.shape[0]
    co = w.shape[3]
    ho = h + 2 * pad - k + 1
    wo = wd + 2 * pad - k + 1
    xp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    y = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for im in range(n):
        for o in range(co):
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[im, c, yy + i, xx + j] * w[i, j, c, o]
                    y[im, o, yy, xx] = acc + b[o]
    return y


def maxpool2_naive(x):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    for yy in range(h // 2):
        for xx in range(w // 2):
            y[:, :, yy, xx] = x[:, :, 2 * yy : 2 * yy + 2, 2 * xx : 2 * xx + 2].max(axis=(2, 3))
    return y


def avgpool_global_naive(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, 1, 1), dtype=x.dtype)
    for im in range(n):
        for ch in range(c):
            s = 0.0
            for yy in range(h):
                for xx in range(w):
                    s += x[im, ch, yy, xx]
            y[im, ch, 0, 0] = s / (h * w)
    return y


def linear_naive(x, w, b):
    """x: (N, ci, 1, 1); w: (1, 1, ci, co)."""
    n, ci = x.shape[0], x.shape[1]
    co = w.shape[3]
    y = np.zeros((n, co, 1, 1), dtype=x.dtype)
    for im in range(n):
        for o in range(co):
            y[im, o, 0, 0] = (x[im, :, 0, 0] * w[0, 0, :, o]).sum() + b[o]
    return y


def numeric_grad(f, arr, h=1e-5, coords=None):
    """Central-difference gradient of scalar f() with respect to arr.

    Perturbs arr in place and restores it. With `coords` (a list of flat
    indices) only those coordinates are probed and a dict index->slope is
    returned; otherwise the full gradient array comes back.
    """
    flat = arr.reshape(-1)
    idxs = list(range(flat.size)) if coords is None else list(coords)
    out = {}
    for i in idxs:
        old = flat[i]
        flat[i] = old + h
        f1 = f()
        flat[i] = old - h
        f0 = f()
        flat[i] = old
        out[i] = (f1 - f0) / (2 * h)
    if coords is None:
        return np.array([out[i] for i in range(flat.size)]).reshape(arr.shape)
    return out


def max_rel_err(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
