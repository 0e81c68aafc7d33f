from __future__ import annotations

import numpy as np
import pytest


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Seven nested loops, no vectorization."""
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo), dtype=np.float64)
    for i in range(n):
        for o in range(c_out):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[i, c, y * stride + p, z * stride + q] * w[o, c, p, q]
                    out[i, o, y, z] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_avgpool(x, k=2):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // k, w // k))
    for i in range(n):
        for j in range(c):
            for y in range(h // k):
                for z in range(w // k):
                    out[i, j, y, z] = np.mean(x[i, j, y * k:(y + 1) * k, z * k:(z + 1) * k])
    return out


def naive_matmul(a, w, b):
    n, k = a.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * w[t, j]
            out[i, j] = s + b[j]
    return out


def central_diff(f, x, eps=1e-6):
    """Finite-difference gradient of scalar ``f`` at every element of ``x``."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
