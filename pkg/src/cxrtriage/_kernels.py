"""Compiled inner loops for the layers whose numpy form is memory-bound.

All loops are sequential, so results are bitwise reproducible.  Padding is
handled by bounds checks instead of materializing a padded copy.
"""

import numba
import numpy as np

jit = numba.njit(cache=True, nogil=True)


@jit
def depthwise_forward(x, w, stride, pad, out):
    n_batch, n_ch, h, wd = x.shape
    k = w.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ki in range(k):
                        y = i * stride + ki - pad
                        if y < 0 or y >= h:
                            continue
                        for kj in range(k):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= wd:
                                continue
                            acc += x[n, c, y, xx] * w[c, ki, kj]
                    out[n, c, i, j] = acc


@jit
def depthwise_backward(x, w, g, stride, pad, dx, dw, want_dw):
    n_batch, n_ch, h, wd = x.shape
    k = w.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    for c in range(n_ch):
        acc = np.zeros((k, k))
        for n in range(n_batch):
            for i in range(ho):
                for j in range(wo):
                    gv = g[n, c, i, j]
                    for ki in range(k):
                        y = i * stride + ki - pad
                        if y < 0 or y >= h:
                            continue
                        for kj in range(k):
                            xx = j * stride + kj - pad
                            if xx < 0 or xx >= wd:
                                continue
                            if want_dw:
                                acc[ki, kj] += gv * x[n, c, y, xx]
                            dx[n, c, y, xx] += gv * w[c, ki, kj]
        if want_dw:
            for ki in range(k):
                for kj in range(k):
                    dw[c, ki, kj] = acc[ki, kj]


@jit
def batchnorm_train_forward(x, gamma, beta, eps, xhat, out, mean, var):
    """x viewed as (N, C, S); batch statistics accumulated in float64."""
    n_batch, n_ch, s = x.shape
    m = n_batch * s
    for c in range(n_ch):
        acc = 0.0
        for n in range(n_batch):
            for p in range(s):
                acc += x[n, c, p]
        mu = acc / m
        acc = 0.0
        for n in range(n_batch):
            for p in range(s):
                d = x[n, c, p] - mu
                acc += d * d
        v = acc / m
        mean[c] = mu
        var[c] = v
        inv = 1.0 / np.sqrt(v + eps)
        ga = gamma[c]
        be = beta[c]
        for n in range(n_batch):
            for p in range(s):
                xh = (x[n, c, p] - mu) * inv
                xhat[n, c, p] = xh
                out[n, c, p] = xh * ga + be


@jit
def batchnorm_train_backward(g, xhat, gamma, inv_std, dx, dgamma, dbeta):
    n_batch, n_ch, s = g.shape
    m = n_batch * s
    for c in range(n_ch):
        sg = 0.0
        sgx = 0.0
        for n in range(n_batch):
            for p in range(s):
                gv = g[n, c, p]
                sg += gv
                sgx += gv * xhat[n, c, p]
        dgamma[c] = sgx
        dbeta[c] = sg
        ga = gamma[c]
        scale = ga * inv_std[c] / m
        for n in range(n_batch):
            for p in range(s):
                dx[n, c, p] = scale * (m * g[n, c, p] - sg - xhat[n, c, p] * sgx)
