"""Compiled loops behind the fused tensor ops."""

import numpy as np
from numba import njit


@njit(cache=True)
def edge_logits(a, b, dst, src):
    """Negated gate pre-activations ``-(a[dst] + b[src])`` per edge."""
    d = a.shape[1]
    out = np.empty((dst.shape[0], d))
    for e in range(dst.shape[0]):
        i = dst[e]
        j = src[e]
        for t in range(d):
            out[e, t] = -(a[i, t] + b[j, t])
    return out


@njit(cache=True)
def gated_scatter(gates, c, dst, src):
    out = np.zeros(c.shape)
    d = c.shape[1]
    for e in range(dst.shape[0]):
        i = dst[e]
        j = src[e]
        for t in range(d):
            out[i, t] += gates[e, t] * c[j, t]
    return out


@njit(cache=True)
def gated_backward(gates, c, dst, src, g):
    ga = np.zeros(c.shape)
    gb = np.zeros(c.shape)
    gc = np.zeros(c.shape)
    d = c.shape[1]
    for e in range(dst.shape[0]):
        i = dst[e]
        j = src[e]
        for t in range(d):
            gate = gates[e, t]
            gi = g[i, t]
            gc[j, t] += gi * gate
            pre = gi * c[j, t] * gate * (1.0 - gate)
            ga[i, t] += pre
            gb[j, t] += pre
    return ga, gb, gc


@njit(cache=True)
def layer_norm_forward(x, gain, bias, eps):
    """Rows of 2D ``x`` normalised; returns (y, xhat, inverse std)."""
    rows, d = x.shape
    y = np.empty(x.shape)
    xhat = np.empty(x.shape)
    inv = np.empty(rows)
    for r in range(rows):
        mu = 0.0
        for t in range(d):
            mu += x[r, t]
        mu /= d
        var = 0.0
        for t in range(d):
            dv = x[r, t] - mu
            var += dv * dv
        s = 1.0 / np.sqrt(var / d + eps)
        inv[r] = s
        for t in range(d):
            h = (x[r, t] - mu) * s
            xhat[r, t] = h
            y[r, t] = h * gain[t] + bias[t]
    return y, xhat, inv


@njit(cache=True)
def layer_norm_backward(g, xhat, inv, gain):
    rows, d = g.shape
    gx = np.empty(g.shape)
    gg = np.zeros(d)
    gb = np.zeros(d)
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for t in range(d):
            gh = g[r, t] * gain[t]
            m1 += gh
            m2 += gh * xhat[r, t]
            gg[t] += g[r, t] * xhat[r, t]
            gb[t] += g[r, t]
        m1 /= d
        m2 /= d
        for t in range(d):
            gx[r, t] = inv[r] * (g[r, t] * gain[t] - m1 - xhat[r, t] * m2)
    return gx, gg, gb
