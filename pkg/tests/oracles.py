"""Slow, loop-based reference implementations used as test oracles."""

import math

import numpy as np


def naive_attention(x, attn):
    """O(N^2) multi-head attention with explicit loops, reading weights from an r=1 module."""
    x = np.asarray(x, dtype=np.float64)
    B, N, d = x.shape
    h = attn.heads
    dh = d // h
    wq, bq = attn.query.weight.data.astype(np.float64), attn.query.bias.data.astype(np.float64)
    wk = attn.key.weight.data.astype(np.float64)
    wv, bv = attn.value.weight.data.astype(np.float64), attn.value.bias.data.astype(np.float64)
    wo, bo = attn.proj.weight.data.astype(np.float64), attn.proj.bias.data.astype(np.float64)
    out = np.zeros((B, N, d))
    for b in range(B):
        q, k, v = x[b] @ wq + bq, x[b] @ wk, x[b] @ wv + bv
        heads = np.zeros((N, d))
        for hi in range(h):
            sl = slice(hi * dh, (hi + 1) * dh)
            for i in range(N):
                scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(N)])
                p = np.exp(scores - scores.max())
                p /= p.sum()
                heads[i, sl] = sum(p[j] * v[j, sl] for j in range(N))
        out[b] = heads @ wo + bo
    return out


def combine_loop(experts, weights):
    """O[b, c, y, x] = sum_i W_i[b, 0, y, x] * F_i[b, c, y, x], one scalar at a time."""
    B, C, H, W = experts[0].shape
    out = np.zeros((B, C, H, W))
    for b in range(B):
        for c in range(C):
            for y in range(H):
                for x in range(W):
                    out[b, c, y, x] = sum(float(w[b, 0, y, x]) * float(f[b, c, y, x])
                                          for f, w in zip(experts, weights))
    return out


def raster_ellipse(h, w, cy, cx, ry, rx, theta):
    """Pixel-by-pixel inside test at pixel centres."""
    out = np.zeros((h, w), np.uint8)
    c, s = math.cos(theta), math.sin(theta)
    for y in range(h):
        for x in range(w):
            dy, dx = y + 0.5 - cy, x + 0.5 - cx
            u = dx * c + dy * s
            v = -dx * s + dy * c
            if (u / rx) ** 2 + (v / ry) ** 2 <= 1.0:
                out[y, x] = 1
    return out
