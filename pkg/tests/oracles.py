"""Slow, loop-based reference implementations written straight from the formulas.

Nothing here shares code with the package; the tests compare the two.
"""
import math

import numpy as np


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def factor_attn(x, wq, wk, wv, heads):
    """Per head: (Q/√d) · (softmax over tokens of K)ᵀ · V, evaluated left to right."""
    L, C = x.shape
    d = C // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((L, C))
    for j in range(heads):
        sl = slice(j * d, (j + 1) * d)
        ks = np.zeros((L, d))
        for ch in range(d):
            col = k[:, sl][:, ch]
            e = np.exp(col - col.max())
            ks[:, ch] = e / e.sum()
        scores = (q[:, sl] / math.sqrt(d)) @ ks.T  # L×L, formed on purpose
        out[:, sl] = scores @ v[:, sl]
    return out


def depthwise(v_map, kernel):
    c, h, w = v_map.shape
    r = kernel.shape[-1] // 2
    out = np.zeros_like(v_map)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for dy in range(-r, r + 1):
                    for dx in range(-r, r + 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            acc += kernel[ch, dy + r, dx + r] * v_map[ch, yy, xx]
                out[ch, y, x] = acc
    return out


def conv_attn(x, wq, wk, wv, pos, heads, hw, has_cls):
    h, w = hw
    q, v = x @ wq, x @ wv
    start = 1 if has_cls else 0
    v_map = v[start:].T.reshape(-1, h, w)
    conv = depthwise(v_map, pos).reshape(v.shape[1], -1).T
    alpha = np.zeros_like(q)
    alpha[start:] = q[start:] * conv
    return factor_attn(x, wq, wk, wv, heads) + alpha, alpha


def cross_attn(h_goal, h_cur, wq, wk, wv, heads):
    """Returns (C×H×W output, per-head L×L attention rows)."""
    c, h, w = h_goal.shape
    xa = h_goal.reshape(c, -1).T
    xb = h_cur.reshape(c, -1).T
    d = c // heads
    q, k, v = xa @ wq, xb @ wk, xb @ wv
    out = np.zeros_like(q)
    rows = []
    for j in range(heads):
        sl = slice(j * d, (j + 1) * d)
        a = softmax_rows(q[:, sl] @ k[:, sl].T / math.sqrt(d))
        rows.append(a)
        out[:, sl] = a @ v[:, sl]
    return out.T.reshape(c, h, w), rows


def correlate(z, dmax):
    c2, h, w = z.shape
    c = c2 // 2
    a, b = z[:c], z[c:]
    span = 2 * dmax + 1
    out = np.zeros((span * span, h, w), dtype=z.dtype)
    for iy, dy in enumerate(range(-dmax, dmax + 1)):
        for ix, dx in enumerate(range(-dmax, dmax + 1)):
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        acc = 0
                        for ch in range(c):
                            acc += a[ch, y, x] * b[ch, yy, xx]
                        out[iy * span + ix, y, x] = acc / c
    return out


def counts(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(np.ravel(pred), np.ravel(truth)):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def soft_dice(p, y, eps=1e-7):
    k = p.shape[0]
    total = 0.0
    for c in range(k):
        inter = float((p[c] * y[c]).sum())
        total += 2 * inter / (float(y[c].sum()) + float(p[c].sum()) + eps)
    return 1.0 - total / k


def cross_entropy(logits, y):
    k, h, w = logits.shape
    acc = 0.0
    for i in range(h):
        for j in range(w):
            col = logits[:, i, j]
            m = col.max()
            lse = m + math.log(sum(math.exp(v - m) for v in col))
            acc += lse - col[y[i, j]]
    return acc / (h * w)
