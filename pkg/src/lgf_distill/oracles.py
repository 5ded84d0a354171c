"""Slow reference implementations used to check the vectorized code paths.

Everything here is written as explicit loops over output elements and is
deliberately independent of the production modules.
"""
from __future__ import annotations

import numpy as np


def lgf_bruteforce(features: np.ndarray, window: int, direction: str = "forward"):
    """Nested-loop Local Gram Flow; returns ``(values, valid)``.

    Dot products are summed sequentially in channel order.
    """
    T, H, W, C = features.shape
    r = window // 2
    K = window * window
    values = np.zeros((T - 1, H, W, K))
    valid = np.zeros((T - 1, H, W, K), dtype=bool)
    for t in range(T - 1):
        if direction == "forward":
            src, dst = t, t + 1
        else:
            src, dst = t + 1, t
        for i in range(H):
            for j in range(W):
                slot = 0
                for dh in range(-r, r + 1):
                    for dw in range(-r, r + 1):
                        ii, jj = i + dh, j + dw
                        if 0 <= ii < H and 0 <= jj < W:
                            s = 0.0
                            for c in range(C):
                                s += features[src, i, j, c] * features[dst, ii, jj, c]
                            values[t, i, j, slot] = s
                            valid[t, i, j, slot] = True
                        slot += 1
    return values, valid


def conv3d_bruteforce(x, kernel, bias=None):
    T, H, W, Cin = x.shape
    kt, kh, kw, _, Cout = kernel.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    y = np.zeros((T, H, W, Cout))
    for t in range(T):
        for i in range(H):
            for j in range(W):
                for o in range(Cout):
                    s = 0.0 if bias is None else bias[o]
                    for a in range(kt):
                        for b in range(kh):
                            for c in range(kw):
                                tt, ii, jj = t + a - pt, i + b - ph, j + c - pw
                                if 0 <= tt < T and 0 <= ii < H and 0 <= jj < W:
                                    for ci in range(Cin):
                                        s += x[tt, ii, jj, ci] * kernel[a, b, c, ci, o]
                    y[t, i, j, o] = s
    return y


def softmax_reference(logits, temperature):
    """Plain softmax over a 1-D list of valid logits."""
    z = [v / temperature for v in logits]
    m = max(z)
    e = [np.exp(v - m) for v in z]
    total = sum(e)
    return [v / total for v in e]
