"""Dense array primitives with hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects laid out channels-last
(``[T, H, W, C]`` for video feature grids).  Every differentiable op comes
as a ``<op>`` / ``<op>_backward`` pair; the backward takes the upstream
gradient plus whatever the forward needs and returns gradients shaped like
the primals.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import gcd

import numpy as np
from scipy.special import expit

DEFAULT_GROUPS = 32
DEFAULT_GN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0 or min(arr.shape) < 1:
        raise ShapeError(f"tensor extents must be non-empty and >= 1, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Random stream
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Counter-based random stream.

    Draw number ``counter`` under key ``seed`` always comes from the same
    Philox block, so ``(seed, counter)`` fully determines the next draw
    regardless of what ran before or on which machine.
    """

    seed: int
    counter: int = 0

    def _next_generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(key=self.seed & (2**64 - 1), counter=[0, 0, 0, self.counter])
        self.counter += 1
        return np.random.Generator(bitgen)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._next_generator().standard_normal(shape) * scale

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._next_generator().uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._next_generator().integers(low, high, shape)

    def split(self, tag: int) -> "RngStream":
        """Independent child stream; does not advance the parent."""
        child = np.random.SeedSequence([self.seed & (2**64 - 1), int(tag)]).generate_state(1, np.uint64)[0]
        return RngStream(int(child))


# ---------------------------------------------------------------------------
# Linear map over the channel axis
# ---------------------------------------------------------------------------


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``y[..., o] = sum_i weight[o, i] * x[..., i] + bias[o]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[-1]} channels, weight expects {weight.shape[1]}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns ``(dx, dweight, dbias)``."""
    cin = x.shape[-1]
    cout = dy.shape[-1]
    dx = dy @ weight
    dweight = dy.reshape(-1, cout).T @ x.reshape(-1, cin)
    dbias = dy.reshape(-1, cout).sum(axis=0)
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# SiLU
# ---------------------------------------------------------------------------


def silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def silu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return dy * s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# 3-D convolution, zero same-padding
# ---------------------------------------------------------------------------


def _conv_check(x: np.ndarray, kernel: np.ndarray):
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects input [T,H,W,Cin] and kernel [kt,kh,kw,Cin,Cout], got {x.shape}, {kernel.shape}")
    if x.shape[3] != kernel.shape[3]:
        raise ShapeError(f"conv3d: input has {x.shape[3]} channels, kernel expects {kernel.shape[3]}")
    for ext, kext in zip(x.shape[:3], kernel.shape[:3]):
        if kext % 2 == 0:
            raise ShapeError(f"conv3d kernel extents must be odd, got {kernel.shape[:3]}")
        if kext > ext + 2 * (kext // 2):
            raise ShapeError("conv3d kernel extent exceeds padded input")
    return tuple(k // 2 for k in kernel.shape[:3])


def conv3d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    pads = _conv_check(x, kernel)
    T, H, W, _ = x.shape
    kt, kh, kw, _, cout = kernel.shape
    xp = np.pad(x, [(p, p) for p in pads] + [(0, 0)])
    y = np.zeros((T, H, W, cout), dtype=np.result_type(x, kernel))
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                y += xp[a:a + T, b:b + H, c:c + W, :] @ kernel[a, b, c]
    if bias is not None:
        y += bias
    return y


def conv3d_backward(dy: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    """Returns ``(dx, dkernel, dbias)``."""
    pads = _conv_check(x, kernel)
    T, H, W, _ = x.shape
    kt, kh, kw, _, _ = kernel.shape
    xp = np.pad(x, [(p, p) for p in pads] + [(0, 0)])
    dxp = np.zeros_like(xp, dtype=dy.dtype)
    dkernel = np.zeros_like(kernel, dtype=dy.dtype)
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                window = xp[a:a + T, b:b + H, c:c + W, :]
                dkernel[a, b, c] = np.tensordot(window, dy, axes=([0, 1, 2], [0, 1, 2]))
                dxp[a:a + T, b:b + H, c:c + W, :] += dy @ kernel[a, b, c].T
    pt, ph, pw = pads
    dx = dxp[pt:pt + T, ph:ph + H, pw:pw + W, :]
    dbias = dy.sum(axis=(0, 1, 2))
    return dx, dkernel, dbias


# ---------------------------------------------------------------------------
# Group normalization
# ---------------------------------------------------------------------------


def default_groups(channels: int, preferred: int = DEFAULT_GROUPS) -> int:
    """Largest group count dividing both ``channels`` and ``preferred``."""
    return gcd(channels, preferred)


def _group_view(x: np.ndarray, groups: int) -> np.ndarray:
    C = x.shape[-1]
    if groups < 1 or C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {groups} groups")
    return x.reshape(-1, groups, C // groups)


def group_norm(x, groups, gamma, beta, eps=DEFAULT_GN_EPS, return_cache=False):
    """GroupNorm over a channels-last sample.

    The whole array is one sample: statistics for a group are taken over
    every leading position and the group's channels.
    """
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = _group_view(x, groups)
    mu = xg.mean(axis=(0, 2), keepdims=True)
    var = xg.var(axis=(0, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    y = xhat * gamma + beta
    if return_cache:
        return y, (xhat, inv_std)
    return y


def group_norm_backward(dy, groups, gamma, cache):
    """Returns ``(dx, dgamma, dbeta)`` given the forward cache."""
    xhat, inv_std = cache
    C = dy.shape[-1]
    dgamma = (dy * xhat).reshape(-1, C).sum(axis=0)
    dbeta = dy.reshape(-1, C).sum(axis=0)
    dxhat = _group_view(dy * gamma, groups)
    xh = _group_view(xhat, groups)
    n = xh.shape[0] * xh.shape[2]
    sum_d = dxhat.sum(axis=(0, 2), keepdims=True)
    sum_dx = (dxhat * xh).sum(axis=(0, 2), keepdims=True)
    dx = inv_std * (dxhat - sum_d / n - xh * sum_dx / n)
    return dx.reshape(dy.shape), dgamma, dbeta


# ---------------------------------------------------------------------------
# Resampling (both linear in the input, so backward is the transpose)
# ---------------------------------------------------------------------------


def _temporal_taps(T: int, factor: int):
    if factor < 1:
        raise ValueError("interp_temporal: factor must be >= 1")
    if T < 2 and factor > 1:
        raise ShapeError("interp_temporal needs at least 2 frames when factor > 1")
    n_out = factor * T - (factor - 1)
    pos = np.arange(n_out)
    lo = pos // factor
    frac = (pos % factor) / factor
    hi = np.minimum(lo + 1, T - 1)
    return lo, hi, 1.0 - frac, frac


def interp_temporal(x: np.ndarray, factor: int) -> np.ndarray:
    """Endpoint-preserving linear upsampling along axis 0 to ``factor*T - (factor-1)`` frames."""
    lo, hi, w_lo, w_hi = _temporal_taps(x.shape[0], factor)
    bshape = (-1,) + (1,) * (x.ndim - 1)
    return w_lo.reshape(bshape) * x[lo] + w_hi.reshape(bshape) * x[hi]


def interp_temporal_backward(dy: np.ndarray, T: int, factor: int) -> np.ndarray:
    lo, hi, w_lo, w_hi = _temporal_taps(T, factor)
    bshape = (-1,) + (1,) * (dy.ndim - 1)
    dx = np.zeros((T,) + dy.shape[1:], dtype=dy.dtype)
    np.add.at(dx, lo, w_lo.reshape(bshape) * dy)
    np.add.at(dx, hi, w_hi.reshape(bshape) * dy)
    return dx


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation weights, shape ``[n_out, n_in]``."""
    if n_in < 1 or n_out < 1:
        raise ShapeError("resample extents must be >= 1")
    M = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        M[:, 0] = 1.0
        return M
    for o in range(n_out):
        src = o * (n_in - 1) / (n_out - 1)
        lo = min(int(np.floor(src)), n_in - 2)
        frac = src - lo
        M[o, lo] += 1.0 - frac
        M[o, lo + 1] += frac
    return M


def resample_spatial(x: np.ndarray, H2: int, W2: int) -> np.ndarray:
    _, H, W, _ = x.shape
    Mh = bilinear_matrix(H, H2)
    Mw = bilinear_matrix(W, W2)
    y = np.einsum("ah,thwc->tawc", Mh, x)
    return np.einsum("bw,tawc->tabc", Mw, y)


def resample_spatial_backward(dy: np.ndarray, H: int, W: int) -> np.ndarray:
    _, H2, W2, _ = dy.shape
    Mh = bilinear_matrix(H, H2)
    Mw = bilinear_matrix(W, W2)
    d = np.einsum("bw,tabc->tawc", Mw, dy)
    return np.einsum("ah,tawc->thwc", Mh, d)
