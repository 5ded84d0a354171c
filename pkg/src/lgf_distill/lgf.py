"""Local Gram Flow similarities, temperature softmax and the KL alignment loss.

A Local Gram Flow (LGF) field stores, for each token of frame ``t``, its dot
products with the ``w x w`` spatial neighbourhood of the paired frame
(``t + 1`` in the default forward direction).  Neighbours that fall outside
the grid are flagged invalid and take no part in normalization or the loss.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lgft

FORWARD = "forward"
BACKWARD_PAIR = "backward-pair"
DIRECTIONS = (FORWARD, BACKWARD_PAIR)


@dataclass
class SimilarityField:
    values: np.ndarray  # [T-1, H, W, K]
    valid: np.ndarray  # bool, same shape
    window: int
    direction: str = FORWARD

    @property
    def num_tokens(self) -> int:
        return int(np.prod(self.values.shape[:3]))

    def check_compatible(self, other: "SimilarityField") -> None:
        if self.values.shape != other.values.shape:
            raise ValueError(f"field shapes differ: {self.values.shape} vs {other.values.shape}")
        if self.window != other.window:
            raise ValueError(f"field windows differ: {self.window} vs {other.window}")
        if not np.array_equal(self.valid, other.valid):
            raise ValueError("field validity masks differ")


@dataclass
class ProbField:
    probs: np.ndarray
    valid: np.ndarray
    temperature: float
    window: int = 7


def window_offsets(window: int) -> list[tuple[int, int]]:
    """Neighbour offsets in slot order (row-major over ``(dh, dw)``)."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    r = window // 2
    return [(dh, dw) for dh in range(-r, r + 1) for dw in range(-r, r + 1)]


def _frame_pair(features: np.ndarray, direction: str):
    if direction == FORWARD:
        return features[:-1], features[1:]
    if direction == BACKWARD_PAIR:
        return features[1:], features[:-1]
    raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")


def _span(n: int, d: int) -> tuple[int, int]:
    """Index range ``[lo, hi)`` of positions ``i`` with ``0 <= i + d < n``."""
    return max(0, -d), min(n, n - d)


def local_gram_flow(features: np.ndarray, window: int = 7, direction: str = FORWARD) -> SimilarityField:
    """Local Gram Flow of a ``[T, H, W, C]`` feature map.

    Channel products are accumulated in channel order, so results are
    bit-identical to a sequential per-token dot product.
    """
    features = np.asarray(features)
    if features.ndim != 4:
        raise ValueError(f"features must be [T,H,W,C], got shape {features.shape}")
    T, H, W, C = features.shape
    if T < 2:
        raise ValueError("local_gram_flow needs at least 2 frames")
    offsets = window_offsets(window)
    cur, nxt = _frame_pair(features, direction)
    values = np.zeros((T - 1, H, W, len(offsets)), dtype=features.dtype)
    valid = np.zeros((H, W, len(offsets)), dtype=bool)
    for slot, (dh, dw) in enumerate(offsets):
        i0, i1 = _span(H, dh)
        j0, j1 = _span(W, dw)
        if i0 >= i1 or j0 >= j1:
            continue
        a = cur[:, i0:i1, j0:j1, :]
        b = nxt[:, i0 + dh:i1 + dh, j0 + dw:j1 + dw, :]
        acc = np.zeros(a.shape[:3], dtype=features.dtype)
        for c in range(C):
            acc += a[..., c] * b[..., c]
        values[:, i0:i1, j0:j1, slot] = acc
        valid[i0:i1, j0:j1, slot] = True
    valid = np.broadcast_to(valid, values.shape).copy()
    return SimilarityField(values, valid, window, direction)


def local_gram_flow_backward(dvalues: np.ndarray, features: np.ndarray, window: int = 7,
                             direction: str = FORWARD) -> np.ndarray:
    """Gradient of ``sum(dvalues * LGF(features))`` with respect to ``features``."""
    T, H, W, _ = features.shape
    cur, nxt = _frame_pair(features, direction)
    dcur = np.zeros_like(cur)
    dnxt = np.zeros_like(nxt)
    for slot, (dh, dw) in enumerate(window_offsets(window)):
        i0, i1 = _span(H, dh)
        j0, j1 = _span(W, dw)
        if i0 >= i1 or j0 >= j1:
            continue
        g = dvalues[:, i0:i1, j0:j1, slot, None]
        dcur[:, i0:i1, j0:j1, :] += g * nxt[:, i0 + dh:i1 + dh, j0 + dw:j1 + dw, :]
        dnxt[:, i0 + dh:i1 + dh, j0 + dw:j1 + dw, :] += g * cur[:, i0:i1, j0:j1, :]
    dfeat = np.zeros_like(features)
    if direction == FORWARD:
        dfeat[:-1] += dcur
        dfeat[1:] += dnxt
    else:
        dfeat[1:] += dcur
        dfeat[:-1] += dnxt
    return dfeat


# ---------------------------------------------------------------------------
# Softmax / KL
# ---------------------------------------------------------------------------


def _log_softmax(values: np.ndarray, valid: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not valid.any(axis=-1).all():
        raise ValueError("every token needs at least one valid neighbour slot")
    z = np.where(valid, values / temperature, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        logZ = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - logZ  # -inf at invalid slots


def temp_softmax(sims: SimilarityField, temperature: float = 0.1) -> ProbField:
    logp = _log_softmax(sims.values, sims.valid, temperature)
    probs = np.where(sims.valid, np.exp(logp), 0.0)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    return ProbField(probs, sims.valid.copy(), temperature, sims.window)


def entropy(pf: ProbField) -> np.ndarray:
    """Per-token Shannon entropy (nats)."""
    p = pf.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def kl_feat_loss(P: ProbField, Q_logits: SimilarityField, temperature: float = 0.1):
    """Token-averaged ``KL(P || softmax(Q_logits / T))``.

    Returns ``(loss, grad)`` where ``grad`` is with respect to the student
    similarity values; the teacher distribution is treated as constant.
    """
    if P.probs.shape != Q_logits.values.shape:
        raise ValueError(f"teacher/student shapes differ: {P.probs.shape} vs {Q_logits.values.shape}")
    if P.window != Q_logits.window:
        raise ValueError("teacher/student windows differ")
    if not np.array_equal(P.valid, Q_logits.valid):
        raise ValueError("teacher/student validity masks differ")
    if np.any(P.probs[~P.valid] != 0):
        raise ValueError("teacher puts probability mass on invalid slots")

    logq = _log_softmax(Q_logits.values, Q_logits.valid, temperature)
    q = np.where(Q_logits.valid, np.exp(logq), 0.0)
    p = P.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - logq), 0.0)
    n = Q_logits.num_tokens
    loss = float(terms.sum(axis=-1).reshape(-1).sum() / n)
    grad = np.where(Q_logits.valid, (q - p) / (temperature * n), 0.0)
    return loss, grad


# ---------------------------------------------------------------------------
# Teacher fusion
# ---------------------------------------------------------------------------


def _check_k(k: float) -> None:
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"fusion weight k must lie in [0, 1], got {k}")


def fuse_lgf(S_fwd: SimilarityField, S_bwd: SimilarityField, k: float = 0.5) -> SimilarityField:
    """Convex combination of two similarity fields (fusion after the LGF operator)."""
    _check_k(k)
    S_fwd.check_compatible(S_bwd)
    values = np.where(S_fwd.valid, k * S_fwd.values + (1.0 - k) * S_bwd.values, 0.0)
    return SimilarityField(values, S_fwd.valid.copy(), S_fwd.window, S_fwd.direction)


def fuse_feature_space(F_fwd: np.ndarray, F_bwd: np.ndarray, k: float = 0.5) -> np.ndarray:
    """Convex combination of raw features; the baseline that suffers cross-term interference."""
    _check_k(k)
    if F_fwd.shape != F_bwd.shape:
        raise ValueError(f"feature shapes differ: {F_fwd.shape} vs {F_bwd.shape}")
    return k * F_fwd + (1.0 - k) * F_bwd


class FusionIdentityError(ArithmeticError):
    pass


def fusion_gap(a, b, c, d, k: float, tol: float = 1e-10):
    """Similarity of feature-fused vs LGF-fused teachers for one token pair.

    ``a``/``b`` are forward/backward features at frame t, ``c``/``d`` at t+1.
    Returns ``(g_feat, g_lgf, gap)`` after checking the cross-term expansion
    and ``gap == k(1-k) (a-b).(d-c)`` to absolute tolerance ``tol``.
    """
    a, b, c, d = (np.asarray(v, dtype=np.float64) for v in (a, b, c, d))
    if not (a.shape == b.shape == c.shape == d.shape) or a.ndim != 1:
        raise ValueError("fusion_gap needs four equal-length vectors")
    g_feat = float((k * a + (1 - k) * b) @ (k * c + (1 - k) * d))
    g_lgf = float(k * (a @ c) + (1 - k) * (b @ d))
    gap = g_feat - g_lgf
    expanded = k * k * (a @ c) + (1 - k) ** 2 * (b @ d) + k * (1 - k) * (a @ d + b @ c)
    closed = k * (1 - k) * ((a - b) @ (d - c))
    if abs(g_feat - expanded) >= tol or abs(gap - closed) >= tol:
        raise FusionIdentityError(
            f"cross-term identity violated: expansion err {abs(g_feat - expanded):.3e}, "
            f"gap err {abs(gap - closed):.3e}")
    return g_feat, g_lgf, gap


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_field(prefix, field: SimilarityField | ProbField) -> None:
    """Writes ``<prefix>.lgft``, ``<prefix>.mask.lgft`` and ``<prefix>.json``."""
    if isinstance(field, SimilarityField):
        data, meta = field.values, {"kind": "similarity", "window": field.window, "direction": field.direction}
    else:
        data, meta = field.probs, {"kind": "probability", "window": field.window,
                                   "temperature": field.temperature}
    lgft.save(Path(f"{prefix}.lgft"), data)
    lgft.save(Path(f"{prefix}.mask.lgft"), field.valid.astype(np.uint8))
    Path(f"{prefix}.json").write_text(json.dumps(meta, indent=2))


def load_field(prefix) -> SimilarityField | ProbField:
    meta = json.loads(Path(f"{prefix}.json").read_text())
    data = lgft.load(Path(f"{prefix}.lgft"))
    valid = lgft.load(Path(f"{prefix}.mask.lgft")).astype(bool)
    if meta["kind"] == "similarity":
        return SimilarityField(data, valid, meta["window"], meta["direction"])
    return ProbField(data, valid, meta["temperature"], meta["window"])
