"""Trainable student path: v-prediction noising, toy denoiser with LoRA, projector.

Parameters live in flat ``dict[str, ndarray]`` maps so the trainer, the
checkpoint writer and the gradient checker can walk them uniformly.  Every
``*_forward`` returns its output plus a cache; the matching ``*_backward``
consumes that cache and returns gradients keyed like the parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .lgf import ProbField, kl_feat_loss, local_gram_flow, local_gram_flow_backward
from .teacher import embed_matrix, patchify
from .tensor import RngStream

INTERP_FACTOR = 4


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


def alpha_sigma(t: float) -> tuple[float, float]:
    """Cosine variance-preserving schedule; exact at both endpoints."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"diffusion time must lie in [0, 1], got {t}")
    if t == 1.0:
        return 0.0, 1.0
    return float(np.cos(np.pi * t / 2)), float(np.sin(np.pi * t / 2))


def noise_latent(z: np.ndarray, t: float, rng: RngStream):
    """Returns ``(z_t, eps, v)`` with ``v = alpha*eps - sigma*z``."""
    alpha, sigma = alpha_sigma(t)
    eps = rng.normal(z.shape)
    z_t = alpha * z + sigma * eps
    v = alpha * eps - sigma * z
    return z_t, eps, v


def recover(z_t: np.ndarray, v: np.ndarray, t: float):
    """Inverse rotation: ``(z, eps)`` from ``(z_t, v)``."""
    alpha, sigma = alpha_sigma(t)
    return alpha * z_t - sigma * v, sigma * z_t + alpha * v


def encode_latent(video: np.ndarray, stride: int = INTERP_FACTOR, patch: int = 4,
                  channels: int = 16, seed: int = 99) -> np.ndarray:
    """Stand-in for a video VAE: keep every ``stride``-th frame, project patches."""
    if (len(video) - 1) % stride:
        raise ValueError(f"clip length {len(video)} is not 1 + a multiple of {stride}")
    patches = patchify(video[::stride], patch)
    return patches @ embed_matrix(patches.shape[-1], channels, seed).T


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


def lora_effective(W_base, A, B, rank: int, alpha_lora: float) -> np.ndarray:
    """``W_base + (alpha_lora / rank) * B @ A``."""
    cout, cin = W_base.shape
    if A.shape != (rank, cin) or B.shape != (cout, rank):
        raise ValueError(f"LoRA shapes A{A.shape} B{B.shape} do not fit W{W_base.shape} at rank {rank}")
    return W_base + (alpha_lora / rank) * (B @ A)


# ---------------------------------------------------------------------------
# Toy denoiser: two per-token linear maps with SiLU between
# ---------------------------------------------------------------------------


@dataclass
class DenoiserConfig:
    channels: int = 16
    hidden: int = 16
    rank: int = 4
    alpha_lora: float = 2.0


def init_denoiser(cfg: DenoiserConfig, rng: RngStream) -> dict[str, np.ndarray]:
    C, Hd, r = cfg.channels, cfg.hidden, cfg.rank
    return {
        "den.W1": rng.normal((Hd, C), 1 / np.sqrt(C)),
        "den.b1": rng.normal(Hd, 0.1),
        "den.wt": rng.normal(Hd, 1.0),
        "den.W2": rng.normal((C, Hd), 1 / np.sqrt(Hd)),
        "den.b2": np.zeros(C),
        "den.lora1.A": rng.normal((r, C), 1 / np.sqrt(C)),
        "den.lora1.B": np.zeros((Hd, r)),
        "den.lora2.A": rng.normal((r, Hd), 1 / np.sqrt(Hd)),
        "den.lora2.B": np.zeros((C, r)),
    }


def denoiser_forward(z_t: np.ndarray, t: float, params, cfg: DenoiserConfig):
    """Returns ``(v_hat, F_diff, cache)``; ``F_diff`` is the post-SiLU hidden tap."""
    if z_t.shape[-1] != cfg.channels:
        raise ValueError(f"latent has {z_t.shape[-1]} channels, denoiser expects {cfg.channels}")
    W1 = lora_effective(params["den.W1"], params["den.lora1.A"], params["den.lora1.B"], cfg.rank, cfg.alpha_lora)
    W2 = lora_effective(params["den.W2"], params["den.lora2.A"], params["den.lora2.B"], cfg.rank, cfg.alpha_lora)
    pre = tn.linear(z_t, W1, params["den.b1"]) + t * params["den.wt"]
    h = tn.silu(pre)
    v_hat = tn.linear(h, W2, params["den.b2"])
    return v_hat, h, (z_t, t, W1, W2, pre, h)


def denoiser_backward(dv_hat, dF_diff, params, cfg: DenoiserConfig, cache):
    """Gradients for every denoiser parameter from ``dL/dv_hat`` and ``dL/dF_diff``."""
    z_t, t, W1, W2, pre, h = cache
    s = cfg.alpha_lora / cfg.rank
    dh, dW2, db2 = tn.linear_backward(dv_hat, h, W2)
    if dF_diff is not None:
        dh = dh + dF_diff
    dpre = tn.silu_backward(dh, pre)
    _, dW1, db1 = tn.linear_backward(dpre, z_t, W1)
    return {
        "den.W1": dW1,
        "den.b1": db1,
        "den.wt": t * dpre.reshape(-1, dpre.shape[-1]).sum(axis=0),
        "den.W2": dW2,
        "den.b2": db2,
        "den.lora1.A": s * params["den.lora1.B"].T @ dW1,
        "den.lora1.B": s * dW1 @ params["den.lora1.A"].T,
        "den.lora2.A": s * params["den.lora2.B"].T @ dW2,
        "den.lora2.B": s * dW2 @ params["den.lora2.A"].T,
    }


# ---------------------------------------------------------------------------
# Projection head
# ---------------------------------------------------------------------------


@dataclass
class ProjectorConfig:
    """``widths[0]`` is the skip-conv width (and F_diff channel count);
    ``widths[1:]`` are the three MLP output widths.  ``out_channels``
    overrides the last width, e.g. to match the teacher."""

    widths: tuple[int, ...] = (16, 12, 8, 8)
    out_channels: int | None = None
    factor: int = INTERP_FACTOR
    kernel_t: int = 3
    eps: float = tn.DEFAULT_GN_EPS

    @property
    def layer_widths(self) -> tuple[int, ...]:
        w = tuple(self.widths)
        if self.out_channels is not None:
            w = w[:-1] + (self.out_channels,)
        return w


def init_projector(cfg: ProjectorConfig, rng: RngStream) -> dict[str, np.ndarray]:
    w = cfg.layer_widths
    p = {
        "proj.conv.kernel": rng.normal((cfg.kernel_t, 1, 1, w[0], w[0]), 1 / np.sqrt(cfg.kernel_t * w[0])),
        "proj.conv.bias": np.zeros(w[0]),
        "proj.conv.gamma": np.ones(w[0]),
        "proj.conv.beta": np.zeros(w[0]),
    }
    for i, (cin, cout) in enumerate(zip(w[:-1], w[1:])):
        p[f"proj.mlp{i}.W"] = rng.normal((cout, cin), 1 / np.sqrt(cin))
        p[f"proj.mlp{i}.b"] = np.zeros(cout)
        p[f"proj.mlp{i}.gamma"] = np.ones(cout)
        p[f"proj.mlp{i}.beta"] = np.zeros(cout)
    return p


def projected_frames(latent_frames: int, factor: int = INTERP_FACTOR) -> int:
    return factor * latent_frames - (factor - 1)


def projector_forward(F_diff: np.ndarray, params, cfg: ProjectorConfig, target_grid):
    """``[T', h, w, Cd] -> [T, H', W', C_out]`` with ``T = 4T' - 3``.

    Trunk: temporal interpolation.  Skip: conv(3,1,1) -> GroupNorm -> SiLU,
    added to the trunk.  Then three per-token linear -> GroupNorm -> SiLU
    layers, and a bilinear resize onto the teacher grid.
    """
    T_target, H2, W2 = target_grid
    w = cfg.layer_widths
    if F_diff.shape[-1] != w[0]:
        raise ValueError(f"F_diff has {F_diff.shape[-1]} channels, projector expects {w[0]}")
    T_out = projected_frames(F_diff.shape[0], cfg.factor)
    if T_out != T_target:
        raise ValueError(f"{F_diff.shape[0]} latent frames interpolate to {T_out}, target has {T_target}")
    g0 = tn.default_groups(w[0])
    x = tn.interp_temporal(F_diff, cfg.factor)
    s = tn.conv3d(x, params["proj.conv.kernel"], params["proj.conv.bias"])
    sn, gn0 = tn.group_norm(s, g0, params["proj.conv.gamma"], params["proj.conv.beta"], cfg.eps, True)
    u = x + tn.silu(sn)
    layers = []
    for i in range(len(w) - 1):
        a = tn.linear(u, params[f"proj.mlp{i}.W"], params[f"proj.mlp{i}.b"])
        g = tn.default_groups(w[i + 1])
        an, gn = tn.group_norm(a, g, params[f"proj.mlp{i}.gamma"], params[f"proj.mlp{i}.beta"], cfg.eps, True)
        layers.append((u, an, gn, g))
        u = tn.silu(an)
    out = tn.resample_spatial(u, H2, W2)
    cache = (F_diff.shape, x, sn, gn0, g0, layers, u.shape)
    return out, cache


def projector_backward(dout: np.ndarray, params, cfg: ProjectorConfig, cache):
    """Returns ``(dF_diff, grads)``."""
    fshape, x, sn, gn0, g0, layers, ushape = cache
    grads = {}
    du = tn.resample_spatial_backward(dout, ushape[1], ushape[2])
    for i in reversed(range(len(layers))):
        u_in, an, gn, g = layers[i]
        dan = tn.silu_backward(du, an)
        da, grads[f"proj.mlp{i}.gamma"], grads[f"proj.mlp{i}.beta"] = tn.group_norm_backward(
            dan, g, params[f"proj.mlp{i}.gamma"], gn)
        du, grads[f"proj.mlp{i}.W"], grads[f"proj.mlp{i}.b"] = tn.linear_backward(da, u_in, params[f"proj.mlp{i}.W"])
    dsn = tn.silu_backward(du, sn)
    ds, grads["proj.conv.gamma"], grads["proj.conv.beta"] = tn.group_norm_backward(
        dsn, g0, params["proj.conv.gamma"], gn0)
    dx_skip, grads["proj.conv.kernel"], grads["proj.conv.bias"] = tn.conv3d_backward(ds, x, params["proj.conv.kernel"])
    dx = du + dx_skip
    dF = tn.interp_temporal_backward(dx, fshape[0], cfg.factor)
    return dF, grads


# ---------------------------------------------------------------------------
# Feature loss through projector + LGF + softmax + KL
# ---------------------------------------------------------------------------


def feature_loss(F_diff, params, cfg: ProjectorConfig, teacher: ProbField, temperature: float,
                 window: int, direction: str = "forward", need_grad: bool = True):
    """``L_feat`` of the projected student against fixed teacher probabilities.

    Returns ``(loss, dF_diff, projector_grads)``; the gradients are ``None``
    when ``need_grad`` is false.
    """
    grid = teacher.probs.shape[0] + 1, teacher.probs.shape[1], teacher.probs.shape[2]
    F_hat, pcache = projector_forward(F_diff, params, cfg, grid)
    sims = local_gram_flow(F_hat, window, direction)
    loss, dsims = kl_feat_loss(teacher, sims, temperature)
    if not need_grad:
        return loss, None, None
    dF_hat = local_gram_flow_backward(dsims, F_hat, window, direction)
    dF, grads = projector_backward(dF_hat, params, cfg, pcache)
    return loss, dF, grads
