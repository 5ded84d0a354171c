"""AdamW, learning-rate schedules and global-norm gradient clipping."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

WARMUP_CONSTANT = "warmup-linear-constant"
WARMUP_COSINE = "warmup-cosine"


@dataclass
class ScheduleSpec:
    kind: str
    warmup: int
    peak: float
    min_lr: float = 0.0
    total: int = 3000

    def __post_init__(self):
        if self.kind not in (WARMUP_CONSTANT, WARMUP_COSINE):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup <= self.total:
            raise ValueError("schedule needs 0 <= warmup <= total")
        if self.min_lr > self.peak:
            raise ValueError("schedule needs min_lr <= peak")


def lora_schedule(total: int = 3000) -> ScheduleSpec:
    return ScheduleSpec(WARMUP_CONSTANT, warmup=200, peak=1e-4, min_lr=1e-4, total=total)


def projector_schedule(total: int = 3000) -> ScheduleSpec:
    return ScheduleSpec(WARMUP_COSINE, warmup=150, peak=5e-4, min_lr=1e-5, total=total)


def lr_at(step: int, spec: ScheduleSpec) -> float:
    """Linear warmup from 0, then constant or cosine decay to ``min_lr``."""
    if step < 0 or step > spec.total:
        raise ValueError(f"step {step} outside [0, {spec.total}]")
    if step < spec.warmup:
        return spec.peak * (step / spec.warmup)
    if spec.kind == WARMUP_CONSTANT or spec.total == spec.warmup:
        return spec.peak
    progress = (step - spec.warmup) / (spec.total - spec.warmup)
    w = 0.5 * (1.0 + math.cos(math.pi * progress))
    # weights exactly 1/0 at the ends, so peak and min_lr are hit bit-exactly
    return w * spec.peak + (1.0 - w) * spec.min_lr


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def like(cls, param: np.ndarray, **hyper) -> "AdamWState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState, lr: float):
    """One decoupled-weight-decay Adam update.

    Returns ``(new_param, applied)``.  A non-finite gradient leaves both the
    parameter and the state untouched and reports ``applied=False``.
    """
    if param.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.all(np.isfinite(grad)):
        return param, False
    b1, b2 = state.betas
    state.step += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1 ** state.step)
    v_hat = state.v / (1 - b2 ** state.step)
    new = param - lr * state.weight_decay * param
    new = new - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, True


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    return math.sqrt(total)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Scale all gradients by ``max_norm / norm`` when the global norm exceeds it.

    Returns ``(clipped, pre_clip_norm)``.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm

