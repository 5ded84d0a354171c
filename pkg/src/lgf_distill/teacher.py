"""Synthetic teacher: toy motion clips and causal-memory features.

The teacher stands in for a recurrent video tracker.  Frames are embedded by
a fixed random patch projection, and a memory feature is an exponential
moving average over the embeddings seen so far, so ``fwd[t]`` only knows
frames ``0..t``.  The backward stream runs the same recurrence on the
reversed clip and is flipped back to the original frame order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import lgft
from .tensor import RngStream

SHAPES = ("disc", "bar")
TRAJECTORIES = ("linear", "sinusoidal", "switch")


@dataclass
class SceneConfig:
    frames: int = 13
    height: int = 32
    width: int = 32
    shape: str = "disc"
    trajectory: str = "linear"
    velocity: tuple[float, float] = (1.0, 0.5)  # (dx, dy) pixels per frame
    seed: int = 0
    radius: float = 4.0  # disc radius, or bar half-thickness times 2
    link_lengths: tuple[float, float] = (6.0, 5.0)
    texture: float = 0.15

    def __post_init__(self):
        if self.frames < 4:
            raise ValueError("a scene needs at least 4 frames")
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        self.velocity = tuple(float(v) for v in self.velocity)
        self.link_lengths = tuple(float(v) for v in self.link_lengths)

    def extent(self) -> float:
        """Distance from the anchor point to the farthest subject pixel."""
        if self.shape == "disc":
            return self.radius
        return sum(self.link_lengths) + self.radius / 2


def displacement(cfg: SceneConfig) -> np.ndarray:
    """Anchor displacement from its start position, ``[N, 2]`` as (x, y)."""
    t = np.arange(cfg.frames, dtype=np.float64)[:, None]
    v = np.asarray(cfg.velocity)[None, :]
    if cfg.trajectory == "linear":
        return v * t
    if cfg.trajectory == "sinusoidal":
        omega = 2 * np.pi / cfg.frames
        return v * np.sin(omega * t) / omega
    # switch: constant velocity, then turn 90 degrees halfway through
    ts = cfg.frames // 2
    turned = np.array([-cfg.velocity[1], cfg.velocity[0]])[None, :]
    before = v * np.minimum(t, ts)
    after = turned * np.maximum(t - ts, 0)
    return before + after


def _start_position(cfg: SceneConfig, disp: np.ndarray, rng: RngStream) -> np.ndarray:
    margin = cfg.extent() + 1.0
    start = np.empty(2)
    for axis, size in enumerate((cfg.width, cfg.height)):
        lo = margin - disp[:, axis].min()
        hi = size - 1 - margin - disp[:, axis].max()
        if lo > hi:
            raise ValueError(f"subject would leave the frame along axis {'xy'[axis]}")
        start[axis] = lo + (hi - lo) * rng.uniform()
    return start


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    s = np.clip(((px - x0) * dx + (py - y0) * dy) / L2, 0.0, 1.0)
    return np.hypot(px - (x0 + s * dx), py - (y0 + s * dy))


def subject_alpha(cfg: SceneConfig) -> np.ndarray:
    """Soft subject coverage per frame, ``[N, H, W]`` in ``[0, 1]``."""
    rng = RngStream(cfg.seed)
    disp = displacement(cfg)
    anchor = _start_position(cfg, disp, rng) + disp
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    out = np.empty((cfg.frames, cfg.height, cfg.width))
    if cfg.shape == "disc":
        for t, (cx, cy) in enumerate(anchor):
            out[t] = np.clip(cfg.radius + 0.5 - np.hypot(xx - cx, yy - cy), 0.0, 1.0)
        return out
    # articulated bar: joint angles are driven by distance travelled, so a
    # stationary bar does not move
    step = np.r_[0.0, np.hypot(*np.diff(disp, axis=0).T)]
    phase = np.cumsum(step) / 3.0
    theta0 = rng.uniform(low=0.0, high=2 * np.pi)
    L1, L2 = cfg.link_lengths
    half = cfg.radius / 2
    for t, (cx, cy) in enumerate(anchor):
        a1 = theta0 + 0.5 * np.sin(phase[t])
        a2 = a1 + 0.8 * np.sin(phase[t] + 1.0)
        jx, jy = cx + L1 * np.cos(a1), cy + L1 * np.sin(a1)
        ex, ey = jx + L2 * np.cos(a2), jy + L2 * np.sin(a2)
        dist = np.minimum(_segment_distance(xx, yy, cx, cy, jx, jy),
                          _segment_distance(xx, yy, jx, jy, ex, ey))
        out[t] = np.clip(half + 0.5 - dist, 0.0, 1.0)
    return out


def gen_synthetic_video(cfg: SceneConfig) -> np.ndarray:
    """Render a clip ``[N, H, W, 3]`` with values in ``[0, 1]``."""
    alpha = subject_alpha(cfg)[..., None]
    rng = RngStream(cfg.seed).split(1)
    colour = rng.uniform(3, 0.5, 1.0)
    background = cfg.texture * rng.uniform((cfg.height, cfg.width, 3))
    return background[None] * (1.0 - alpha) + colour * alpha


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``[N, H, W, C] -> [N, H/p, W/p, p*p*C]`` with non-overlapping patches."""
    N, H, W, C = frames.shape
    if H % patch or W % patch:
        raise ValueError(f"frame size {H}x{W} is not divisible by patch {patch}")
    x = frames.reshape(N, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(N, H // patch, W // patch, patch * patch * C)


def embed_matrix(in_dim: int, out_dim: int, seed: int, gain: float = 1.0) -> np.ndarray:
    return RngStream(seed).normal((out_dim, in_dim), scale=gain / np.sqrt(in_dim))


def frame_embed(video: np.ndarray, patch: int = 4, channels: int = 32, seed: int = 0,
                gain: float = 1.0) -> np.ndarray:
    """Fixed random linear projection of each patch, no bias."""
    patches = patchify(video, patch)
    proj = embed_matrix(patches.shape[-1], channels, seed, gain)
    return patches @ proj.T


def causal_memory(embeds: np.ndarray, rho: float = 0.7) -> np.ndarray:
    """``F_0 = e_0``, ``F_t = rho F_{t-1} + (1 - rho) e_t``."""
    if not 0.0 < rho < 1.0:
        raise ValueError("memory decay rho must lie in (0, 1)")
    out = np.empty_like(embeds, dtype=np.float64)
    out[0] = embeds[0]
    for t in range(1, len(embeds)):
        out[t] = rho * out[t - 1] + (1.0 - rho) * embeds[t]
    return out


def remap(features: np.ndarray) -> np.ndarray:
    """Frame index ``t -> N-1-t``."""
    return features[::-1].copy()


def backward_memory(embeds: np.ndarray, rho: float = 0.7) -> np.ndarray:
    """Memory over the reversed clip, returned in original frame order."""
    return remap(causal_memory(remap(embeds), rho))


def motion_embed(video: np.ndarray, patch: int = 4, channels: int = 32, seed: int = 0,
                 gain: float = 1.0) -> np.ndarray:
    """Projected frame difference ``x_t - x_{t-1}`` (zero at ``t = 0``).

    Causal, and its sign flips when the clip is played backwards.
    """
    patches = patchify(video, patch)
    diffs = np.zeros_like(patches)
    diffs[1:] = patches[1:] - patches[:-1]
    proj = embed_matrix(patches.shape[-1], channels, seed + 1, gain)
    return diffs @ proj.T


def memory_inputs(video: np.ndarray, patch: int = 4, channels: int = 32, seed: int = 0,
                  gain: float = 1.0, motion_gain: float = 1.0) -> np.ndarray:
    """Per-frame input to the memory recurrence: appearance plus signed motion."""
    e = frame_embed(video, patch, channels, seed, gain)
    if motion_gain:
        e = e + motion_embed(video, patch, channels, seed, gain * motion_gain)
    return e


@dataclass
class TeacherBundle:
    fwd: np.ndarray
    bwd: np.ndarray
    rho: float
    embed_seed: int


def teacher_features(video: np.ndarray, rho: float = 0.7, patch: int = 4, channels: int = 32,
                     embed_seed: int = 0, gain: float = 1.0, motion_gain: float = 1.0) -> TeacherBundle:
    """Forward memory of the clip, and remapped memory of the reversed clip."""
    fwd = causal_memory(memory_inputs(video, patch, channels, embed_seed, gain, motion_gain), rho)
    rev = memory_inputs(video[::-1], patch, channels, embed_seed, gain, motion_gain)
    return TeacherBundle(fwd, remap(causal_memory(rev, rho)), rho, embed_seed)


# ---------------------------------------------------------------------------
# On-disk cache: one directory per clip
# ---------------------------------------------------------------------------


@dataclass
class TeacherSpec:
    rho: float = 0.7
    patch: int = 4
    channels: int = 32
    embed_seed: int = 1234
    gain: float = 1.0
    motion_gain: float = 1.0


def write_clip(clip_dir, scene: SceneConfig, spec: TeacherSpec) -> Path:
    clip_dir = Path(clip_dir)
    video = gen_synthetic_video(scene)
    bundle = teacher_features(video, spec.rho, spec.patch, spec.channels, spec.embed_seed, spec.gain,
                              spec.motion_gain)
    lgft.save(clip_dir / "video.lgft", video)
    lgft.save(clip_dir / "fwd.lgft", bundle.fwd)
    lgft.save(clip_dir / "bwd.lgft", bundle.bwd)
    meta = {"scene": asdict(scene), "rho": spec.rho, "embed_seed": spec.embed_seed,
            "patch": spec.patch, "channels": spec.channels, "gain": spec.gain,
            "motion_gain": spec.motion_gain}
    (clip_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return clip_dir


def read_clip(clip_dir):
    """Returns ``(video, TeacherBundle, meta)``."""
    clip_dir = Path(clip_dir)
    if not (clip_dir / "meta.json").exists():
        raise FileNotFoundError(f"no teacher cache at {clip_dir}")
    meta = json.loads((clip_dir / "meta.json").read_text())
    bundle = TeacherBundle(lgft.load(clip_dir / "fwd.lgft"), lgft.load(clip_dir / "bwd.lgft"),
                           meta["rho"], meta["embed_seed"])
    return lgft.load(clip_dir / "video.lgft"), bundle, meta
