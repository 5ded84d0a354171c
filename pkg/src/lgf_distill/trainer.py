"""Training loop for ``L_diff + lam * L_feat``.

Only the LoRA factors and the projector are optimized; denoiser base weights
stay frozen.  Each optimizer step accumulates ``batch * accum`` samples in a
fixed order, clips the joint gradient norm, then applies AdamW with the
LoRA and projector schedules.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lgft
from .config import TrainConfig
from .lgf import ProbField, fuse_feature_space, fuse_lgf, local_gram_flow, temp_softmax
from .optim import (WARMUP_CONSTANT, WARMUP_COSINE, AdamWState, ScheduleSpec, adamw_step,
                    clip_grads, lr_at)
from .student import (DenoiserConfig, ProjectorConfig, denoiser_backward, denoiser_forward,
                      encode_latent, feature_loss, init_denoiser, init_projector, noise_latent)
from .teacher import SceneConfig, TeacherSpec, read_clip, write_clip
from .tensor import RngStream

log = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "lr_lora", "lr_proj", "L_diff", "L_feat", "L_total", "grad_norm_preclip"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# Teacher cache
# ---------------------------------------------------------------------------


def clip_scenes(cfg: TrainConfig, split: str) -> list[SceneConfig]:
    """Scenes for a split; the velocity is rotated by a quarter turn per clip."""
    n = cfg.train_clips if split == "train" else cfg.heldout_clips
    offset = 0 if split == "train" else 1000
    base = dict(cfg.scene)
    vx, vy = base.pop("velocity", (1.0, 0.5))
    seed0 = base.pop("seed", 0)
    scenes = []
    for i in range(n):
        turns = (i + (offset // 1000)) % 4
        v = (vx, vy)
        for _ in range(turns):
            v = (-v[1], v[0])
        scenes.append(SceneConfig(velocity=v, seed=seed0 + offset + i, **base))
    return scenes


def teacher_spec(cfg: TrainConfig) -> TeacherSpec:
    return TeacherSpec(**cfg.teacher)


def build_cache(cfg: TrainConfig, cache_dir=None) -> Path:
    cache_dir = Path(cache_dir or cfg.cache_dir)
    spec = teacher_spec(cfg)
    for split in ("train", "heldout"):
        for i, scene in enumerate(clip_scenes(cfg, split)):
            write_clip(cache_dir / split / f"clip_{i:03d}", scene, spec)
    return cache_dir


@dataclass
class Clip:
    latent: np.ndarray
    P: ProbField


def teacher_probs(fwd, bwd, k, fusion, temperature, window, direction) -> ProbField:
    if fusion == "lgf":
        S = fuse_lgf(local_gram_flow(fwd, window, direction), local_gram_flow(bwd, window, direction), k)
    elif fusion == "feature":
        S = local_gram_flow(fuse_feature_space(fwd, bwd, k), window, direction)
    else:
        raise ValueError(f"unknown fusion mode {fusion!r}")
    return temp_softmax(S, temperature)


def load_clips(cfg: TrainConfig, split: str, k: float, fusion: str) -> list[Clip]:
    root = Path(cfg.cache_dir) / split
    n = cfg.train_clips if split == "train" else cfg.heldout_clips
    clips = []
    for i in range(n):
        video, bundle, _ = read_clip(root / f"clip_{i:03d}")
        latent = encode_latent(video, channels=cfg.latent_channels, seed=cfg.latent_seed,
                               patch=cfg.teacher.get("patch", 4))
        P = teacher_probs(bundle.fwd, bundle.bwd, k, fusion, cfg.temperature, cfg.window, cfg.direction)
        clips.append(Clip(latent, P))
    return clips


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class Student:
    den_cfg: DenoiserConfig
    proj_cfg: ProjectorConfig
    params: dict[str, np.ndarray]

    @property
    def lora_names(self) -> list[str]:
        return sorted(n for n in self.params if ".lora" in n)

    @property
    def proj_names(self) -> list[str]:
        return sorted(n for n in self.params if n.startswith("proj."))

    @property
    def trainable(self) -> list[str]:
        return self.lora_names + self.proj_names


def build_student(cfg: TrainConfig) -> Student:
    den_cfg = DenoiserConfig(cfg.latent_channels, cfg.hidden, cfg.lora_rank, cfg.lora_alpha)
    out = cfg.proj_out_channels if cfg.proj_out_channels is not None else cfg.teacher.get("channels", 32)
    proj_cfg = ProjectorConfig(widths=tuple(cfg.proj_widths), out_channels=out)
    if proj_cfg.layer_widths[0] != cfg.hidden:
        raise ValueError("proj_widths[0] must equal the denoiser hidden width (the F_diff channel count)")
    rng = RngStream(cfg.seed).split(7)
    params = init_denoiser(den_cfg, rng)
    params.update(init_projector(proj_cfg, rng))
    return Student(den_cfg, proj_cfg, params)


def sample_loss(student: Student, clip: Clip, t: float, rng: RngStream, cfg: TrainConfig,
                need_grad: bool = True):
    """Losses and trainable-parameter gradients for one noised clip."""
    z_t, _, v = noise_latent(clip.latent, t, rng)
    v_hat, F_diff, dcache = denoiser_forward(z_t, t, student.params, student.den_cfg)
    resid = v_hat - v
    L_diff = float(np.mean(resid * resid))
    want_feat_grad = need_grad and cfg.lam > 0
    L_feat, dF, pgrads = feature_loss(F_diff, student.params, student.proj_cfg, clip.P, cfg.temperature,
                                      cfg.window, cfg.direction, need_grad=want_feat_grad)
    if not need_grad:
        return L_diff, L_feat, None
    dv = 2.0 * resid / resid.size
    dF = cfg.lam * dF if want_feat_grad else None
    grads = denoiser_backward(dv, dF, student.params, student.den_cfg, dcache)
    if want_feat_grad:
        grads.update({n: cfg.lam * g for n, g in pgrads.items()})
    else:
        grads.update({n: np.zeros_like(student.params[n]) for n in student.proj_names})
    return L_diff, L_feat, {n: grads[n] for n in student.trainable}


def evaluate(student: Student, clips: list[Clip], cfg: TrainConfig, salt: int) -> dict:
    """Mean losses over every clip and every fixed evaluation timestep, fixed noise."""
    L_d, L_f = [], []
    for ci, clip in enumerate(clips):
        for ti, t in enumerate(cfg.eval_timesteps):
            rng = RngStream(cfg.seed + salt).split(ci * 1000 + ti)
            d, f, _ = sample_loss(student, clip, t, rng, cfg, need_grad=False)
            L_d.append(d)
            L_f.append(f)
    return {"L_diff": float(np.mean(L_d)), "L_feat": float(np.mean(L_f))} if clips else {}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(out_dir, student: Student, cfg: TrainConfig, step: int) -> Path:
    """One LGFT file per parameter plus ``manifest.json``; the directory is swapped in atomically."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=out_dir.name + ".tmp"))
    for name, arr in student.params.items():
        lgft.save(tmp / f"{name}.lgft", arr)
    manifest = {
        "global_step": step,
        "params": {n: list(a.shape) for n, a in sorted(student.params.items())},
        "trainable": student.trainable,
        "lora": {"rank": cfg.lora_rank, "alpha": cfg.lora_alpha,
                 "layers": sorted({n.rsplit(".", 1)[0] for n in student.lora_names})},
        "schedules": {"lora": WARMUP_CONSTANT, "projector": WARMUP_COSINE},
        "config": cfg.to_dict(),
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if out_dir.exists():
        old = out_dir.with_name(out_dir.name + ".old")
        os.replace(out_dir, old)
        os.replace(tmp, out_dir)
        for f in old.iterdir():
            f.unlink()
        old.rmdir()
    else:
        os.replace(tmp, out_dir)
    return out_dir


def load_checkpoint(ckpt_dir) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    params = {n: lgft.load(ckpt_dir / f"{n}.lgft") for n in manifest["params"]}
    return params, manifest


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    eval_initial: dict = field(default_factory=dict)
    eval_final: dict = field(default_factory=dict)
    heldout_initial: dict = field(default_factory=dict)
    heldout_final: dict = field(default_factory=dict)
    skipped_steps: list[int] = field(default_factory=list)
    params: dict | None = None

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([row["step"]] + [format(row[c], ".17g") for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "steps": len(self.rows) - 1,
            "eval_initial": self.eval_initial, "eval_final": self.eval_final,
            "heldout_initial": self.heldout_initial, "heldout_final": self.heldout_final,
            "skipped_steps": self.skipped_steps,
        }


def schedules(cfg: TrainConfig) -> tuple[ScheduleSpec, ScheduleSpec]:
    total = max(cfg.steps, 1)
    lora = ScheduleSpec(WARMUP_CONSTANT, min(cfg.lora_warmup, total), cfg.lora_lr, cfg.lora_lr, total)
    proj = ScheduleSpec(WARMUP_COSINE, min(cfg.proj_warmup, total), cfg.proj_lr, cfg.proj_min_lr, total)
    return lora, proj


def train_loop(cfg: TrainConfig, out_dir=None, eval_every: int = 0) -> TrainReport:
    """Run the optimization described by ``cfg``.

    Row 0 of the report is the initial-loss evaluation on the fixed
    evaluation set; rows ``1..steps`` are mini-batch losses of each
    optimizer step.  Writes ``train.csv``, ``report.json`` and a
    checkpoint when ``out_dir`` is given.
    """
    if cfg.cache_dir is None or not (Path(cfg.cache_dir) / "train").is_dir():
        raise FileNotFoundError(f"teacher cache missing at {cfg.cache_dir!r}")
    train = load_clips(cfg, "train", cfg.k, cfg.fusion)
    heldout = load_clips(cfg, "heldout", cfg.eval_k, "lgf") if cfg.heldout_clips else []
    student = build_student(cfg)
    lora_spec, proj_spec = schedules(cfg)
    hyper = dict(betas=tuple(cfg.betas), eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    states = {n: AdamWState.like(student.params[n], **hyper) for n in student.trainable}
    report = TrainReport()

    report.eval_initial = evaluate(student, train, cfg, salt=1)
    report.heldout_initial = evaluate(student, heldout, cfg, salt=2)
    init_grads = _batch_grads(student, train, cfg, RngStream(cfg.seed).split(3))[2]
    report.rows.append(_row(0, 0.0, 0.0, report.eval_initial["L_diff"], report.eval_initial["L_feat"],
                            cfg.lam, _norm(init_grads)))

    rng = RngStream(cfg.seed).split(11)
    for step in range(1, cfg.steps + 1):
        L_diff, L_feat, grads = _batch_grads(student, train, cfg, rng)
        if not (math.isfinite(L_diff) and math.isfinite(L_feat)):
            raise NonFiniteLossError(step)
        grads, norm = clip_grads(grads, cfg.clip_norm)
        lr_l, lr_p = lr_at(step, lora_spec), lr_at(step, proj_spec)
        for name in student.trainable:
            lr = lr_l if name in student.lora_names else lr_p
            new, ok = adamw_step(student.params[name], grads[name], states[name], lr)
            if not ok:
                report.skipped_steps.append(step)
                log.warning("non-finite gradient for %s at step %d; update skipped", name, step)
            student.params[name] = new
        report.rows.append(_row(step, lr_l, lr_p, L_diff, L_feat, cfg.lam, norm))
        if eval_every and step % eval_every == 0:
            log.info("step %d eval %s", step, evaluate(student, train, cfg, salt=1))

    report.eval_final = evaluate(student, train, cfg, salt=1)
    report.heldout_final = evaluate(student, heldout, cfg, salt=2)
    report.params = student.params
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train.csv").write_text(report.csv_text())
        (out_dir / "report.json").write_text(json.dumps(report.summary(), indent=2))
        save_checkpoint(out_dir / "checkpoint", student, cfg, cfg.steps)
    return report


def _batch_grads(student: Student, clips: list[Clip], cfg: TrainConfig, rng: RngStream):
    n = cfg.batch * cfg.accum
    acc = {name: np.zeros_like(student.params[name]) for name in student.trainable}
    L_diff = L_feat = 0.0
    for _ in range(n):
        ci = int(rng.integers(0, len(clips)))
        t = float(rng.uniform(low=cfg.t_min, high=cfg.t_max))
        d, f, g = sample_loss(student, clips[ci], t, rng, cfg)
        L_diff += d / n
        L_feat += f / n
        for name in acc:
            acc[name] += g[name] / n
    return L_diff, L_feat, acc


def _norm(grads) -> float:
    return clip_grads(grads, 1.0)[1]


def _row(step, lr_l, lr_p, L_diff, L_feat, lam, norm) -> dict:
    return {"step": step, "lr_lora": lr_l, "lr_proj": lr_p, "L_diff": L_diff, "L_feat": L_feat,
            "L_total": L_diff + lam * L_feat, "grad_norm_preclip": norm}
