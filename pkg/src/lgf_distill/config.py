"""Training configuration and its JSON schema."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .lgf import DIRECTIONS


@dataclass
class TrainConfig:
    # objective
    lam: float = 0.5
    k: float = 0.5
    fusion: str = "lgf"  # "lgf" | "feature"
    temperature: float = 0.1
    window: int = 7
    direction: str = "forward"
    eval_k: float = 0.5  # held-out clips are always scored against the LGF-fused teacher
    # loop
    steps: int = 2000
    batch: int = 2
    accum: int = 2
    clip_norm: float = 1.0
    seed: int = 42
    t_min: float = 0.02
    t_max: float = 0.98
    eval_timesteps: list = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    # optimizer
    lora_lr: float = 1e-4
    lora_warmup: int = 200
    proj_lr: float = 5e-4
    proj_min_lr: float = 1e-5
    proj_warmup: int = 150
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    # data
    cache_dir: str | None = None
    train_clips: int = 4
    heldout_clips: int = 2
    scene: dict = field(default_factory=lambda: {
        "frames": 13, "height": 32, "width": 32, "shape": "disc",
        "trajectory": "linear", "velocity": [1.0, 0.5], "seed": 0})
    teacher: dict = field(default_factory=lambda: {
        "rho": 0.7, "patch": 4, "channels": 32, "embed_seed": 1234, "gain": 1.0})
    # student, desk scale
    latent_channels: int = 16
    latent_seed: int = 99
    hidden: int = 16
    lora_rank: int = 4
    lora_alpha: float = 2.0
    proj_widths: list = field(default_factory=lambda: [16, 12, 8, 8])
    proj_out_channels: int | None = None  # None: match the teacher channel count

    def __post_init__(self):
        validate(self.to_dict())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        validate(doc)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


_num = {"type": "number"}
_int = {"type": "integer"}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "TrainConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lam": {"type": "number", "minimum": 0},
        "k": {"type": "number", "minimum": 0, "maximum": 1},
        "eval_k": {"type": "number", "minimum": 0, "maximum": 1},
        "fusion": {"enum": ["lgf", "feature"]},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "window": {"type": "integer", "minimum": 1},
        "direction": {"enum": list(DIRECTIONS)},
        "steps": {"type": "integer", "minimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "accum": {"type": "integer", "minimum": 1},
        "clip_norm": {"type": "number", "exclusiveMinimum": 0},
        "seed": _int,
        "t_min": {"type": "number", "minimum": 0, "maximum": 1},
        "t_max": {"type": "number", "minimum": 0, "maximum": 1},
        "eval_timesteps": {"type": "array", "minItems": 1,
                           "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "lora_lr": {"type": "number", "minimum": 0},
        "lora_warmup": {"type": "integer", "minimum": 0},
        "proj_lr": {"type": "number", "minimum": 0},
        "proj_min_lr": {"type": "number", "minimum": 0},
        "proj_warmup": {"type": "integer", "minimum": 0},
        "betas": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                  "minItems": 2, "maxItems": 2},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "cache_dir": {"type": ["string", "null"]},
        "train_clips": {"type": "integer", "minimum": 1},
        "heldout_clips": {"type": "integer", "minimum": 0},
        "scene": {"type": "object"},
        "teacher": {"type": "object", "properties": {
            "rho": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "patch": {"type": "integer", "minimum": 1},
            "channels": {"type": "integer", "minimum": 1},
            "embed_seed": _int, "gain": _num, "motion_gain": _num}},
        "latent_channels": {"type": "integer", "minimum": 1},
        "latent_seed": _int,
        "hidden": {"type": "integer", "minimum": 1},
        "lora_rank": {"type": "integer", "minimum": 1},
        "lora_alpha": {"type": "number", "minimum": 0},
        "proj_widths": {"type": "array", "items": {"type": "integer", "minimum": 1},
                        "minItems": 2},
        "proj_out_channels": {"type": ["integer", "null"], "minimum": 1},
    },
}


def validate(doc: dict) -> None:
    """Raises ``jsonschema.ValidationError`` on a bad document."""
    jsonschema.validate(doc, SCHEMA)
    if doc.get("window", 7) % 2 == 0:
        raise jsonschema.ValidationError("window must be odd")
    if doc.get("t_min", 0.02) > doc.get("t_max", 0.98):
        raise jsonschema.ValidationError("t_min must not exceed t_max")
