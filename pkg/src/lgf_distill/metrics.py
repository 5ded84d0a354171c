"""Motion Score and Extended Motion Score from normalized sub-metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

CORE = ("background_consistency", "motion_smoothness", "subject_consistency")
I2V = ("i2v_subject", "i2v_background")
ALL = CORE + I2V


def minmax_norm(raw: float, lo: float, hi: float) -> float:
    if hi <= lo:
        raise ValueError(f"normalization range needs max > min, got ({lo}, {hi})")
    return min(1.0, max(0.0, (raw - lo) / (hi - lo)))


def _check_unit(*xs: float) -> None:
    for x in xs:
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"normalized score {x} outside [0, 1]")


def motion_score(bg: float, smooth: float, subj: float) -> float:
    _check_unit(bg, smooth, subj)
    return (bg + smooth + subj) / 3


def ext_motion_score(bg: float, smooth: float, subj: float, i2v_s: float, i2v_b: float) -> float:
    _check_unit(bg, smooth, subj, i2v_s, i2v_b)
    return (bg + smooth + subj + 0.5 * i2v_s + 0.5 * i2v_b) / 4


@dataclass
class SubScores:
    raw: dict[str, float]
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def normalized(self) -> dict[str, float]:
        # identity range (0, 1) when none is given
        return {k: minmax_norm(v, *self.ranges.get(k, (0.0, 1.0))) for k, v in self.raw.items()}


def score_document(doc: dict) -> dict:
    """Scores a ``{"raw": {...}, "ranges": {...}}`` document.

    Missing i2v entries leave the extended score out of the result.
    """
    raw = doc.get("raw")
    if not isinstance(raw, dict):
        raise ValueError("scores document needs a 'raw' object")
    missing = [k for k in CORE if k not in raw]
    if missing:
        raise ValueError(f"missing core sub-scores: {missing}")
    unknown = [k for k in raw if k not in ALL]
    if unknown:
        raise ValueError(f"unknown sub-scores: {unknown}")
    ranges = {k: tuple(v) for k, v in doc.get("ranges", {}).items()}
    norm = SubScores({k: float(v) for k, v in raw.items()}, ranges).normalized()
    out = {"normalized": norm, "motion_score": motion_score(*(norm[k] for k in CORE))}
    if all(k in norm for k in I2V):
        out["ext_motion_score"] = ext_motion_score(*(norm[k] for k in CORE + I2V))
    return out
