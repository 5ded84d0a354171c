import pytest

from lgf_distill.config import TrainConfig
from lgf_distill.trainer import build_cache


def tiny_config(cache_dir, **overrides) -> TrainConfig:
    """A seconds-scale config: 9-frame 16x16 clips, 8 teacher channels, 3x3 window."""
    doc = dict(
        steps=4, batch=1, accum=2, window=3, train_clips=2, heldout_clips=1,
        eval_timesteps=[0.3, 0.7], cache_dir=str(cache_dir),
        scene={"frames": 9, "height": 16, "width": 16, "radius": 3.0, "shape": "disc",
               "trajectory": "linear", "velocity": [0.5, 0.25], "seed": 0},
        teacher={"rho": 0.7, "patch": 4, "channels": 8, "embed_seed": 1234, "gain": 1.0},
    )
    doc.update(overrides)
    return TrainConfig.from_dict(doc)


@pytest.fixture
def tiny_cfg(tmp_path):
    cfg = tiny_config(tmp_path / "cache")
    build_cache(cfg)
    return cfg


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
