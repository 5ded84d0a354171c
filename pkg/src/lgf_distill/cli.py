"""Command-line entry point.

Every command prints one JSON document on stdout.  Exit codes: 0 when all
checks pass, 1 when a check fails, 2 on usage or schema errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import lgft
from .config import TrainConfig
from .gradcheck import SCOPES, TOLERANCE, run_scope
from .lgf import DIRECTIONS, entropy, fusion_gap, local_gram_flow, save_field, temp_softmax
from .metrics import score_document
from .tensor import RngStream
from .trainer import NonFiniteLossError, build_cache, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _emit(doc: dict, out: Path | None = None, name: str = "summary.json") -> None:
    doc.setdefault("deterministic", os.environ.get("LGF_DETERMINISTIC", "1") == "1")
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text + "\n")


def _usage_error(message: str) -> int:
    _emit({"ok": False, "error": message})
    return EXIT_USAGE


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    worst = run_scope(args.scope, args.seed, args.trials)
    tol = TOLERANCE[args.scope]
    failing = sorted(k for k, v in worst.items() if not v < tol)
    _emit({"command": "gradcheck", "scope": args.scope, "seed": args.seed, "trials": args.trials,
           "tolerance": tol, "worst_relative_error": worst,
           "max_relative_error": max(worst.values()), "failing": failing,
           "ok": not failing, "seconds": round(time.perf_counter() - start, 3)}, args.out)
    return EXIT_OK if not failing else EXIT_FAIL


def cmd_verify_fusion(args) -> int:
    if args.draws < 1:
        return _usage_error("--draws must be >= 1")
    rng = RngStream(args.seed)
    worst_expand = worst_gap = max_abs_gap = max_closed = 0.0
    violations = 0
    k_grid = [float(v) for v in args.k_grid.split(",")] if args.k_grid else None
    for i in range(args.draws):
        a, b, c, d = (rng.normal(args.dim) for _ in range(4))
        if args.force_equal:
            b = a.copy()
        if k_grid is not None:
            k = k_grid[i % len(k_grid)]
        elif args.k is not None:
            k = args.k
        else:
            k = float(rng.uniform())
        try:
            g_feat, g_lgf, gap = fusion_gap(a, b, c, d, k)
        except ArithmeticError:
            violations += 1
            g_feat = float((k * a + (1 - k) * b) @ (k * c + (1 - k) * d))
            g_lgf = float(k * (a @ c) + (1 - k) * (b @ d))
            gap = g_feat - g_lgf
        expanded = k * k * (a @ c) + (1 - k) ** 2 * (b @ d) + k * (1 - k) * (a @ d + b @ c)
        closed = k * (1 - k) * ((a - b) @ (d - c))
        worst_expand = max(worst_expand, float(abs(g_feat - expanded)))
        worst_gap = max(worst_gap, float(abs(gap - closed)))
        max_abs_gap = max(max_abs_gap, abs(gap))
        max_closed = max(max_closed, float(abs(closed)))
    ok = bool(violations == 0 and worst_expand < 1e-10 and worst_gap < 1e-10)
    _emit({"command": "verify-fusion", "draws": args.draws, "seed": args.seed,
           "max_expansion_deviation": worst_expand, "max_gap_deviation": worst_gap,
           "max_abs_gap": max_abs_gap, "max_abs_gap_closed_form": max_closed,
           "violations": violations, "tolerance": 1e-10,
           "ok": ok}, args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_lgf(args) -> int:
    try:
        feats = lgft.load(args.input)
    except (OSError, ValueError) as exc:
        return _usage_error(f"cannot read feature file: {exc}")
    if feats.ndim != 4:
        return _usage_error(f"schema error: feature file must have rank 4 [T,H,W,C], got rank {feats.ndim}")
    if feats.shape[0] < 2:
        return _usage_error("schema error: need at least 2 frames")
    try:
        sims = local_gram_flow(feats.astype(np.float64), args.window, args.direction)
        probs = temp_softmax(sims, args.temperature)
    except ValueError as exc:
        return _usage_error(str(exc))
    out = Path(args.out)
    save_field(out / "similarity", sims)
    save_field(out / "probability", probs)
    H = entropy(probs)
    n_valid = probs.valid.sum(axis=-1)
    _emit({"command": "lgf", "shape": list(sims.values.shape), "window": args.window,
           "direction": args.direction, "temperature": args.temperature,
           "valid_fraction": float(sims.valid.mean()),
           "entropy": {"mean": float(H.mean()), "min": float(H.min()), "max": float(H.max())},
           "max_entropy": {"mean": float(np.log(n_valid).mean())},
           "entropy_deficit_max": float(np.max(np.log(n_valid) - H)),
           "ok": True}, out)
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.k is not None:
            doc["k"] = args.k
        cfg = TrainConfig.from_dict(doc)
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError, TypeError, ValueError) as exc:
        return _usage_error(f"config error: {getattr(exc, 'message', exc)}")
    out = Path(args.out)
    if cfg.cache_dir is None:
        cfg.cache_dir = str(out / "cache")
    if not (Path(cfg.cache_dir) / "train").is_dir():
        build_cache(cfg)
    try:
        report = train_loop(cfg, out)
    except NonFiniteLossError as exc:
        _emit({"command": "train", "ok": False, "error": str(exc), "step": exc.step}, out, "report_summary.json")
        return EXIT_FAIL
    rows = report.rows
    finite = all(np.isfinite([r[c] for r in rows for c in ("L_diff", "L_feat", "L_total")]))
    doc = {"command": "train", "steps": cfg.steps, "seed": cfg.seed, "csv": str(out / "train.csv"),
           "checkpoint": str(out / "checkpoint"), **report.summary(), "ok": bool(finite)}
    if cfg.lam == 0:
        doc["flags"] = ["feature loss inactive"]
    _emit(doc, out, "report_summary.json")
    return EXIT_OK if finite else EXIT_FAIL


def cmd_cache(args) -> int:
    try:
        cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    except (OSError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        return _usage_error(f"config error: {getattr(exc, 'message', exc)}")
    path = build_cache(cfg, args.out)
    _emit({"command": "cache", "cache_dir": str(path), "train_clips": cfg.train_clips,
           "heldout_clips": cfg.heldout_clips, "ok": True})
    return EXIT_OK


def cmd_score(args) -> int:
    try:
        doc = json.loads(Path(args.scores).read_text())
        result = score_document(doc)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        return _usage_error(f"scores error: {exc}")
    _emit({"command": "score", **result, "ok": True}, Path(args.out) if args.out else None)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgf-distill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=SCOPES, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--out", type=Path)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("verify-fusion", help="check the feature-fusion cross-term identities")
    f.add_argument("--draws", type=int, default=1000)
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--dim", type=int, default=8)
    f.add_argument("--k", type=float)
    f.add_argument("--k-grid", help="comma-separated k values cycled over the draws")
    f.add_argument("--force-equal", action="store_true", help="use b = a in every draw")
    f.add_argument("--out", type=Path)
    f.set_defaults(func=cmd_verify_fusion)

    l = sub.add_parser("lgf", help="Local Gram Flow + temperature softmax of an LGFT feature file")
    l.add_argument("input", type=Path)
    l.add_argument("--window", type=int, default=7)
    l.add_argument("--direction", choices=DIRECTIONS, default="forward")
    l.add_argument("--temperature", type=float, default=0.1)
    l.add_argument("--out", type=Path, required=True)
    l.set_defaults(func=cmd_lgf)

    t = sub.add_parser("train", help="run the distillation training loop")
    t.add_argument("--config", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--k", type=float, help="override the fusion weight")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("cache", help="precompute teacher features for a config")
    c.add_argument("--config", type=Path)
    c.add_argument("--out", type=Path, required=True)
    c.set_defaults(func=cmd_cache)

    s = sub.add_parser("score", help="Motion Score / Extended Motion Score from sub-metrics")
    s.add_argument("scores", type=Path)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
