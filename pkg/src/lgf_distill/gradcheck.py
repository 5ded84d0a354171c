"""Central finite-difference checks of the hand-written backward passes.

Relative error of a target is ``max|analytic - numeric|`` divided by
``max(1, max|analytic|, max|numeric|)``: the worst element error against the
gradient's own scale, falling back to absolute error for gradients that
vanish (e.g. a bias feeding a single-channel GroupNorm group).
"""
from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import tensor as tn
from .lgf import (kl_feat_loss, local_gram_flow, local_gram_flow_backward, temp_softmax)
from .student import (DenoiserConfig, ProjectorConfig, denoiser_backward, denoiser_forward,
                      feature_loss, init_denoiser, init_projector, projector_backward,
                      projector_forward)
from .tensor import RngStream

H_STEP = 1e-5
SCOPES = ("primitives", "lgf", "projector", "end-to-end")
TOLERANCE = {"primitives": 1e-5, "lgf": 1e-5, "projector": 1e-5, "end-to-end": 1e-4}


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = H_STEP) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _merge(worst: dict, name: str, err: float) -> None:
    worst[name] = max(worst.get(name, 0.0), err)


# ---------------------------------------------------------------------------
# Suites: each returns {target: worst relative error over trials}
# ---------------------------------------------------------------------------


def check_primitives(seed: int = 0, trials: int = 20) -> dict[str, float]:
    worst: dict[str, float] = {}
    root = RngStream(seed)
    for trial in range(trials):
        rng = root.split(trial)
        T, H, W = (int(v) for v in rng.integers(1, 4, 3))
        T += 1
        cin, cout = (int(v) for v in rng.integers(1, 4, 2))

        # conv3d
        x = rng.normal((T, H, W, cin))
        k = rng.normal((3, 3, 1, cin, cout))
        b = rng.normal(cout)
        R = rng.normal((T, H, W, cout))
        f = lambda: float(np.sum(tn.conv3d(x, k, b) * R))
        dx, dk, db = tn.conv3d_backward(R, x, k)
        _merge(worst, "conv3d.input", rel_error(dx, numerical_grad(f, x)))
        _merge(worst, "conv3d.kernel", rel_error(dk, numerical_grad(f, k)))
        _merge(worst, "conv3d.bias", rel_error(db, numerical_grad(f, b)))

        # group_norm
        groups = 2
        xg = rng.normal((2, 2, 2, 4))
        gamma, beta = rng.normal(4), rng.normal(4)
        Rg = rng.normal(xg.shape)
        f = lambda: float(np.sum(tn.group_norm(xg, groups, gamma, beta) * Rg))
        _, cache = tn.group_norm(xg, groups, gamma, beta, return_cache=True)
        dx, dgam, dbet = tn.group_norm_backward(Rg, groups, gamma, cache)
        _merge(worst, "group_norm.input", rel_error(dx, numerical_grad(f, xg)))
        _merge(worst, "group_norm.gamma", rel_error(dgam, numerical_grad(f, gamma)))
        _merge(worst, "group_norm.beta", rel_error(dbet, numerical_grad(f, beta)))

        # silu
        xs = rng.normal((T, H, W, cin), 2.0)
        Rs = rng.normal(xs.shape)
        f = lambda: float(np.sum(tn.silu(xs) * Rs))
        _merge(worst, "silu", rel_error(tn.silu_backward(Rs, xs), numerical_grad(f, xs)))

        # linear
        xl = rng.normal((T, H, cin))
        Wl, bl = rng.normal((cout, cin)), rng.normal(cout)
        Rl = rng.normal((T, H, cout))
        f = lambda: float(np.sum(tn.linear(xl, Wl, bl) * Rl))
        dx, dW, db = tn.linear_backward(Rl, xl, Wl)
        _merge(worst, "linear.input", rel_error(dx, numerical_grad(f, xl)))
        _merge(worst, "linear.weight", rel_error(dW, numerical_grad(f, Wl)))
        _merge(worst, "linear.bias", rel_error(db, numerical_grad(f, bl)))

        # temporal interpolation
        factor = int(rng.integers(1, 5))
        xi = rng.normal((T, H, W, cin))
        Ri = rng.normal((factor * T - factor + 1, H, W, cin))
        f = lambda: float(np.sum(tn.interp_temporal(xi, factor) * Ri))
        _merge(worst, "interp_temporal",
               rel_error(tn.interp_temporal_backward(Ri, T, factor), numerical_grad(f, xi)))

        # spatial resample
        H2, W2 = (int(v) for v in rng.integers(1, 6, 2))
        xr = rng.normal((T, H, W, cin))
        Rr = rng.normal((T, H2, W2, cin))
        f = lambda: float(np.sum(tn.resample_spatial(xr, H2, W2) * Rr))
        _merge(worst, "resample_spatial",
               rel_error(tn.resample_spatial_backward(Rr, H, W), numerical_grad(f, xr)))
    return worst


def _random_field_pair(rng: RngStream, window: int, shape=(3, 3, 3, 4)):
    """Teacher probabilities and student features for one LGF/KL instance."""
    teacher = local_gram_flow(rng.normal(shape, 0.5), window)
    P = temp_softmax(teacher, 0.1)
    return P, rng.normal(shape, 0.5)


def check_lgf(seed: int = 0, trials: int = 20, temperature: float = 0.1) -> dict[str, float]:
    worst: dict[str, float] = {}
    root = RngStream(seed)
    for trial in range(trials):
        rng = root.split(trial)
        window = (3, 5)[trial % 2]
        P, feats = _random_field_pair(rng, window)
        # KL w.r.t. student similarity logits
        S = local_gram_flow(feats, window)
        logits = S.values

        def f_logits():
            return kl_feat_loss(P, S, temperature)[0]

        _, g = kl_feat_loss(P, S, temperature)
        num = numerical_grad(f_logits, logits)
        num[~S.valid] = 0.0
        _merge(worst, "kl_feat_loss.logits", rel_error(g, num))

        # LGF backward w.r.t. features
        R = rng.normal(S.values.shape)
        direction = ("forward", "backward-pair")[trial % 2]
        f = lambda: float(np.sum(local_gram_flow(feats, window, direction).values * R * S.valid))
        an = local_gram_flow_backward(R * S.valid, feats, window, direction)
        _merge(worst, "local_gram_flow.features", rel_error(an, numerical_grad(f, feats)))

        # composed: features -> LGF -> softmax -> KL
        def f_feat():
            return kl_feat_loss(P, local_gram_flow(feats, window), temperature)[0]

        _, g = kl_feat_loss(P, local_gram_flow(feats, window), temperature)
        an = local_gram_flow_backward(g, feats, window)
        _merge(worst, "L_feat.features", rel_error(an, numerical_grad(f_feat, feats)))
    return worst


def check_projector(seed: int = 0, trials: int = 3, widths=(16, 12, 8, 8)) -> dict[str, float]:
    """Gradient of ``sum(F_hat)`` (and a random projection of it) w.r.t. every projector input."""
    worst: dict[str, float] = {}
    root = RngStream(seed)
    cfg = ProjectorConfig(widths=tuple(widths))
    for trial in range(trials):
        rng = root.split(trial)
        params = init_projector(cfg, rng)
        for name in params:
            if name.endswith(("gamma", "beta", "bias", ".b")):
                params[name] = params[name] + rng.normal(params[name].shape, 0.3)
        F = rng.normal((2, 2, 2, widths[0]))
        grid = (5, 3, 3)
        out, cache = projector_forward(F, params, cfg, grid)
        R = np.ones_like(out) if trial == 0 else rng.normal(out.shape)
        f = lambda: float(np.sum(projector_forward(F, params, cfg, grid)[0] * R))
        dF, grads = projector_backward(R, params, cfg, cache)
        _merge(worst, "projector.F_diff", rel_error(dF, numerical_grad(f, F)))
        for name in sorted(params):
            _merge(worst, name, rel_error(grads[name], numerical_grad(f, params[name])))
    return worst


def check_end_to_end(seed: int = 0, trials: int = 3, temperature: float = 0.1) -> dict[str, float]:
    """``L_feat`` through projector + LGF + softmax + KL, and the denoiser v-loss."""
    worst: dict[str, float] = {}
    root = RngStream(seed)
    pcfg = ProjectorConfig(widths=(8, 8, 8, 8))
    dcfg = DenoiserConfig(channels=4, hidden=8, rank=2, alpha_lora=1.0)
    window = 3
    for trial in range(trials):
        rng = root.split(trial)
        params = init_projector(pcfg, rng)
        F = rng.normal((2, 3, 3, 8))
        teacher = temp_softmax(local_gram_flow(rng.normal((5, 3, 3, 6), 0.5), window), temperature)

        f = lambda: feature_loss(F, params, pcfg, teacher, temperature, window, need_grad=False)[0]
        _, dF, grads = feature_loss(F, params, pcfg, teacher, temperature, window)
        _merge(worst, "L_feat.F_diff", rel_error(dF, numerical_grad(f, F)))
        for name in ("proj.conv.kernel", "proj.mlp0.W", "proj.mlp2.W"):
            _merge(worst, f"L_feat.{name}", rel_error(grads[name], numerical_grad(f, params[name])))

        # denoiser: mean ||v_hat - v||^2 w.r.t. every parameter group
        dparams = init_denoiser(dcfg, rng)
        for name in ("den.lora1.B", "den.lora2.B"):
            dparams[name] = rng.normal(dparams[name].shape, 0.3)
        z_t = rng.normal((2, 4, 4, 4))
        v = rng.normal(z_t.shape)
        t = 0.37

        def f_den():
            v_hat = denoiser_forward(z_t, t, dparams, dcfg)[0]
            return float(np.mean((v_hat - v) ** 2))

        v_hat, _, cache = denoiser_forward(z_t, t, dparams, dcfg)
        dgrads = denoiser_backward(2 * (v_hat - v) / v.size, None, dparams, dcfg, cache)
        for name in sorted(dparams):
            _merge(worst, f"L_diff.{name}", rel_error(dgrads[name], numerical_grad(f_den, dparams[name])))

        # joint objective: L_feat reaches the LoRA factors through the F_diff tap
        lam = 0.5
        z5 = rng.normal((2, 3, 3, 4))
        v5 = rng.normal(z5.shape)

        def f_total():
            v_hat, F_diff, _ = denoiser_forward(z5, t, dparams, dcfg)
            L_feat = feature_loss(F_diff, params, pcfg, teacher, temperature, window, need_grad=False)[0]
            return float(np.mean((v_hat - v5) ** 2)) + lam * L_feat

        v_hat, F_diff, cache = denoiser_forward(z5, t, dparams, dcfg)
        _, dF, _ = feature_loss(F_diff, params, pcfg, teacher, temperature, window)
        jgrads = denoiser_backward(2 * (v_hat - v5) / v5.size, lam * dF, dparams, dcfg, cache)
        for name in ("den.lora1.A", "den.lora1.B", "den.lora2.A", "den.lora2.B"):
            _merge(worst, f"L_total.{name}", rel_error(jgrads[name], numerical_grad(f_total, dparams[name])))
    return worst


def run_scope(scope: str, seed: int = 0, trials: int = 20) -> dict[str, float]:
    if scope == "primitives":
        return check_primitives(seed, trials)
    if scope == "lgf":
        return check_lgf(seed, trials)
    if scope == "projector":
        return check_projector(seed, max(1, min(trials, 3)))
    if scope == "end-to-end":
        return check_end_to_end(seed, max(1, min(trials, 3)))
    raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
