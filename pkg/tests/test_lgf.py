import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgf_distill.gradcheck import numerical_grad, rel_error
from lgf_distill.lgf import (FusionIdentityError, ProbField, SimilarityField, entropy, fuse_feature_space,
                             fuse_lgf, fusion_gap, kl_feat_loss, load_field, local_gram_flow,
                             local_gram_flow_backward, save_field, temp_softmax, window_offsets)
from lgf_distill.oracles import lgf_bruteforce, softmax_reference
from lgf_distill.tensor import RngStream

FIXTURE = np.array([[[1.0], [2.0]], [[3.0], [4.0]],
                    [[5.0], [6.0]], [[7.0], [8.0]]]).reshape(2, 2, 2, 1)


def test_window_offsets_row_major():
    assert window_offsets(3) == [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
    with pytest.raises(ValueError):
        window_offsets(4)


def test_fixture_token_000():
    S = local_gram_flow(FIXTURE, 3)
    assert S.values.shape == (1, 2, 2, 9)
    v, m = S.values[0, 0, 0], S.valid[0, 0, 0]
    # in-bounds offsets (0,0),(0,1),(1,0),(1,1) -> slots 4,5,7,8
    assert m.nonzero()[0].tolist() == [4, 5, 7, 8]
    assert v[[4, 5, 7, 8]].tolist() == [5.0, 6.0, 7.0, 8.0]
    assert np.all(v[~m] == 0)


def test_fixture_matches_oracle():
    S = local_gram_flow(FIXTURE, 3)
    values, valid = lgf_bruteforce(FIXTURE, 3)
    assert np.array_equal(S.values, values) and np.array_equal(S.valid, valid)


def test_constant_field():
    u = np.array([0.5, -1.0, 2.0])
    feats = np.broadcast_to(u, (3, 4, 4, 3)).copy()
    S = local_gram_flow(feats, 5)
    assert np.all(S.values[S.valid] == u @ u)


@settings(max_examples=25, deadline=None)
@given(T=st.integers(2, 4), H=st.integers(1, 6), W=st.integers(1, 6), C=st.integers(1, 8),
       window=st.sampled_from([1, 3, 5, 7]), direction=st.sampled_from(["forward", "backward-pair"]),
       seed=st.integers(0, 2**31))
def test_matches_bruteforce_bitwise(T, H, W, C, window, direction, seed):
    feats = RngStream(seed).normal((T, H, W, C))
    S = local_gram_flow(feats, window, direction)
    values, valid = lgf_bruteforce(feats, window, direction)
    assert np.array_equal(S.valid, valid)
    assert S.values.tobytes() == values.tobytes()


def test_backward_pair_equals_reversed_forward():
    feats = RngStream(11).normal((3, 4, 4, 3))
    bwd, _ = lgf_bruteforce(feats, 3, "backward-pair")
    rev, _ = lgf_bruteforce(feats[::-1].copy(), 3, "forward")
    # pair (t+1 -> t) of the clip is pair index T-2-t of the reversed clip
    assert np.array_equal(bwd, rev[::-1])
    assert np.array_equal(local_gram_flow(feats, 3, "backward-pair").values, bwd)


def test_lgf_rejects_short_clip_and_bad_direction():
    with pytest.raises(ValueError):
        local_gram_flow(np.ones((1, 2, 2, 1)), 3)
    with pytest.raises(ValueError):
        local_gram_flow(np.ones((2, 2, 2, 1)), 3, "sideways")


def test_lgf_backward_gradient():
    rng = RngStream(12)
    feats = rng.normal((3, 3, 4, 2))
    S = local_gram_flow(feats, 3)
    R = rng.normal(S.values.shape) * S.valid
    f = lambda: float(np.sum(local_gram_flow(feats, 3).values * R))
    assert rel_error(local_gram_flow_backward(R, feats, 3), numerical_grad(f, feats)) < 1e-8


# --- softmax ---------------------------------------------------------------


def _field(logits, valid=None):
    logits = np.asarray(logits, dtype=float).reshape(1, 1, 1, -1)
    valid = np.ones_like(logits, bool) if valid is None else np.asarray(valid).reshape(logits.shape)
    return SimilarityField(logits, valid, window=1)


def test_softmax_fixture():
    p = temp_softmax(_field([1.0, 0.9]), 0.1).probs.ravel()
    e = math.exp(-1)
    assert abs(p[0] - 1 / (1 + e)) < 1e-15 and abs(p[1] - e / (1 + e)) < 1e-15
    np.testing.assert_allclose(p, [0.731059, 0.268941], atol=1e-6)
    np.testing.assert_allclose(p, softmax_reference([1.0, 0.9], 0.1), atol=1e-15)


def test_softmax_masks_and_uniform():
    pf = temp_softmax(_field([3.0, 3.0, 99.0, 3.0], [True, True, False, True]), 0.1)
    np.testing.assert_allclose(pf.probs.ravel(), [1 / 3, 1 / 3, 0, 1 / 3], atol=1e-15)


def test_softmax_high_temperature_is_uniform():
    logits = RngStream(13).normal(9, 5.0)
    np.testing.assert_allclose(temp_softmax(_field(logits), 1e6).probs.ravel(), 1 / 9, atol=1e-6)


def test_softmax_survives_large_logits():
    p = temp_softmax(_field([1e4, 0.0]), 0.01).probs.ravel()
    assert np.all(np.isfinite(p)) and p[0] == 1.0


def test_softmax_sums_to_one_on_real_field():
    S = local_gram_flow(RngStream(14).normal((3, 5, 5, 4)), 7)
    pf = temp_softmax(S, 0.1)
    assert np.max(np.abs(pf.probs.sum(-1) - 1)) < 1e-9
    assert np.all(pf.probs[~pf.valid] == 0)


def test_entropy_of_constant_field_is_log_valid_count():
    S = local_gram_flow(np.ones((2, 4, 4, 2)), 3)
    pf = temp_softmax(S, 0.1)
    np.testing.assert_allclose(entropy(pf), np.log(S.valid.sum(-1)), atol=1e-12)


# --- KL --------------------------------------------------------------------


def test_kl_identity():
    S = local_gram_flow(RngStream(15).normal((3, 4, 4, 3)), 3)
    P = temp_softmax(S, 0.1)
    loss, grad = kl_feat_loss(P, S, 0.1)
    assert abs(loss) < 1e-12 and np.max(np.abs(grad)) < 1e-12


def test_kl_closed_form():
    P = ProbField(np.array([0.75, 0.25]).reshape(1, 1, 1, 2), np.ones((1, 1, 1, 2), bool), 0.1, window=1)
    loss, _ = kl_feat_loss(P, _field([0.0, 0.0]), 0.1)
    assert abs(loss - (0.75 * math.log(1.5) + 0.25 * math.log(0.5))) < 1e-15
    assert abs(loss - 0.130812) < 1e-6


def test_kl_gradient_finite_difference():
    rng = RngStream(16)
    P = temp_softmax(local_gram_flow(rng.normal((2, 3, 3, 2)), 3), 0.1)
    S = local_gram_flow(rng.normal((2, 3, 3, 2)), 3)
    _, grad = kl_feat_loss(P, S, 0.1)
    num = numerical_grad(lambda: kl_feat_loss(P, S, 0.1)[0], S.values)
    num[~S.valid] = 0
    assert rel_error(grad, num) < 1e-6


def test_kl_rejects_mismatched_fields():
    rng = RngStream(17)
    P = temp_softmax(local_gram_flow(rng.normal((2, 3, 3, 2)), 3), 0.1)
    with pytest.raises(ValueError, match="window"):
        kl_feat_loss(P, SimilarityField(P.probs.copy(), P.valid.copy(), 5), 0.1)
    with pytest.raises(ValueError, match="shape"):
        kl_feat_loss(P, local_gram_flow(rng.normal((3, 3, 3, 2)), 3), 0.1)
    bad = ProbField(np.where(P.valid, P.probs, 0.1), P.valid, 0.1, 3)
    with pytest.raises(ValueError, match="invalid"):
        kl_feat_loss(bad, local_gram_flow(rng.normal((2, 3, 3, 2)), 3), 0.1)


# --- fusion ----------------------------------------------------------------


def _pair(seed, shape=(3, 4, 4, 3)):
    rng = RngStream(seed)
    return local_gram_flow(rng.normal(shape), 3), local_gram_flow(rng.normal(shape), 3)


def test_fuse_lgf_boundaries_and_mix():
    Sf, Sb = _pair(18)
    assert np.array_equal(fuse_lgf(Sf, Sb, 1.0).values, Sf.values)
    assert np.array_equal(fuse_lgf(Sf, Sb, 0.0).values, Sb.values)
    np.testing.assert_allclose(fuse_lgf(Sf, Sb, 0.3).values, 0.3 * Sf.values + 0.7 * Sb.values, atol=1e-15)
    with pytest.raises(ValueError):
        fuse_lgf(Sf, Sb, 1.5)


def test_fuse_feature_space():
    rng = RngStream(19)
    Ff, Fb = rng.normal((3, 2, 2, 4)), rng.normal((3, 2, 2, 4))
    assert np.array_equal(fuse_feature_space(Ff, Fb, 1.0), Ff)
    assert np.all(fuse_feature_space(Ff, -Ff, 0.5) == 0)
    np.testing.assert_allclose(fuse_feature_space(Ff, Fb, 0.25), 0.25 * Ff + 0.75 * Fb, atol=1e-15)


def test_fusion_gap_worked_example():
    g_feat, g_lgf, gap = fusion_gap([1, 0], [0, 1], [2, 1], [1, 3], 0.5)
    assert (g_lgf, g_feat, gap) == (2.5, 1.75, -0.75)


@pytest.mark.parametrize("k", [0.0, 1.0])
def test_fusion_gap_zero_at_k_boundary(k):
    rng = RngStream(20)
    a, b, c, d = (rng.normal(6) for _ in range(4))
    assert fusion_gap(a, b, c, d, k)[2] == 0.0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.floats(0, 1))
def test_fusion_gap_equal_directions(seed, k):
    rng = RngStream(seed)
    a, c, d = (rng.normal(8) for _ in range(3))
    # exact zero in real arithmetic; fp64 leaves only rounding residue
    assert abs(fusion_gap(a, a.copy(), c, d, k)[2]) < 1e-12


def test_fusion_gap_check_is_enforced():
    # a zero tolerance cannot be met, so the identity check must fire
    with pytest.raises(FusionIdentityError):
        fusion_gap([1, 0], [0, 1], [2, 1], [1, 3], 0.5, tol=0.0)


# --- serialization ---------------------------------------------------------


def test_field_roundtrip(tmp_path):
    S = local_gram_flow(RngStream(21).normal((3, 3, 3, 2)), 3, "backward-pair")
    P = temp_softmax(S, 0.2)
    save_field(tmp_path / "s", S)
    save_field(tmp_path / "p", P)
    S2, P2 = load_field(tmp_path / "s"), load_field(tmp_path / "p")
    assert np.array_equal(S2.values, S.values) and np.array_equal(S2.valid, S.valid)
    assert S2.direction == "backward-pair" and S2.window == 3
    assert np.array_equal(P2.probs, P.probs) and P2.temperature == 0.2
