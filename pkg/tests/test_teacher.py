import numpy as np
import pytest

from lgf_distill.teacher import (SceneConfig, TeacherSpec, backward_memory, causal_memory, displacement,
                                 embed_matrix, frame_embed, gen_synthetic_video, memory_inputs,
                                 motion_embed, patchify, read_clip, remap, subject_alpha,
                                 teacher_features, write_clip)
from lgf_distill.tensor import RngStream


# --- scenes ----------------------------------------------------------------


@pytest.mark.parametrize("shape", ["disc", "bar"])
def test_static_scene_frames_identical(shape):
    video = gen_synthetic_video(SceneConfig(frames=6, shape=shape, velocity=(0, 0), link_lengths=(4, 3)))
    assert all(np.array_equal(video[0], f) for f in video)


def test_linear_disc_centres_arithmetic():
    alpha = subject_alpha(SceneConfig(frames=8, velocity=(1, 0), seed=3))
    xs = np.arange(alpha.shape[2])
    cx = np.array([(a.sum(0) * xs).sum() / a.sum() for a in alpha])
    np.testing.assert_allclose(np.diff(cx), 1.0, atol=1e-9)


def test_same_seed_same_video():
    cfg = SceneConfig(shape="bar", trajectory="sinusoidal", seed=5, link_lengths=(4, 3))
    assert gen_synthetic_video(cfg).tobytes() == gen_synthetic_video(cfg).tobytes()
    other = SceneConfig(shape="bar", trajectory="sinusoidal", seed=6, link_lengths=(4, 3))
    assert not np.array_equal(gen_synthetic_video(cfg), gen_synthetic_video(other))


def test_video_range_and_shape():
    video = gen_synthetic_video(SceneConfig(frames=5, height=16, width=24, radius=3, velocity=(1, 1)))
    assert video.shape == (5, 16, 24, 3)
    assert video.min() >= 0 and video.max() <= 1


def test_switch_turns_velocity_halfway():
    disp = displacement(SceneConfig(frames=8, trajectory="switch", velocity=(1.0, 0.5)))
    steps = np.diff(disp, axis=0)
    np.testing.assert_allclose(steps[:4], [[1.0, 0.5]] * 4)
    np.testing.assert_allclose(steps[4:], [[-0.5, 1.0]] * 3)


def test_subject_that_cannot_fit_is_rejected():
    with pytest.raises(ValueError, match="leave the frame"):
        gen_synthetic_video(SceneConfig(frames=13, velocity=(5, 0)))


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneConfig(shape="cube")
    with pytest.raises(ValueError):
        SceneConfig(frames=2)


# --- embeddings ------------------------------------------------------------


def test_identical_frames_identical_embeddings():
    frame = RngStream(1).uniform((1, 8, 8, 3))
    e = frame_embed(np.concatenate([frame, frame]), patch=4, channels=5, seed=2)
    assert np.array_equal(e[0], e[1])


def test_zero_frame_zero_embedding():
    assert np.all(frame_embed(np.zeros((1, 8, 8, 3)), 4, 6, seed=3) == 0)


def test_embedding_equals_explicit_matmul():
    frame = RngStream(4).uniform((1, 4, 4, 1))
    e = frame_embed(frame, patch=2, channels=3, seed=7)
    W = embed_matrix(4, 3, 7)
    for i in range(2):
        for j in range(2):
            patch = frame[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 0].reshape(-1)
            np.testing.assert_allclose(e[0, i, j], W @ patch, atol=1e-15)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((1, 6, 8, 1)), 4)


def test_motion_embed_is_signed_frame_difference():
    video = RngStream(5).uniform((3, 8, 8, 3))
    m = motion_embed(video, 4, 6, seed=1)
    assert np.all(m[0] == 0)
    np.testing.assert_allclose(m[2], frame_embed(video[2:3] - video[1:2], 4, 6, seed=2)[0], atol=1e-14)


# --- causal memory ---------------------------------------------------------


def test_memory_starts_at_first_embedding():
    e = RngStream(6).normal((4, 2, 2, 3))
    assert np.array_equal(causal_memory(e)[0], e[0])


def test_memory_fixed_point_for_constant_input():
    e = np.broadcast_to(RngStream(7).normal(3), (5, 2, 2, 3))
    np.testing.assert_allclose(causal_memory(e, 0.7), e, atol=1e-15)


def test_memory_hand_example():
    assert causal_memory(np.array([1.0, 3.0]), 0.5).tolist() == [1.0, 2.0]


def test_memory_is_causal():
    e = RngStream(8).normal((6, 3))
    e2 = e.copy()
    e2[4:] += 10.0
    np.testing.assert_array_equal(causal_memory(e, 0.7)[:4], causal_memory(e2, 0.7)[:4])


def test_backward_memory_hand_example():
    # reversed [5, 3, 1] -> EMA [5, 4, 2.5] -> remapped
    assert backward_memory(np.array([1.0, 3.0, 5.0]), 0.5).tolist() == [2.5, 4.0, 5.0]


def test_backward_memory_last_frame_is_its_input():
    video = RngStream(9).uniform((5, 8, 8, 3))
    bundle = teacher_features(video, embed_seed=3, channels=4)
    # reversed pass starts at frame N-1, where the motion term is zero
    np.testing.assert_allclose(bundle.bwd[-1], frame_embed(video, 4, 4, 3)[-1], atol=1e-15)


def test_palindromic_video_mirrors_streams():
    half = RngStream(10).uniform((3, 8, 8, 3))
    video = np.concatenate([half, half[-2::-1]])
    bundle = teacher_features(video, channels=4)
    assert np.array_equal(bundle.bwd, remap(bundle.fwd))


def test_memory_inputs_without_motion_is_frame_embed():
    video = RngStream(11).uniform((3, 8, 8, 3))
    assert np.array_equal(memory_inputs(video, 4, 5, 1, motion_gain=0.0), frame_embed(video, 4, 5, 1))


def test_rho_range():
    with pytest.raises(ValueError):
        causal_memory(np.ones(3), 1.0)


# --- cache -----------------------------------------------------------------


def test_clip_cache_roundtrip(tmp_path):
    scene = SceneConfig(frames=5, height=16, width=16, radius=3, seed=2)
    spec = TeacherSpec(channels=8)
    write_clip(tmp_path / "c", scene, spec)
    video, bundle, meta = read_clip(tmp_path / "c")
    expected = teacher_features(gen_synthetic_video(scene), spec.rho, spec.patch, 8, spec.embed_seed)
    assert np.array_equal(video, gen_synthetic_video(scene))
    assert np.array_equal(bundle.fwd, expected.fwd) and np.array_equal(bundle.bwd, expected.bwd)
    assert meta["channels"] == 8 and meta["scene"]["seed"] == 2


def test_missing_cache(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_clip(tmp_path / "nope")
