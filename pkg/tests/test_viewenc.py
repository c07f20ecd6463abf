"""Encoder forward/backward passes against finite-difference oracles.

Every analytic gradient is held against central differences computed
here with no knowledge of the backward pass's structure; the training
convergence target comes from an explicit least-squares solve.
"""

import json
import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from psf4d import (
    CameraPose,
    DivergenceError,
    FormatError,
    ParameterError,
    ShapeError,
    ViewEncoder,
    ViewPositionEncoder,
    combined_embedding,
    diffusion_loss,
    diffusion_loss_grad,
    encode_view,
    encode_views,
    grad_output_sum,
    load_encoder,
    new_encoder,
    save_encoder,
    time_embedding,
    train_encoder_toy,
    zero_encoder,
)


def central_difference(f, value, h=1e-5):
    return (f(value + h) - f(value - h)) / (2.0 * h)


def relative_gap(analytic, numeric):
    return np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8))


# ---------------------------------------------------------------------------
# poses


def test_rigid_pose_has_the_canonical_bottom_row():
    angle = 0.7
    rot = np.array(
        [
            [math.cos(angle), -math.sin(angle), 0.0],
            [math.sin(angle), math.cos(angle), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    pose = CameraPose.from_rotation_translation(rot, [1.0, -2.0, 0.5])
    np.testing.assert_allclose(pose.matrix[3], [0, 0, 0, 1], atol=1e-9)
    np.testing.assert_allclose(pose.matrix[:3, :3], rot)


def test_non_orthonormal_rotation_is_rejected():
    with pytest.raises(ParameterError):
        CameraPose.from_rotation_translation(np.eye(3) * 2.0, np.zeros(3))
    reflection = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ParameterError):
        CameraPose.from_rotation_translation(reflection, np.zeros(3))


def test_pose_requires_sixteen_finite_values():
    with pytest.raises(ShapeError):
        CameraPose(np.zeros(15))
    with pytest.raises(ParameterError):
        CameraPose(np.full(16, math.nan))


# ---------------------------------------------------------------------------
# forward pass


def test_zero_encoder_emits_zero():
    pose = CameraPose.identity()
    out = encode_view(zero_encoder(), pose)
    np.testing.assert_array_equal(out, np.zeros(64))


def test_distinct_poses_get_distinct_embeddings():
    encoder = new_encoder(seed=5)
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    a = encode_view(encoder, CameraPose.identity())
    b = encode_view(encoder, CameraPose.from_rotation_translation(rot, np.zeros(3)))
    assert float(np.max(np.abs(a - b))) > 1e-3


def test_batched_encoding_matches_single_calls():
    encoder = new_encoder(seed=6)
    rng = np.random.default_rng(6)
    poses = rng.standard_normal((5, 16))
    batch = encode_views(encoder, poses)
    # matrix-matrix and matrix-vector products sum in different orders,
    # so agreement is to rounding, not bitwise
    for row, pose in zip(batch, poses):
        np.testing.assert_allclose(row, encode_view(encoder, pose), atol=1e-13)


def test_encoder_width_mismatches_are_rejected():
    with pytest.raises(ShapeError):
        ViewEncoder(np.zeros((8, 4)), np.zeros(4), np.zeros((4, 6)), np.zeros(6))
    with pytest.raises(ShapeError):
        ViewEncoder(np.zeros((16, 4)), np.zeros(5), np.zeros((4, 6)), np.zeros(6))
    with pytest.raises(ShapeError):
        ViewEncoder(np.zeros((16, 4)), np.zeros(4), np.zeros((4, 6)), np.zeros(7))
    with pytest.raises(ParameterError):
        ViewEncoder(
            np.zeros((16, 4)), np.zeros(4), np.zeros((4, 6)), np.zeros(6),
            activation="relu",
        )


def test_initialization_is_reproducible_and_fan_in_bounded():
    a = new_encoder(seed=9)
    b = new_encoder(seed=9)
    np.testing.assert_array_equal(a.w1, b.w1)
    np.testing.assert_array_equal(a.b2, b.b2)
    assert float(np.max(np.abs(a.w1))) <= 1.0 / math.sqrt(16)
    assert float(np.max(np.abs(a.w2))) <= 1.0 / math.sqrt(64)
    c = new_encoder(seed=10)
    assert float(np.max(np.abs(a.w1 - c.w1))) > 0


# ---------------------------------------------------------------------------
# gradients against finite differences


@pytest.mark.parametrize("activation", ["silu", "identity"])
def test_output_sum_gradient_matches_finite_differences(activation):
    encoder = new_encoder(seed=11, activation=activation)
    rng = np.random.default_rng(11)
    pose = rng.standard_normal(16)
    grads = grad_output_sum(encoder, pose)
    assert set(grads) == {"w1", "b1", "w2", "b2"}
    for name in ("w1", "b1", "w2", "b2"):
        param = getattr(encoder, name)
        numeric = np.empty_like(param)
        for idx in np.ndindex(param.shape):
            def f(value, idx=idx, name=name):
                probe = encoder.copy()
                getattr(probe, name)[idx] = value
                return float(np.sum(encode_view(probe, pose)))

            numeric[idx] = central_difference(f, param[idx])
        assert relative_gap(grads[name], numeric) <= 1e-4


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    pred = rng.standard_normal((3, 8))
    target = rng.standard_normal((3, 8))
    analytic = diffusion_loss_grad(pred, target)
    np.testing.assert_allclose(analytic, 2.0 * (pred - target) / pred.size)
    numeric = np.empty_like(pred)
    for idx in np.ndindex(pred.shape):
        def f(value, idx=idx):
            probe = pred.copy()
            probe[idx] = value
            return diffusion_loss(probe, target)

        numeric[idx] = central_difference(f, pred[idx])
    assert relative_gap(analytic, numeric) <= 1e-6


# ---------------------------------------------------------------------------
# loss


def test_loss_is_zero_only_on_equality():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((4, 4))
    assert diffusion_loss(x, x) == 0.0
    assert diffusion_loss(x, x + 1e-3) > 0.0


def test_loss_of_ones_against_zeros_is_one():
    assert diffusion_loss(np.ones((5, 7)), np.zeros((5, 7))) == 1.0


def test_loss_shape_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        diffusion_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        diffusion_loss(np.zeros((0,)), np.zeros((0,)))


# ---------------------------------------------------------------------------
# time embedding and conditioning


def test_time_embedding_is_bounded_and_deterministic():
    emb = time_embedding(500, 64)
    assert emb.shape == (64,)
    assert float(np.max(np.abs(emb))) <= 1.0
    np.testing.assert_array_equal(emb, time_embedding(500, 64))
    assert float(np.max(np.abs(emb - time_embedding(501, 64)))) > 0


def test_time_embedding_slots_pair_sin_with_cos():
    emb = time_embedding(0, 16)
    np.testing.assert_array_equal(emb[0::2], np.zeros(8))
    np.testing.assert_array_equal(emb[1::2], np.ones(8))
    emb = time_embedding(7, 16)
    half = 8
    freqs = 1e4 ** (-np.arange(half) / half)
    np.testing.assert_allclose(emb[0::2], np.sin(7 * freqs))
    np.testing.assert_allclose(emb[1::2], np.cos(7 * freqs))


def test_time_embedding_width_must_be_even_and_positive():
    with pytest.raises(ParameterError):
        time_embedding(5, 63)
    with pytest.raises(ParameterError):
        time_embedding(5, 0)


def test_zero_encoder_conditioning_is_the_time_embedding_alone():
    out = combined_embedding(zero_encoder(), CameraPose.identity(), 500)
    np.testing.assert_array_equal(out, time_embedding(500, 64))


def test_conditioning_difference_is_the_view_encoding_difference():
    encoder = new_encoder(seed=14)
    rng = np.random.default_rng(14)
    pose_a, pose_b = rng.standard_normal(16), rng.standard_normal(16)
    diff = combined_embedding(encoder, pose_a, 333) - combined_embedding(
        encoder, pose_b, 333
    )
    np.testing.assert_allclose(
        diff, encode_view(encoder, pose_a) - encode_view(encoder, pose_b), atol=1e-15
    )


def test_conditioning_width_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        combined_embedding(zero_encoder(), CameraPose.identity(), 500, width=32)


# ---------------------------------------------------------------------------
# toy training


def make_affine_task(seed=0, n=32):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 16))
    slope = rng.standard_normal((16, 64)) * 0.3
    intercept = rng.standard_normal(64) * 0.1
    return x, x @ slope + intercept


def test_zero_learning_rate_changes_nothing():
    x, targets = make_affine_task()
    encoder = new_encoder(seed=15)
    trained, losses = train_encoder_toy(encoder, x, targets, steps=10, lr=0.0)
    np.testing.assert_array_equal(trained.w1, encoder.w1)
    np.testing.assert_array_equal(trained.b2, encoder.b2)
    assert len(losses) == 11
    assert len(set(losses)) == 1


def test_affine_targets_are_driven_below_the_least_squares_floor():
    x, targets = make_affine_task()
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, targets, rcond=None)
    floor = float(np.mean((design @ coef - targets) ** 2))
    assert floor <= 1e-12  # targets built to be exactly realizable
    encoder = new_encoder(seed=15, activation="identity")
    trained, losses = train_encoder_toy(encoder, x, targets, steps=5000, lr=1.0)
    assert losses[-1] <= 1e-6
    assert losses[-1] <= floor + 1e-6


def test_loss_sequence_is_monotone_for_small_learning_rates():
    x, targets = make_affine_task(seed=1)
    encoder = new_encoder(seed=16)
    _, losses = train_encoder_toy(encoder, x, targets, steps=500, lr=0.5)
    assert all(a >= b - 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_divergence_is_reported_with_its_step_index():
    x, targets = make_affine_task(seed=2)
    encoder = new_encoder(seed=17)
    with pytest.raises(DivergenceError, match="step"):
        train_encoder_toy(encoder, x, targets, steps=200, lr=100.0)


def test_training_inputs_are_validated():
    encoder = new_encoder(seed=18)
    with pytest.raises(ShapeError):
        train_encoder_toy(encoder, np.zeros((0, 16)), np.zeros((0, 64)), 5, 0.1)
    with pytest.raises(ShapeError):
        train_encoder_toy(encoder, np.zeros((4, 16)), np.zeros((4, 32)), 5, 0.1)
    with pytest.raises(ParameterError):
        train_encoder_toy(encoder, np.zeros((4, 16)), np.zeros((4, 64)), 5, -0.1)


def test_training_does_not_mutate_the_input_encoder():
    x, targets = make_affine_task(seed=3)
    encoder = new_encoder(seed=19)
    before = encoder.w1.copy()
    train_encoder_toy(encoder, x, targets, steps=50, lr=0.5)
    np.testing.assert_array_equal(encoder.w1, before)


# ---------------------------------------------------------------------------
# properties


def test_encoding_is_lipschitz_with_the_layer_norm_product_bound():
    encoder = new_encoder(seed=20)
    slope_bound = 1.1
    bound = (
        np.linalg.norm(encoder.w2.T, 2) * np.linalg.norm(encoder.w1.T, 2) * slope_bound
    )
    rng = np.random.default_rng(20)
    for _ in range(50):
        a, b = rng.standard_normal(16), rng.standard_normal(16)
        gap = np.linalg.norm(encode_view(encoder, a) - encode_view(encoder, b))
        assert gap <= bound * np.linalg.norm(a - b) * (1 + 1e-12)


# ---------------------------------------------------------------------------
# serialization


def test_encoder_round_trips_through_the_tensor_format(tmp_path):
    encoder = new_encoder(seed=21)
    prefix = tmp_path / "enc"
    save_encoder(encoder, prefix)
    loaded = load_encoder(prefix)
    for name in ("w1", "b1", "w2", "b2"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(encoder, name))
    assert loaded.activation == encoder.activation
    assert loaded.init_seed == 21


def test_tampered_manifest_widths_are_detected(tmp_path):
    encoder = new_encoder(seed=22)
    prefix = tmp_path / "enc"
    save_encoder(encoder, prefix)
    manifest_path = tmp_path / "enc.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["hidden_width"] = 65
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_encoder(prefix)


def test_manifest_missing_key_is_a_format_error(tmp_path):
    encoder = new_encoder(seed=23)
    prefix = tmp_path / "enc"
    save_encoder(encoder, prefix)
    manifest_path = tmp_path / "enc.json"
    manifest = json.loads(manifest_path.read_text())
    del manifest["activation"]
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(FormatError):
        load_encoder(prefix)


# ---------------------------------------------------------------------------
# estimator facade


def test_estimator_fits_and_transforms():
    x, targets = make_affine_task(seed=4)
    est = ViewPositionEncoder(steps=500, lr=0.5, seed=7)
    assert est.fit(x, targets) is est
    assert est.losses_[-1] < est.losses_[0]
    out = est.transform(x)
    np.testing.assert_array_equal(out, encode_views(est.encoder_, x))


def test_estimator_is_cloneable_and_reproducible():
    x, targets = make_affine_task(seed=5)
    est = ViewPositionEncoder(steps=100, lr=0.5, seed=8)
    est.fit(x, targets)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    twin.fit(x, targets)
    np.testing.assert_array_equal(twin.encoder_.w1, est.encoder_.w1)


def test_estimator_requires_fit_before_transform():
    with pytest.raises(NotFittedError):
        ViewPositionEncoder().transform(np.zeros((2, 16)))
