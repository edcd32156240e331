import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pose6d.geometry import Pose5D, Quaternion
from pose6d.net import layers
from pose6d.net.checkpoint import load_checkpoint, save_checkpoint
from pose6d.net.gradcheck import numeric_grad, relative_error, run_gradcheck, tiny_spec
from pose6d.net.model import (
    VARIANTS,
    ArchitectureSpec,
    LossWeights,
    build_architecture,
    feature_shapes,
    head_forward,
    loss,
    loss_and_grads,
    masked_multiblock_loss,
    pose_head_forward,
    pose_loss,
)
from pose6d.net.optim import DivergenceError, adam_step
from pose6d.net.train import SampleArrays, TrainConfig, augment_batch, train, write_curves_csv


# layers

def test_conv_constant_field():
    x = np.ones((1, 5, 5, 1))
    w = np.ones((3, 3, 1, 1))
    out, _ = layers.conv2d_forward(x, w, np.array([0.5]), stride=2, activation="none")
    assert out.shape == (1, 2, 2, 1)
    assert np.all(out == 9.5)


def test_conv_impulse_kernel_samples_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 9, 9, 3))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[0, 0, c, c] = 1.0
    out, _ = layers.conv2d_forward(x, w, np.zeros(3), stride=2, activation="none")
    assert np.array_equal(out, x[:, 0:7:2, 0:7:2, :])


def test_conv_relu_and_shape_errors():
    x = -np.ones((1, 4, 4, 1))
    out, cache = layers.conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1), 1, "relu")
    assert np.all(out == 0)
    dx, dw, db = layers.conv2d_backward(np.ones_like(out), cache)
    assert not dx.any() and not dw.any() and not db.any()
    with pytest.raises(ValueError):
        layers.conv2d_forward(np.ones((1, 4, 4, 2)), np.ones((3, 3, 1, 1)), np.zeros(1), 1)
    with pytest.raises(ValueError):
        layers.conv2d_forward(np.ones((1, 2, 2, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), 1)


@pytest.mark.parametrize("size,stride", [(80, 2), (81, 2), (64, 4), (15, 8), (3, 2)])
def test_conv_output_size_matches_forward(size, stride):
    x = np.zeros((1, size, size, 1))
    out, _ = layers.conv2d_forward(x, np.zeros((3, 3, 1, 1)), np.zeros(1), stride)
    assert out.shape[1] == layers.conv_output_size(size, stride) == (size - 3) // stride + 1


def test_stride2_chain_from_80():
    sizes = [80]
    for _ in range(3):
        sizes.append(layers.conv_output_size(sizes[-1], 2))
    assert sizes == [80, 39, 19, 9]


def test_zero_output_gradient_gives_zero_parameter_gradients():
    params = build_architecture(tiny_spec("conv3_s2"), (31, 31, 2), seed=1, dtype=np.float64)
    from pose6d.net.model import backward, forward

    raw, caches = forward(params, np.random.default_rng(0).normal(size=(2, 31, 31, 2)))
    grads, dx = backward(params, caches, np.zeros_like(raw), need_input_grad=True)
    assert all(not g.any() for g in grads.values())
    assert not dx.any()


def test_l2_normalize_rejects_degenerate():
    with pytest.raises(FloatingPointError):
        layers.l2_normalize_forward(np.zeros((1, 4)))
    with pytest.raises(FloatingPointError, match="degenerate head output"):
        head_forward(np.zeros((1, 6)), 1)


def test_gradcheck_all_components():
    results = run_gradcheck()
    worst = max(results.values())
    assert worst <= 1e-4, {k: v for k, v in results.items() if v > 1e-4}


# head and losses

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_head_quaternions_unit_norm(seed, blocks):
    raw = np.random.default_rng(seed).normal(size=(4, 6 * blocks)).astype(np.float32)
    pred, _ = head_forward(raw, blocks)
    assert np.allclose(np.linalg.norm(pred[..., 2:], axis=-1), 1.0, atol=1e-6)


def test_pose_head_block_counts():
    x = np.random.default_rng(0).normal(size=(2, 31, 31, 2))
    multi = build_architecture(tiny_spec("conv3_s2", "multi_block", 5), (31, 31, 2), dtype=np.float64)
    assert multi.spec.output_width == 30
    preds = pose_head_forward(x, multi)
    assert len(preds) == 2 and all(len(p) == 5 for p in preds)
    single = build_architecture(tiny_spec("conv3_s2"), (31, 31, 2), dtype=np.float64)
    assert [len(p) for p in pose_head_forward(x, single)] == [1, 1]


def test_loss_examples():
    q = Quaternion.identity()
    p = Pose5D(0.1, -0.2, q)
    assert loss(p, p)[0] == 0.0
    # quaternion difference of squared norm 1: (1,0,0,0) vs (0.5, 0.5, 0.5, 0.5)
    target = Pose5D(0.1, -0.2, Quaternion(0.5, 0.5, 0.5, 0.5))
    value, _ = loss(p, target, LossWeights(0.7))
    assert value == pytest.approx(0.3, abs=1e-15)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    pred, target = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    _, g = pose_loss(pred, target, 0.7)
    num = numeric_grad(lambda: pose_loss(pred, target, 0.7)[0], pred, 1e-5)
    assert relative_error(g, num) <= 1e-6


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(1.5)


def test_multiblock_masking_is_exact():
    rng = np.random.default_rng(0)
    preds = rng.normal(size=(4, 3, 6))
    targets = rng.normal(size=(4, 6))
    _, grad = masked_multiblock_loss(preds, targets, np.full(4, 1), 0.7)
    assert np.all(grad[:, 0] == 0) and np.all(grad[:, 2] == 0)
    assert np.any(grad[:, 1] != 0)


def test_multiblock_equals_single_block_for_one_class():
    rng = np.random.default_rng(1)
    preds = rng.normal(size=(5, 1, 6))
    targets = rng.normal(size=(5, 6))
    a, ga = masked_multiblock_loss(preds, targets, np.zeros(5, int), 0.7)
    b, gb = pose_loss(preds[:, 0], targets, 0.7)
    assert a == b
    assert np.array_equal(ga[:, 0], gb)


def test_multiblock_rejects_bad_class():
    with pytest.raises(IndexError):
        masked_multiblock_loss(np.zeros((1, 3, 6)), np.zeros((1, 6)), np.array([3]), 0.7)


def test_weights_of_other_blocks_do_not_affect_loss():
    spec = tiny_spec("conv3_s2", "multi_block", 3)
    params = build_architecture(spec, (31, 31, 2), seed=2, dtype=np.float64)
    rng = np.random.default_rng(0)
    params.weights["out.b"][:] = rng.normal(size=18)  # keep raw quaternions away from zero
    x = rng.normal(size=(3, 31, 31, 2))
    targets = rng.normal(size=(3, 6))
    cls = np.array([1, 1, 1])
    before, grads, _ = loss_and_grads(params, x, targets, cls)
    params.weights["out.w"][:, 12:18] += rng.normal(size=(params.weights["out.w"].shape[0], 6))
    params.weights["out.b"][12:18] += 1.0
    after, _, _ = loss_and_grads(params, x, targets, cls)
    assert before == after
    assert not grads["out.w"][:, 12:18].any() and not grads["out.w"][:, 0:6].any()


# Adam

def _scalar_params(value=0.0):
    params = build_architecture(tiny_spec("fc_multi_class"), (3, 3, 1), dtype=np.float64)
    params.weights = {"w": np.array([value])}
    params.m, params.v = {"w": np.zeros(1)}, {"w": np.zeros(1)}
    return params


def test_adam_first_step_closed_form():
    params = _scalar_params()
    adam_step(params, {"w": np.array([1.0])}, lr=1e-3, eps=1e-8)
    assert params.weights["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-12)
    assert params.step == 1


def test_adam_zero_gradient():
    params = _scalar_params(0.25)
    params.m["w"][:] = 0.5
    params.v["w"][:] = 0.0
    adam_step(params, {"w": np.array([0.0])})
    assert params.m["w"][0] == pytest.approx(0.45)
    assert params.weights["w"][0] != 0.25  # a nonzero first moment still moves the parameter
    fresh = _scalar_params(0.25)
    adam_step(fresh, {"w": np.array([0.0])})
    assert fresh.weights["w"][0] == 0.25
    assert fresh.m["w"][0] == 0.0 and fresh.v["w"][0] == 0.0


@pytest.mark.parametrize("bad", [math.nan, math.inf])
def test_adam_diverged(bad):
    params = _scalar_params()
    with pytest.raises(DivergenceError, match="diverged"):
        adam_step(params, {"w": np.array([bad])})
    assert params.step == 0 and params.weights["w"][0] == 0.0


# architecture grid

@pytest.mark.parametrize("variant", VARIANTS)
def test_architecture_shape_algebra(variant):
    spec = ArchitectureSpec(variant=variant, num_classes=2, stem_channels=4, head_channels=4, hidden=8)
    params = build_architecture(spec, (64, 64, 3))
    size = 64
    for name, shape in feature_shapes(params):
        if name.startswith(("stem", "conv")):
            stride = 2 if name.startswith("stem") else {"conv1_s4": 4, "conv1_s8": 8}.get(variant, 2)
            size = (size - 3) // stride + 1
            assert shape[:2] == (size, size)
    assert feature_shapes(params)[-1] == ("out", (6,))


def test_full_scale_head_input():
    spec = ArchitectureSpec(variant="conv3_s2", stem_channels=2, head_channels=2, hidden=4, stem_layers=0)
    params = build_architecture(spec, (80, 80, 2))
    assert [s for n, s in feature_shapes(params) if n.startswith("conv")] == [(39, 39, 2), (19, 19, 2), (9, 9, 2)]


def test_architecture_errors_and_determinism():
    with pytest.raises(ValueError):
        build_architecture(ArchitectureSpec(variant="conv3_s2"), (16, 16, 3))
    with pytest.raises(ValueError):
        ArchitectureSpec(variant="conv4_s2")
    a = build_architecture(ArchitectureSpec(), (64, 64, 3), seed=7)
    b = build_architecture(ArchitectureSpec(), (64, 64, 3), seed=7)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    multi = ArchitectureSpec(head="multi_block", num_classes=4)
    assert multi.output_width == 24


def test_checkpoint_round_trip(tmp_path):
    params = build_architecture(tiny_spec("conv3_s2", "multi_block", 2), (31, 31, 2), seed=5)
    adam_step(params, {k: np.ones_like(w) for k, w in params.weights.items()})
    save_checkpoint(params, tmp_path / "net.ckpt")
    again = load_checkpoint(tmp_path / "net.ckpt")
    assert again.spec == params.spec and again.step == 1 and again.seed == 5
    for group in ("weights", "m", "v"):
        for k, w in getattr(params, group).items():
            assert np.array_equal(getattr(again, group)[k], w)
    (tmp_path / "bad.ckpt").write_bytes(b"nope" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


# training

def _tiny_data(n=10, seed=0, size=32):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.sign(q[:, :1])
    targets = np.concatenate([rng.uniform(-0.2, 0.2, (n, 2)), q], axis=1)
    images = rng.integers(0, 256, (n, size, size, 3)).astype(np.uint8)
    return SampleArrays(images, targets, np.zeros(n, int), np.zeros(n))


def test_training_smoke_loss_decreases():
    data = _tiny_data()
    spec = ArchitectureSpec(stem_channels=8, head_channels=8, hidden=16, stem_layers=1)
    _, hist = train(data, None, spec, TrainConfig(epochs=5, batch_size=10, augment_shift=0, augment_rotation_deg=0.0), seed=0)
    assert len(hist) == 5
    assert all(b < a for a, b in zip(hist.train_loss, hist.train_loss[1:]))


def test_training_deterministic_and_csv(tmp_path):
    data, val = _tiny_data(12), _tiny_data(4, seed=1)
    spec = ArchitectureSpec(stem_channels=8, head_channels=8, hidden=16, stem_layers=1)
    cfg = TrainConfig(epochs=3, batch_size=4, augment_shift=2, augment_rotation_deg=180.0)
    _, h1 = train(data, val, spec, cfg, seed=3)
    _, h2 = train(data, val, spec, cfg, seed=3)
    assert h1.to_json() == h2.to_json()
    write_curves_csv(h1, tmp_path / "curves.csv")
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,train_trans_px,val_trans_px,train_rot_deg,val_rot_deg"
    assert len(lines) == 4


def test_augment_batch_identity_and_targets():
    data = _tiny_data(3)
    x = data.images.astype(np.float64) / 127.5 - 1.0
    out, t = augment_batch(x, data.targets, data.class_ids, np.random.default_rng(0), 0, 0.0)
    assert np.allclose(out, x) and np.array_equal(t, data.targets)
    out, t = augment_batch(x, data.targets, data.class_ids, np.random.default_rng(0), 3, 180.0)
    assert np.all(t[:, 2] >= 0)
    assert np.allclose(np.linalg.norm(t[:, 2:], axis=1), 1.0)
    assert np.all(np.abs(t[:, :2] - data.targets[:, :2]) <= 2 * 3 / 32 + 1e-12)
