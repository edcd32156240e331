import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pose6d.geometry import CameraIntrinsics, Pose5D, Quaternion, RigidTransform, canonicalize_symmetry
from pose6d.synth.compose import (
    RED,
    Sample,
    crop_with_jitter,
    encode_focus,
    occlude,
    overlay,
    rotate_augment,
)
from pose6d.synth.dataset import (
    SynthConfig,
    capture_view,
    generate_dataset,
    load_dataset,
    procedural_backgrounds,
    sample_plan,
    save_dataset,
    split_indices,
)
from pose6d.synth.objects import catalog, get_objects, make_box
from pose6d.synth.render import background_subtract, render_toy_capture

CAM = CameraIntrinsics(400.0, 400.0, 63.5, 63.5)
BOX = make_box((0.05, 0.04, 0.03))


def centroid(mask):
    rows, cols = np.nonzero(mask)
    return np.array([cols.mean(), rows.mean()])


def small_config(**kw):
    base = dict(sequences=1, views=2, rotations_per_view=3, image_size=96, crop_size=48)
    base.update(kw)
    return SynthConfig(**base)


# rendering

def test_render_centered_box_projects_to_principal_point():
    cap = render_toy_capture(BOX, RigidTransform(Quaternion.identity(), (0, 0, 1.0)), CAM, 128)
    assert cap.mask.any()
    assert np.allclose(centroid(cap.mask), [63.5, 63.5], atol=1.0)
    assert np.all(cap.depth[cap.mask] > 0)


def test_render_shift_moves_centroid_by_pinhole_displacement():
    a = render_toy_capture(BOX, RigidTransform(Quaternion.identity(), (0, 0, 1.0)), CAM, 128)
    b = render_toy_capture(BOX, RigidTransform(Quaternion.identity(), (0.1, 0, 1.0)), CAM, 128)
    shift = centroid(b.mask) - centroid(a.mask)
    assert shift[0] == pytest.approx(40.0, abs=1.0)
    assert shift[1] == pytest.approx(0.0, abs=1.0)


def test_render_depth_of_front_face():
    cap = render_toy_capture(BOX, RigidTransform(Quaternion.identity(), (0, 0, 1.0)), CAM, 128)
    assert cap.depth[64, 64] == pytest.approx(1.0 - 0.03, abs=1e-9)


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_render_rejects_nonpositive_depth(z):
    with pytest.raises(ValueError):
        render_toy_capture(BOX, RigidTransform(Quaternion.identity(), (0, 0, z)), CAM, 128)


def test_catalog_objects_carry_no_red_faces():
    for obj in catalog().values():
        assert not np.any(np.all(obj.face_colors == RED, axis=1)), obj.name


# background subtraction

def test_background_subtract_identical_frames():
    frame = np.random.default_rng(0).integers(0, 256, (20, 20, 3)).astype(np.uint8)
    assert not background_subtract(frame, frame, 10).any()


def test_background_subtract_recovers_block():
    empty = np.full((30, 30, 3), 50, np.uint8)
    frame = empty.copy()
    frame[10:18, 5:12] = (50, 200, 50)
    frame[2, 25] = (255, 255, 255)  # isolated speck is removed by the opening
    mask = background_subtract(frame, empty, 20)
    expected = np.zeros((30, 30), bool)
    expected[10:18, 5:12] = True
    assert np.array_equal(mask, expected)


def test_background_subtract_shape_mismatch():
    with pytest.raises(ValueError):
        background_subtract(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)), 1)


# overlay

def _capture(config=None, view=0):
    config = config or small_config()
    return capture_view(get_objects(["box"])[0], 0, 0, view, config)


def test_overlay_on_uniform_background():
    cap = _capture()
    bg = np.full(cap.rgb.shape, 77, np.uint8)
    res = overlay(cap, bg, (0, 0))
    assert np.array_equal(res.composite[~res.mask], bg[~res.mask])
    assert np.array_equal(res.composite[res.mask], cap.rgb[cap.mask])
    assert res.mask.sum() == cap.mask.sum()
    assert res.center == cap.center


def test_overlay_translates_center():
    cap = _capture()
    res = overlay(cap, np.zeros_like(cap.rgb), (5, -3))
    assert res.center == pytest.approx((cap.center[0] + 5, cap.center[1] - 3))
    assert res.mask.sum() == cap.mask.sum()


def test_overlay_later_object_wins():
    cap = _capture()
    other = cap.with_(rgb=np.full_like(cap.rgb, 9))
    first = overlay(cap, np.zeros_like(cap.rgb), (0, 0))
    second = overlay(other, first.composite, (4, 0))
    assert np.all(second.composite[second.mask] == 9)


def test_overlay_rejects_mostly_out_of_frame():
    cap = _capture()
    with pytest.raises(ValueError):
        overlay(cap, np.zeros_like(cap.rgb), (cap.rgb.shape[1], 0))


# focus encoding

def test_encode_focus_examples():
    img = np.zeros((3, 3, 3), np.uint8)
    img[1, 1] = (10, 20, 30)
    focus = np.zeros((3, 3), bool)
    focus[1, 1] = True
    full = encode_focus(img, focus, 1.0)
    assert np.all(full[~focus] == RED)
    assert np.array_equal(full[1, 1], (10, 20, 30))
    assert np.array_equal(encode_focus(img, focus, 0.0), img)
    half = encode_focus(img, focus, 0.5)
    assert tuple(half[0, 0]) == (128, 0, 0)  # 127.5 rounds away from zero


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_encode_focus_never_touches_focus_pixels(seed, blend):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (8, 8, 3)).astype(np.uint8)
    focus = rng.random((8, 8)) < 0.5
    out = encode_focus(img, focus, blend)
    assert np.array_equal(out[focus], img[focus])


def test_encode_focus_rejects_bad_blend():
    with pytest.raises(ValueError):
        encode_focus(np.zeros((2, 2, 3), np.uint8), np.zeros((2, 2), bool), 1.5)


# rotation augmentation

def test_rotate_zero_is_identity():
    cap = _capture()
    rot = rotate_augment(cap, 0.0)
    assert np.array_equal(rot.mask, cap.mask)
    assert np.array_equal(rot.rgb, cap.rgb)
    assert rot.pose.rotation.allclose(cap.pose.rotation, atol=1e-12)


def test_rotate_full_turn_restores_quaternion_up_to_sign():
    cap = _capture()
    q = rotate_augment(cap, 2 * math.pi).pose.rotation
    assert q.allclose(cap.pose.rotation, atol=1e-9) or (-q).allclose(cap.pose.rotation, atol=1e-9)


def test_rotate_quarter_turn_moves_offcenter_centroid():
    cfg = small_config()
    obj = get_objects(["box"])[0]
    pose = RigidTransform(Quaternion.identity(), (0.012, 0.004, cfg.distance))
    cap = render_toy_capture(obj, pose, cfg.intrinsics, cfg.image_size)
    rot = rotate_augment(cap, math.pi / 2)
    c = (cfg.image_size - 1) / 2.0
    ox, oy = centroid(cap.mask) - c
    expected = np.array([-oy, ox]) + c
    assert np.allclose(centroid(rot.mask), expected, atol=1.5)


@settings(max_examples=15, deadline=None)
@given(st.floats(-math.pi, math.pi), st.integers(0, 1))
def test_rotation_matches_rerender(angle, view):
    cfg = small_config()
    obj = get_objects(["wedge"])[0]
    cap = capture_view(obj, 0, 0, view, cfg)
    rot = rotate_augment(cap, angle)
    again = render_toy_capture(obj, rot.pose, cfg.intrinsics, cfg.image_size)
    assert np.linalg.norm(centroid(rot.mask) - centroid(again.mask)) <= 2.0
    assert np.allclose(rot.center, again.center, atol=1e-6)


# occlusion

def _blob_sample(mask):
    img = np.where(mask[..., None], np.uint8(200), RED).astype(np.uint8)
    return Sample(img, Pose5D(0, 0, Quaternion.identity()), 0, 0.0, (0, 0), mask_crop=mask)


def test_occlude_zero_is_identity():
    mask = np.zeros((32, 32), bool)
    mask[8:24, 8:24] = True
    s = _blob_sample(mask)
    assert occlude(s, 0.0, np.random.default_rng(0)) is s


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.5), st.integers(0, 2**32 - 1))
def test_occlude_realized_fraction(fraction, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(10, 28, 2)
    mask = np.zeros((32, 32), bool)
    mask[2:2 + h, 3:3 + w] = True
    s = occlude(_blob_sample(mask), fraction, np.random.default_rng(seed))
    assert abs(s.occlusion_fraction - fraction) <= 0.05
    assert s.occlusion_fraction <= 0.5
    hidden = mask & np.all(s.input == RED, axis=-1)
    assert hidden.sum() / mask.sum() == pytest.approx(s.occlusion_fraction)


def test_occlude_rejects_large_fraction():
    mask = np.ones((8, 8), bool)
    with pytest.raises(ValueError):
        occlude(_blob_sample(mask), 0.6, np.random.default_rng(0))


# cropping

def test_crop_without_jitter_is_centered():
    img = np.zeros((64, 64, 3), np.uint8)
    crop, uv, cc = crop_with_jitter(img, (30.0, 20.0), 16, 0, np.random.default_rng(0))
    assert crop.shape == (16, 16, 3)
    assert np.allclose(uv, 0.0)
    assert cc == (30, 20)


def test_crop_target_uv_scaling():
    img = np.zeros((640, 640, 3), np.uint8)

    class Fixed:
        def integers(self, lo, hi, size):
            return np.array([-16, 0])

    _, uv, cc = crop_with_jitter(img, (300.0, 300.0), 320, 20, Fixed())
    assert cc == (284, 300)
    assert uv == pytest.approx([0.1, 0.0])


def test_crop_padding_is_red():
    img = np.zeros((40, 40, 3), np.uint8)
    crop, _, _ = crop_with_jitter(img, (0.0, 0.0), 16, 0, np.random.default_rng(0))
    assert np.all(crop[:8, :, :] == RED)
    assert np.all(crop[:, :8, :] == RED)
    assert np.all(crop[8:, 8:] == 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 63), st.floats(0, 63), st.integers(0, 7), st.integers(0, 2**32 - 1))
def test_crop_uv_in_range(x, y, jitter, seed):
    img = np.zeros((64, 64, 3), np.uint8)
    _, uv, cc = crop_with_jitter(img, (x, y), 16, jitter, np.random.default_rng(seed))
    assert np.all(np.abs(uv) <= 1.0)
    assert np.allclose(np.array([x, y]), np.array(cc) + uv * 8)


# dataset

def test_split_counts_exact():
    tr, va = split_indices(1000, 0.8, seed=3)
    assert len(tr) == 800 and len(va) == 200
    assert len(np.intersect1d(tr, va)) == 0


def test_full_scale_sample_count():
    cfg = SynthConfig.full_scale()
    assert cfg.samples_per_object == 3600
    assert len(sample_plan(2, cfg)) == 7200


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(max_occlusion_fraction=0.6)
    with pytest.raises(ValueError):
        SynthConfig(split_ratio=1.0)
    with pytest.raises(KeyError):
        SynthConfig.from_json({"crop_sise": 32})


@pytest.fixture(scope="module")
def small_dataset():
    cfg = small_config(rotations_per_view=5)
    objs = get_objects(["box", "dumbbell"])
    return generate_dataset(objs, procedural_backgrounds(2, cfg.image_size), cfg), objs, cfg


def test_dataset_contracts(small_dataset):
    (train, val, manifest), objs, cfg = small_dataset
    n = len(objs) * cfg.samples_per_object
    assert len(train) + len(val) == n
    assert len(train) == round(n * cfg.split_ratio)
    for s in train + val:
        assert s.input.shape == (cfg.crop_size, cfg.crop_size, 3)
        assert 0.0 <= s.occlusion_fraction <= 0.5
        s.target.validate()
        sym = objs[s.class_id].symmetry
        assert canonicalize_symmetry(s.target.q, sym).allclose(s.target.q, atol=1e-12)
    assert [c["name"] for c in manifest["classes"]] == ["box", "dumbbell"]
    assert manifest["classes"][1]["symmetry"]["kind"] == "continuous"


def test_dataset_deterministic(small_dataset):
    (train, val, manifest), objs, cfg = small_dataset
    train2, val2, manifest2 = generate_dataset(objs, procedural_backgrounds(2, cfg.image_size), cfg)
    assert manifest == manifest2
    for a, b in zip(train + val, train2 + val2):
        assert np.array_equal(a.input, b.input)


def test_dataset_round_trip(small_dataset, tmp_path):
    (train, val, manifest), _, _ = small_dataset
    save_dataset(tmp_path, train, val, manifest)
    train2, val2, manifest2 = load_dataset(tmp_path)
    assert manifest2 == manifest
    for a, b in zip(train + val, train2 + val2):
        assert np.array_equal(a.input, b.input)
        assert a.target == b.target
        assert np.allclose(a.depth_crop, b.depth_crop, atol=5e-4)


def test_generate_rejects_empty_inputs():
    cfg = small_config()
    with pytest.raises(ValueError):
        generate_dataset([], procedural_backgrounds(1, cfg.image_size), cfg)
    with pytest.raises(ValueError):
        generate_dataset(get_objects(["box"]), [], cfg)


def test_background_subtraction_mask_source():
    cfg = small_config(mask_source="background_subtraction")
    cap = capture_view(get_objects(["box"])[0], 0, 0, 0, cfg)
    ref = capture_view(get_objects(["box"])[0], 0, 0, 0, small_config())
    iou = (cap.mask & ref.mask).sum() / (cap.mask | ref.mask).sum()
    assert iou > 0.9
