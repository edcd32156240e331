"""Turntable-style dataset generation and its on-disk format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from pose6d.geometry import (
    CameraIntrinsics,
    Pose5D,
    Quaternion,
    RigidTransform,
    SymmetrySpec,
    canonicalize_hemisphere,
    canonicalize_symmetry,
)
from pose6d.synth.compose import (
    Sample,
    crop_window,
    crop_with_jitter,
    encode_focus,
    occlude,
    overlay,
    rotate_augment,
    shift_pose,
)
from pose6d.synth.objects import ToyObject
from pose6d.synth.render import Capture, background_subtract, default_intrinsics, render_toy_capture

MANIFEST_VERSION = 1
ELEVATIONS_DEG = (25.0, 50.0, 75.0)
TURNTABLE_BACKDROP = (60, 60, 60)


@dataclass(frozen=True)
class SynthConfig:
    crop_size: int = 64
    jitter_max: int | None = None  # None: crop_size // 16
    sequences: int = 2
    views: int = 8
    rotations_per_view: int = 12
    max_rotation_deg: float = 180.0  # in-plane angles drawn from [-max, max]
    max_occlusion_fraction: float = 0.5
    occlusion_probability: float = 0.5
    focus_blend: float = 1.0
    split_ratio: float = 0.8
    seed: int = 0
    image_size: int = 128
    focal: float = 4800.0
    distance: float = 2.5
    placement_max: int | None = None  # None: image_size // 4
    canonicalize_targets: bool = True
    mask_source: str = "render"  # "render" | "background_subtraction"
    store_depth: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.max_occlusion_fraction <= 0.5:
            raise ValueError("max_occlusion_fraction must lie in [0, 0.5]")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if not 0.0 <= self.focus_blend <= 1.0:
            raise ValueError("focus_blend must lie in [0, 1]")
        if not 0.0 <= self.occlusion_probability <= 1.0:
            raise ValueError("occlusion_probability must lie in [0, 1]")
        if min(self.crop_size, self.sequences, self.views, self.rotations_per_view, self.image_size) < 1:
            raise ValueError("sizes and counts must be positive")
        if self.jitter < 0 or self.jitter > self.crop_size // 2 - 1:
            raise ValueError("jitter_max must stay below half the crop size")
        if self.mask_source not in ("render", "background_subtraction"):
            raise ValueError(f"unknown mask_source {self.mask_source!r}")
        if self.distance <= 0 or self.focal <= 0:
            raise ValueError("distance and focal must be positive")

    @property
    def jitter(self) -> int:
        return self.crop_size // 16 if self.jitter_max is None else int(self.jitter_max)

    @property
    def placement(self) -> int:
        return self.image_size // 4 if self.placement_max is None else int(self.placement_max)

    @property
    def samples_per_object(self) -> int:
        return self.sequences * self.views * self.rotations_per_view

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return default_intrinsics(self.image_size, self.focal)

    @classmethod
    def full_scale(cls, **overrides) -> "SynthConfig":
        """3 sequences x 20 views x 60 rotations with 320 px crops."""
        kw = dict(crop_size=320, sequences=3, views=20, rotations_per_view=60, image_size=640, focal=24000.0)
        kw.update(overrides)
        return cls(**kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def _look_at_rotation(azimuth: float, elevation: float) -> Quaternion:
    """World-to-camera rotation of a camera on a sphere looking at the origin.

    World z is up; camera z looks forward and camera y points down.
    """
    pos = np.array([math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth),
                    math.sin(elevation)])
    fwd = -pos
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Quaternion.from_matrix(np.stack([right, down, fwd]))


def resting_orientation(sequence: int, seed: int) -> Quaternion:
    """Orientation of the object on the turntable for one capture sequence."""
    base = [Quaternion.identity(),
            Quaternion.from_axis_angle((1, 0, 0), math.pi / 2),
            Quaternion.from_axis_angle((0, 1, 0), math.pi / 2)]
    if sequence < len(base):
        return base[sequence]
    rng = np.random.default_rng([seed, 0xBA5E, sequence])
    v = rng.normal(size=4)
    return Quaternion(*(v / np.linalg.norm(v)))


def turntable_pose(sequence: int, view: int, config: SynthConfig) -> RigidTransform:
    """Camera-frame pose of the object for one turntable view."""
    spin = Quaternion.from_axis_angle((0, 0, 1), 2 * math.pi * view / config.views)
    elev = math.radians(ELEVATIONS_DEG[view % len(ELEVATIONS_DEG)])
    cam = _look_at_rotation(0.0, elev)
    q = cam * spin * resting_orientation(sequence, config.seed)
    return RigidTransform(q, (0.0, 0.0, config.distance))


def capture_view(obj: ToyObject, class_id: int, sequence: int, view: int, config: SynthConfig) -> Capture:
    pose = turntable_pose(sequence, view, config)
    if config.mask_source == "render":
        return render_toy_capture(obj, pose, config.intrinsics, config.image_size, class_id)
    backdrop = np.empty((config.image_size, config.image_size, 3), np.uint8)
    backdrop[...] = TURNTABLE_BACKDROP
    cap = render_toy_capture(obj, pose, config.intrinsics, config.image_size, class_id, background=backdrop)
    mask = background_subtract(cap.rgb, backdrop, threshold=12)
    return cap.with_(mask=mask, depth=np.where(mask, cap.depth, 0.0))


def procedural_backgrounds(n: int, size: int, seed: int = 0) -> list[np.ndarray]:
    """Cluttered-looking backgrounds: random colored rectangles over noise."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, 0xB6, i])
        img = rng.integers(0, 256, size=(size, size, 3)).astype(float) * 0.3 + 90
        for _ in range(12):
            x0, y0 = rng.integers(0, size, 2)
            ww, hh = rng.integers(size // 10, size // 2, 2)
            img[y0:y0 + hh, x0:x0 + ww] = rng.integers(0, 256, 3)
        out.append(np.clip(img, 0, 255).astype(np.uint8))
    return out


def load_background(path: Path, size: int) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8)


def sample_plan(n_objects: int, config: SynthConfig) -> list[tuple[int, int, int, int]]:
    """(object, sequence, view, rotation) for every sample, in generation order."""
    return [(o, s, v, r)
            for o in range(n_objects)
            for s in range(config.sequences)
            for v in range(config.views)
            for r in range(config.rotations_per_view)]


def split_indices(n: int, split_ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random partition; the train part has exactly round(n * ratio) items."""
    n_train = int(round(n * split_ratio))
    perm = np.random.default_rng([seed, 0x5B117]).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def make_sample(index: int, plan_item, objects: Sequence[ToyObject], backgrounds: Sequence[np.ndarray],
                config: SynthConfig, capture_cache: dict | None = None) -> Sample:
    """Generate one sample from its own RNG stream (seed, index)."""
    o, s, v, r = plan_item
    obj = objects[o]
    rng = np.random.default_rng([config.seed, index])
    occ_rng = np.random.default_rng([config.seed, index, 0x0CC])
    key = (o, s, v)
    cap = None if capture_cache is None else capture_cache.get(key)
    if cap is None:
        cap = capture_view(obj, o, s, v, config)
        if capture_cache is not None:
            capture_cache[key] = cap
    half = math.radians(config.max_rotation_deg)
    angle = float(rng.uniform(-half, half))
    rot = rotate_augment(cap, angle)
    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    pm = config.placement
    placement = tuple(int(p) for p in rng.integers(-pm, pm + 1, size=2))
    comp = overlay(rot, bg, placement)
    encoded = encode_focus(comp.composite, comp.mask, config.focus_blend)
    crop, uv, cc = crop_with_jitter(encoded, comp.center, config.crop_size, config.jitter, rng)
    pose = shift_pose(rot.pose, comp.center, config.intrinsics)
    q = pose.rotation
    q = canonicalize_symmetry(q, obj.symmetry) if config.canonicalize_targets else canonicalize_hemisphere(q)
    sample = Sample(
        input=crop,
        target=Pose5D(float(uv[0]), float(uv[1]), q),
        class_id=o,
        occlusion_fraction=0.0,
        crop_center=cc,
        depth_crop=crop_window(comp.depth, cc, config.crop_size, 0.0) if config.store_depth else None,
        mask_crop=crop_window(comp.mask, cc, config.crop_size, False),
        pose=pose,
        meta={"object": obj.name, "sequence": s, "view": v, "rotation": r, "angle": angle,
              "placement": list(placement)},
    )
    if config.max_occlusion_fraction > 0 and occ_rng.random() < config.occlusion_probability:
        sample = occlude(sample, float(occ_rng.uniform(0.0, config.max_occlusion_fraction)), occ_rng)
    return sample


def generate_dataset(objects: Sequence[ToyObject], backgrounds: Sequence[np.ndarray], config: SynthConfig):
    """Render, augment and split a dataset.

    Returns ``(train, val, manifest)``; the manifest describes the config and
    every sample but holds no pixel data.
    """
    if not objects:
        raise ValueError("at least one object is required")
    if not backgrounds:
        raise ValueError("at least one background is required")
    plan = sample_plan(len(objects), config)
    cache: dict = {}
    samples = []
    for i, item in enumerate(plan):
        samples.append(make_sample(i, item, objects, backgrounds, config, cache))
        if item[3] == config.rotations_per_view - 1:
            cache.pop(item[:3], None)
    tr, va = split_indices(len(samples), config.split_ratio, config.seed)
    train = [samples[i] for i in tr]
    val = [samples[i] for i in va]
    manifest = build_manifest(objects, config, train, val, tr, va)
    return train, val, manifest


def build_manifest(objects, config: SynthConfig, train, val, train_idx, val_idx) -> dict:
    def entry(split, idx, s: Sample) -> dict:
        d = {
            "id": int(idx),
            "rgb": f"{split}/{idx:06d}_rgb.png",
            "class_id": int(s.class_id),
            "target": s.target.to_json(),
            "occlusion_fraction": s.occlusion_fraction,
            "crop_center": list(s.crop_center),
            "pose": s.pose.to_json() if s.pose is not None else None,
            "provenance": s.meta,
        }
        if s.depth_crop is not None:
            d["depth"] = f"{split}/{idx:06d}_depth.png"
        return d

    return {
        "version": MANIFEST_VERSION,
        "seed": config.seed,
        "config": config.to_json(),
        "intrinsics": config.intrinsics.to_json(),
        "classes": [{"class_id": i, "name": o.name, "symmetry": o.symmetry.to_json()} for i, o in enumerate(objects)],
        "splits": {
            "train": [entry("train", i, s) for i, s in zip(train_idx, train)],
            "val": [entry("val", i, s) for i, s in zip(val_idx, val)],
        },
    }


def save_dataset(root: Path, train, val, manifest: dict) -> None:
    root = Path(root)
    for split, samples in (("train", train), ("val", val)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for s, e in zip(samples, manifest["splits"][split]):
            Image.fromarray(s.input).save(root / e["rgb"])
            if "depth" in e:
                mm = np.clip(np.round(s.depth_crop * 1000.0), 0, 65535).astype(np.uint16)
                Image.fromarray(mm).save(root / e["depth"])
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(root: Path, load_depth: bool = True):
    """Inverse of :func:`save_dataset`; returns ``(train, val, manifest)``."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())

    def load(e: dict) -> Sample:
        rgb = np.asarray(Image.open(root / e["rgb"]).convert("RGB"), dtype=np.uint8)
        depth = None
        if load_depth and "depth" in e:
            depth = np.asarray(Image.open(root / e["depth"]), dtype=np.float64) / 1000.0
        return Sample(
            input=rgb,
            target=Pose5D.from_json(e["target"]),
            class_id=int(e["class_id"]),
            occlusion_fraction=float(e["occlusion_fraction"]),
            crop_center=tuple(e["crop_center"]),
            depth_crop=depth,
            mask_crop=depth > 0 if depth is not None else None,
            pose=RigidTransform.from_json(e["pose"]) if e.get("pose") else None,
            meta=e.get("provenance"),
        )

    return [load(e) for e in manifest["splits"]["train"]], [load(e) for e in manifest["splits"]["val"]], manifest


def manifest_symmetries(manifest: dict) -> list[SymmetrySpec]:
    return [SymmetrySpec.from_json(c["symmetry"]) for c in manifest["classes"]]


def manifest_intrinsics(manifest: dict) -> CameraIntrinsics:
    return CameraIntrinsics.from_json(manifest["intrinsics"])
