"""Scene composition and augmentation of turntable captures."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from pose6d.geometry import CameraIntrinsics, Pose5D, Quaternion, RigidTransform
from pose6d.synth.render import Capture

RED = np.array([255, 0, 0], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class Sample:
    """One network input crop with its normalized target."""

    input: np.ndarray  # (S, S, 3) uint8, focus-encoded
    target: Pose5D
    class_id: int
    occlusion_fraction: float
    crop_center: tuple[int, int]
    depth_crop: Optional[np.ndarray] = None  # (S, S) meters
    mask_crop: Optional[np.ndarray] = None  # (S, S) bool, object pixels before occlusion
    pose: Optional[RigidTransform] = None  # ground-truth 6D pose, camera frame
    meta: Optional[dict] = None

    def with_(self, **kw) -> "Sample":
        return replace(self, **kw)


class OverlayResult(NamedTuple):
    composite: np.ndarray
    mask: np.ndarray
    center: tuple[float, float]
    depth: np.ndarray


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def overlay(capture: Capture, background: np.ndarray, placement, background_depth: np.ndarray | None = None
            ) -> OverlayResult:
    """Paste the masked capture onto ``background`` shifted by ``placement`` = (dx, dy) pixels."""
    bg = np.asarray(background)
    hb, wb = bg.shape[:2]
    dx, dy = int(placement[0]), int(placement[1])
    rows, cols = np.nonzero(capture.mask)
    if rows.size == 0:
        raise ValueError("capture mask is empty")
    r2, c2 = rows + dy, cols + dx
    keep = (r2 >= 0) & (r2 < hb) & (c2 >= 0) & (c2 < wb)
    if keep.sum() * 2 < rows.size:
        raise ValueError("placement pushes more than half of the object out of frame")
    composite = bg.copy()
    composite[r2[keep], c2[keep]] = capture.rgb[rows[keep], cols[keep]]
    mask = np.zeros((hb, wb), dtype=bool)
    mask[r2[keep], c2[keep]] = True
    depth = np.zeros((hb, wb)) if background_depth is None else np.asarray(background_depth, float).copy()
    depth[r2[keep], c2[keep]] = capture.depth[rows[keep], cols[keep]]
    center = (capture.center[0] + dx, capture.center[1] + dy)
    return OverlayResult(composite, mask, center, depth)


def shift_pose(pose: RigidTransform, center: tuple[float, float], intrinsics: CameraIntrinsics) -> RigidTransform:
    """Move the object along its depth plane so it projects onto ``center``."""
    z = pose.translation[2]
    return RigidTransform(pose.rotation, tuple(intrinsics.back_project(center[0], center[1], z)))


def encode_focus(image: np.ndarray, focus_mask: np.ndarray, blend: float) -> np.ndarray:
    """Push every pixel outside ``focus_mask`` towards pure red by ``blend``."""
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    img = np.asarray(image)
    out = img.copy()
    outside = ~np.asarray(focus_mask, bool)
    mixed = (1.0 - blend) * img[outside].astype(float) + blend * RED.astype(float)
    out[outside] = np.clip(round_half_away(mixed), 0, 255).astype(img.dtype)
    return out


def rotate_augment(capture: Capture, angle: float) -> Capture:
    """Rotate a capture about the camera axis by ``angle`` radians.

    The image rotates about its center, so the result is physically exact when
    the principal point is the image center and fx == fy (as for the toy
    camera). With image y pointing down, a positive angle turns the image
    clockwise on screen.
    """
    h, w = capture.mask.shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    ca, sa = math.cos(angle), math.sin(angle)
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    # destination p' = R p about c, so sample the source at R^T (p' - c) + c
    dx, dy = xs - c[0], ys - c[1]
    src_x = ca * dx + sa * dy + c[0]
    src_y = -sa * dx + ca * dy + c[1]
    coords = np.stack([src_y, src_x])
    rgb = np.stack([ndimage.map_coordinates(capture.rgb[..., k].astype(float), coords, order=1, mode="constant")
                    for k in range(3)], axis=-1)
    mask = ndimage.map_coordinates(capture.mask.astype(np.uint8), coords, order=0, mode="constant").astype(bool)
    depth = ndimage.map_coordinates(capture.depth, coords, order=0, mode="constant")
    depth = np.where(mask, depth, 0.0)
    rz = Quaternion.from_axis_angle((0.0, 0.0, 1.0), angle)
    pose = RigidTransform(rz * capture.pose.rotation, tuple(rz.rotate(capture.pose.t)))
    ox, oy = capture.center[0] - c[0], capture.center[1] - c[1]
    center = (ca * ox - sa * oy + c[0], sa * ox + ca * oy + c[1])
    return capture.with_(rgb=np.clip(np.round(rgb), 0, 255).astype(np.uint8), mask=mask, depth=depth,
                         pose=pose, center=(float(center[0]), float(center[1])))


def crop_window(image: np.ndarray, center: tuple[int, int], size: int, fill) -> np.ndarray:
    """``size`` x ``size`` window whose pixel (size//2, size//2) is ``center``; padded with ``fill``."""
    h, w = image.shape[:2]
    top, left = center[1] - size // 2, center[0] - size // 2
    out = np.empty((size, size) + image.shape[2:], dtype=image.dtype)
    out[...] = fill
    r0, r1 = max(top, 0), min(top + size, h)
    c0, c1 = max(left, 0), min(left + size, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = image[r0:r1, c0:c1]
    return out


def crop_origin(crop_center: tuple[int, int], size: int) -> tuple[int, int]:
    """Full-image (x, y) of a crop's top-left pixel."""
    return crop_center[0] - size // 2, crop_center[1] - size // 2


def crop_with_jitter(composite: np.ndarray, object_center, crop_size: int, jitter_max: int,
                     rng: np.random.Generator):
    """Crop around a randomly displaced center.

    The crop center is the rounded object center plus an integer offset drawn
    uniformly from [-jitter_max, jitter_max] per axis. Returns
    ``(crop, target_uv, crop_center)``; out-of-image pixels are pure red.
    """
    if jitter_max > crop_size // 2 - 1:
        raise ValueError("jitter_max must stay below half the crop size")
    h, w = composite.shape[:2]
    ox, oy = float(object_center[0]), float(object_center[1])
    if not (0 <= ox <= w - 1 and 0 <= oy <= h - 1):
        raise ValueError("object center lies outside the image")
    j = rng.integers(-jitter_max, jitter_max + 1, size=2) if jitter_max > 0 else np.zeros(2, int)
    cc = (int(round(ox)) + int(j[0]), int(round(oy)) + int(j[1]))
    crop = crop_window(composite, cc, crop_size, RED if composite.ndim == 3 else 0)
    uv = np.array([2.0 * (ox - cc[0]) / crop_size, 2.0 * (oy - cc[1]) / crop_size])
    return crop, uv, cc


def occlude(sample: Sample, fraction: float, rng: np.random.Generator) -> Sample:
    """Paint a red band over roughly ``fraction`` of the object's pixels.

    The band is an axis-aligned rectangle entering the object's bounding box
    from a random side; its depth is chosen so the covered share of object
    pixels is as close to ``fraction`` as possible without exceeding 0.5.
    """
    if fraction > 0.5:
        raise ValueError("occlusion fraction must be <= 0.5")
    if fraction <= 0 or sample.mask_crop is None or not sample.mask_crop.any():
        return sample
    mask = sample.mask_crop
    total = mask.sum()
    rows, cols = np.nonzero(mask)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    side = int(rng.integers(4))
    # object-pixel counts per line, ordered from the entering side inward
    if side in (0, 1):
        per_line = mask[r0:r1, c0:c1].sum(axis=1)
    else:
        per_line = mask[r0:r1, c0:c1].sum(axis=0)
    if side in (1, 3):
        per_line = per_line[::-1]
    covered = np.concatenate([[0], np.cumsum(per_line)]) / total
    ok = np.nonzero(covered <= 0.5)[0]
    k = int(ok[np.argmin(np.abs(covered[ok] - fraction))])
    if k == 0:
        return sample
    img = sample.input.copy()
    if side == 0:
        img[r0:r0 + k, c0:c1] = RED
    elif side == 1:
        img[r1 - k:r1, c0:c1] = RED
    elif side == 2:
        img[r0:r1, c0:c0 + k] = RED
    else:
        img[r0:r1, c1 - k:c1] = RED
    return sample.with_(input=img, occlusion_fraction=float(covered[k]))
