"""Flat-shaded z-buffer rasterizer for toy objects, and background subtraction."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from pose6d.geometry import CameraIntrinsics, RigidTransform
from pose6d.synth.objects import ToyObject

LIGHT_DIR = np.array([-0.4, -0.6, -1.0]) / np.linalg.norm([-0.4, -0.6, -1.0])
AMBIENT = 0.45
NEAR = 1e-3


@dataclass(frozen=True, eq=False)
class Capture:
    """One isolated view of an object (turntable frame)."""

    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float meters, 0 = invalid
    mask: np.ndarray  # (H, W) bool
    pose: RigidTransform  # object in camera frame
    class_id: int
    center: tuple[float, float]  # image-plane projection of the object origin

    def with_(self, **kw) -> "Capture":
        return replace(self, **kw)


def default_intrinsics(image_size: int = 128, focal: float = 4800.0) -> CameraIntrinsics:
    c = (image_size - 1) / 2.0
    return CameraIntrinsics(focal, focal, c, c)


def render_toy_capture(obj: ToyObject, pose: RigidTransform, intrinsics: CameraIntrinsics, image_size,
                       class_id: int = 0, background=None) -> Capture:
    """Rasterize ``obj`` at ``pose``; pixel (row i, col j) has its center at (x=j, y=i).

    ``image_size`` is an int (square) or (height, width). ``background`` is an
    optional RGB frame the object is drawn over (e.g. an empty turntable).
    """
    h, w = (image_size, image_size) if np.isscalar(image_size) else image_size
    if pose.translation[2] <= 0:
        raise ValueError("object origin must lie in front of the camera (z > 0)")
    pts = pose.apply(obj.vertices)
    if np.all(pts[:, 2] <= NEAR):
        raise ValueError("object is entirely behind the camera")
    normals = obj.face_normals() @ pose.rotation.to_matrix().T
    zbuf = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3)) if background is None else np.asarray(background, float).copy()
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, None)
    colors = np.clip(obj.face_colors * shade[:, None], 0, 255)
    pix = intrinsics.project(np.where(pts[:, 2:3] > NEAR, pts, np.nan))
    for fi, (a, b, c) in enumerate(obj.faces):
        if min(pts[a, 2], pts[b, 2], pts[c, 2]) <= NEAR:
            continue
        # back faces never win the depth test on closed parts
        if np.dot(normals[fi], pts[a]) >= 0:
            continue
        p0, p1, p2 = pix[a], pix[b], pix[c]
        x0 = max(int(np.ceil(min(p0[0], p1[0], p2[0]))), 0)
        x1 = min(int(np.floor(max(p0[0], p1[0], p2[0]))), w - 1)
        y0 = max(int(np.ceil(min(p0[1], p1[1], p2[1]))), 0)
        y1 = min(int(np.floor(max(p0[1], p1[1], p2[1]))), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < 1e-12:
            continue
        w0 = ((p1[0] - xs) * (p2[1] - ys) - (p1[1] - ys) * (p2[0] - xs)) / area
        w1 = ((p2[0] - xs) * (p0[1] - ys) - (p2[1] - ys) * (p0[0] - xs)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # perspective-correct depth: 1/z is affine in screen space
        inv_z = w0 / pts[a, 2] + w1 / pts[b, 2] + w2 / pts[c, 2]
        z = 1.0 / inv_z
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z < sub)
        sub[win] = z[win]
        rgb[y0:y1 + 1, x0:x1 + 1][win] = colors[fi]
    mask = np.isfinite(zbuf)
    depth = np.where(mask, zbuf, 0.0)
    center = intrinsics.project(pose.t)
    return Capture(np.round(rgb).astype(np.uint8), depth, mask, pose, class_id, (float(center[0]), float(center[1])))


def background_subtract(frame: np.ndarray, empty_frame: np.ndarray, threshold: float) -> np.ndarray:
    """Foreground mask: any channel differs by more than ``threshold``, then opened once."""
    frame = np.asarray(frame)
    empty_frame = np.asarray(empty_frame)
    if frame.shape != empty_frame.shape:
        raise ValueError(f"frame shape {frame.shape} != empty frame shape {empty_frame.shape}")
    diff = np.abs(frame.astype(np.int32) - empty_frame.astype(np.int32))
    if diff.ndim == 3:
        diff = diff.max(axis=2)
    mask = diff > threshold
    mask = ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool), border_value=1)
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool))
