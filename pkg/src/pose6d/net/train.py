"""Minibatch Adam training with per-epoch error curves."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from pose6d.geometry import Quaternion, SymmetrySpec, canonicalize_symmetry, symmetry_aware_error
from pose6d.net.model import ArchitectureSpec, NetworkParams, build_architecture, loss_and_grads, predict, prepare_input
from pose6d.net.optim import adam_step

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "train_loss", "val_loss", "train_trans_px", "val_trans_px", "train_rot_deg", "val_rot_deg")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    lr_schedule: str = "constant"  # "constant" | "cosine" (anneal to zero over the run)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.7
    dtype: str = "float32"
    # online re-augmentation of stored crops, redrawn every time a sample is used
    augment_shift: int = 4  # extra crop jitter in pixels
    augment_rotation_deg: float = 180.0  # random in-plane rotation in [-deg, deg] about the object center
    canonicalize_targets: bool = True  # re-canonicalize rotated targets under the class symmetry

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.augment_shift < 0 or not 0.0 <= self.augment_rotation_deg <= 180.0:
            raise ValueError("augment_shift must be >= 0 and augment_rotation_deg within [0, 180]")


@dataclass
class SampleArrays:
    """Stacked samples ready for the network."""

    images: np.ndarray  # (N, S, S, 3) uint8
    targets: np.ndarray  # (N, 6): u, v, qw, qx, qy, qz
    class_ids: np.ndarray  # (N,)
    occlusion: np.ndarray  # (N,)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def crop_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx)
        return SampleArrays(self.images[idx], self.targets[idx], self.class_ids[idx], self.occlusion[idx])

    @classmethod
    def from_samples(cls, samples: Sequence) -> "SampleArrays":
        if not samples:
            raise ValueError("empty sample list")
        return cls(
            np.stack([s.input for s in samples]),
            np.array([[s.target.u, s.target.v, *s.target.q.as_array()] for s in samples]),
            np.array([s.class_id for s in samples], dtype=np.int64),
            np.array([s.occlusion_fraction for s in samples]),
        )


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_trans_px: list[float] = field(default_factory=list)
    val_trans_px: list[float] = field(default_factory=list)
    train_rot_deg: list[float] = field(default_factory=list)
    val_rot_deg: list[float] = field(default_factory=list)
    train_quat_loss: list[float] = field(default_factory=list)
    val_quat_loss: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epoch)

    def append(self, **row) -> None:
        for k, v in row.items():
            getattr(self, k).append(v)

    def rows(self):
        for i in range(len(self)):
            yield {c: getattr(self, c)[i] for c in CURVE_COLUMNS}

    def to_json(self) -> dict:
        return asdict(self)


def write_curves_csv(history: History, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for row in history.rows():
            w.writerow([row["epoch"]] + [f"{row[c]:.9g}" for c in CURVE_COLUMNS[1:]])


def orientation_errors(q_gt: np.ndarray, q_pred: np.ndarray, class_ids: np.ndarray,
                       symmetries: Sequence[SymmetrySpec] | None) -> np.ndarray:
    out = np.empty(len(q_gt))
    for i, (a, b, c) in enumerate(zip(q_gt, q_pred, class_ids)):
        spec = symmetries[c] if symmetries is not None else SymmetrySpec.none()
        out[i] = symmetry_aware_error(Quaternion.from_array(a), Quaternion.from_array(b), spec)
    return out


def batch_metrics(pred: np.ndarray, targets: np.ndarray, class_ids: np.ndarray, crop_size: int, alpha: float,
                  symmetries: Sequence[SymmetrySpec] | None) -> dict[str, float]:
    """Mean loss, quaternion loss, translation error (px) and orientation error (deg)."""
    pred = pred.astype(float)
    d = pred - targets
    dxy = np.sum(d[:, :2] ** 2, axis=1)
    dq = np.sum(d[:, 2:] ** 2, axis=1)
    return {
        "loss": float(np.mean(alpha * dxy + (1 - alpha) * dq)),
        "quat_loss": float(np.mean(dq)),
        "trans_px": float(np.mean(np.sqrt(dxy) * crop_size / 2.0)),
        "rot_deg": float(np.mean(orientation_errors(targets[:, 2:], pred[:, 2:], class_ids, symmetries))),
    }


def augment_batch(x: np.ndarray, targets: np.ndarray, class_ids: np.ndarray, rng: np.random.Generator,
                  shift: int, rotate_deg: float, symmetries: Sequence[SymmetrySpec] | None = None,
                  canonicalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Re-jitter and rotate prepared crops, updating targets to match.

    ``x`` holds network inputs in [-1, 1] (NHWC). Everything outside the object
    is focus red, so the exposed border is filled with red. Rotating about the
    object center by phi maps the orientation to Rz(phi) * q, the same relation
    :func:`pose6d.synth.compose.rotate_augment` uses for whole frames.
    """
    n, size = x.shape[0], x.shape[1]
    red = (1.0, -1.0, -1.0)
    out = np.empty_like(x)
    t = targets.copy()
    ys, xs = np.mgrid[0:size, 0:size].astype(float)
    half = np.radians(rotate_deg)
    for i in range(n):
        ox, oy = size // 2 + targets[i, 0] * size / 2, size // 2 + targets[i, 1] * size / 2
        d = rng.integers(-shift, shift + 1, size=2) if shift > 0 else np.zeros(2, int)
        phi = float(rng.uniform(-half, half)) if rotate_deg > 0 else 0.0
        ca, sa = np.cos(phi), np.sin(phi)
        dx, dy = xs - (ox + d[0]), ys - (oy + d[1])
        coords = np.stack([-sa * dx + ca * dy + oy, ca * dx + sa * dy + ox])
        for c in range(x.shape[3]):
            out[i, ..., c] = ndimage.map_coordinates(x[i, ..., c], coords, order=1, mode="constant", cval=red[c])
        t[i, 0] += 2.0 * d[0] / size
        t[i, 1] += 2.0 * d[1] / size
        if rotate_deg > 0:
            q = Quaternion.from_axis_angle((0.0, 0.0, 1.0), phi) * Quaternion.from_array(targets[i, 2:])
            spec = symmetries[class_ids[i]] if symmetries is not None and canonicalize else SymmetrySpec.none()
            t[i, 2:] = canonicalize_symmetry(q, spec).as_array()
    return out, t


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step size used throughout 1-based ``epoch``."""
    if config.lr_schedule == "cosine":
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))
    return config.lr


def train(
    train_set: SampleArrays,
    val_set: SampleArrays | None,
    spec: ArchitectureSpec,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    symmetries: Sequence[SymmetrySpec] | None = None,
    init: NetworkParams | None = None,
    on_epoch: Callable[[int, dict], None] | None = None,
) -> tuple[NetworkParams, History]:
    """Train ``spec`` on ``train_set``; validation metrics are recorded per epoch.

    Deterministic for a fixed seed when BLAS runs single-threaded.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    dtype = np.dtype(config.dtype).type
    params = init if init is not None else build_architecture(
        spec, train_set.images.shape[1:], seed=seed, dtype=dtype)
    rng = np.random.default_rng([seed, 0x5EED])
    x_train = prepare_input(train_set.images, dtype)
    t_train = train_set.targets.astype(dtype)
    x_val = prepare_input(val_set.images, dtype) if val_set is not None and len(val_set) else None
    history = History()
    n = len(train_set)
    augment = config.augment_shift > 0 or config.augment_rotation_deg > 0
    targets_used = train_set.targets.astype(float)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        lr = learning_rate(config, epoch)
        preds = np.empty((n, 6))
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, tb = x_train[idx], t_train[idx]
            if augment:
                xb, tb = augment_batch(xb, tb, train_set.class_ids[idx], rng, config.augment_shift,
                                       config.augment_rotation_deg, symmetries, config.canonicalize_targets)
                tb = tb.astype(dtype)
                targets_used[idx] = tb
            value, grads, pred = loss_and_grads(params, xb, tb, train_set.class_ids[idx], config.alpha)
            adam_step(params, grads, lr, config.beta1, config.beta2, config.eps)
            preds[idx] = pred
            total += value * len(idx)
        tm = batch_metrics(preds, targets_used, train_set.class_ids, train_set.crop_size, config.alpha,
                           symmetries)
        row = {"epoch": epoch, "train_loss": total / n, "train_trans_px": tm["trans_px"],
               "train_rot_deg": tm["rot_deg"], "train_quat_loss": tm["quat_loss"]}
        if x_val is not None:
            vp = predict(params, x_val, val_set.class_ids)
            vm = batch_metrics(vp, val_set.targets, val_set.class_ids, val_set.crop_size, config.alpha, symmetries)
            row.update(val_loss=vm["loss"], val_trans_px=vm["trans_px"], val_rot_deg=vm["rot_deg"],
                       val_quat_loss=vm["quat_loss"])
        else:
            row.update(val_loss=float("nan"), val_trans_px=float("nan"), val_rot_deg=float("nan"),
                       val_quat_loss=float("nan"))
        history.append(**row)
        log.debug("epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, row)
    return params, history


def evaluate(params: NetworkParams, data: SampleArrays, alpha: float = 0.7,
             symmetries: Sequence[SymmetrySpec] | None = None) -> tuple[np.ndarray, dict[str, float]]:
    """Predictions (N, 6) and aggregate metrics on ``data``."""
    pred = predict(params, prepare_input(data.images, params.dtype.type), data.class_ids).astype(float)
    return pred, batch_metrics(pred, data.targets, data.class_ids, data.crop_size, alpha, symmetries)
