"""Pose error metrics and occlusion-binned statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from pose6d.geometry import Pose5D, Quaternion, RigidTransform, SymmetrySpec, symmetry_aware_error

MAX_OCCLUSION = 0.5


@dataclass(frozen=True)
class EvalRecord:
    sample_id: int
    class_id: int
    pred: Pose5D
    target: Pose5D
    occlusion_fraction: float
    refined: Optional[RigidTransform] = None
    truth: Optional[RigidTransform] = None


def translation_error_px(pred: Pose5D, target: Pose5D, crop_size: int) -> float:
    return math.hypot(pred.u - target.u, pred.v - target.v) * crop_size / 2.0


def orientation_error_deg(pred: Pose5D, target: Pose5D, spec: SymmetrySpec = SymmetrySpec()) -> float:
    return symmetry_aware_error(target.q, pred.q, spec)


def records_from_arrays(pred: np.ndarray, targets: np.ndarray, class_ids: np.ndarray, occlusion: np.ndarray,
                        sample_ids: Sequence[int] | None = None) -> list[EvalRecord]:
    """Wrap (N, 6) prediction and target rows as records."""
    ids = range(len(pred)) if sample_ids is None else sample_ids
    out = []
    for i, p, t, c, o in zip(ids, pred, targets, class_ids, occlusion):
        out.append(EvalRecord(int(i), int(c), Pose5D(float(p[0]), float(p[1]), Quaternion.from_array(p[2:])),
                              Pose5D(float(t[0]), float(t[1]), Quaternion.from_array(t[2:])), float(o)))
    return out


def record_errors(records: Sequence[EvalRecord], crop_size: int,
                  symmetries: Sequence[SymmetrySpec] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-record translation (px) and orientation (deg) errors."""
    trans = np.array([translation_error_px(r.pred, r.target, crop_size) for r in records])
    rot = np.array([orientation_error_deg(r.pred, r.target,
                                          symmetries[r.class_id] if symmetries is not None else SymmetrySpec())
                    for r in records])
    return trans, rot


@dataclass(frozen=True)
class BinnedStats:
    edges: tuple[float, ...]
    counts: tuple[int, ...]
    trans_px: tuple[Optional[float], ...]  # None for empty bins
    rot_deg: tuple[Optional[float], ...]

    @property
    def bin_count(self) -> int:
        return len(self.counts)

    def rows(self) -> list[dict]:
        return [{"lo": self.edges[i], "hi": self.edges[i + 1], "count": self.counts[i],
                 "trans_px": self.trans_px[i], "rot_deg": self.rot_deg[i]} for i in range(self.bin_count)]

    def to_json(self) -> dict:
        return {"edges": list(self.edges), "counts": list(self.counts), "trans_px": list(self.trans_px),
                "rot_deg": list(self.rot_deg)}


def occlusion_bin(fraction: np.ndarray, bin_count: int) -> np.ndarray:
    """Bin index of each fraction; bins are [lo, hi) except the last, which also holds 0.5."""
    idx = np.floor(np.asarray(fraction, float) / MAX_OCCLUSION * bin_count).astype(int)
    return np.clip(idx, 0, bin_count - 1)


def bin_by_occlusion(records: Sequence[EvalRecord], crop_size: int, symmetries: Sequence[SymmetrySpec] | None = None,
                     bin_count: int = 5) -> BinnedStats:
    if not records:
        raise ValueError("no records to bin")
    if bin_count < 1:
        raise ValueError("bin_count must be >= 1")
    trans, rot = record_errors(records, crop_size, symmetries)
    idx = occlusion_bin([r.occlusion_fraction for r in records], bin_count)
    counts, tm, rm = [], [], []
    for b in range(bin_count):
        sel = idx == b
        n = int(sel.sum())
        counts.append(n)
        tm.append(float(trans[sel].mean()) if n else None)
        rm.append(float(rot[sel].mean()) if n else None)
    edges = tuple(float(e) for e in np.linspace(0.0, MAX_OCCLUSION, bin_count + 1))
    return BinnedStats(edges, tuple(counts), tuple(tm), tuple(rm))
