"""Generalized-ICP (plane-to-plane) refinement of a model pose against a scene cloud."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from pose6d.geometry import Quaternion, RigidTransform, normalize
from pose6d.icp.cloud import NeighborIndex, PointCloud, median_spacing

MAX_HALVINGS = 8


@dataclass(frozen=True)
class GicpConfig:
    max_iterations: int = 50
    max_correspondence_distance: Optional[float] = None  # None: 2x median scene spacing
    transform_epsilon: float = 1e-8
    k_neighbors: int = 10
    plane_epsilon: float = 1e-3
    correspondence: str = "nearest"  # "nearest" | "index" (point i matches point i)

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.k_neighbors < 1:
            raise ValueError("max_iterations and k_neighbors must be positive")
        if self.transform_epsilon <= 0 or self.plane_epsilon <= 0:
            raise ValueError("transform_epsilon and plane_epsilon must be positive")
        if self.max_correspondence_distance is not None and self.max_correspondence_distance <= 0:
            raise ValueError("max_correspondence_distance must be positive")
        if self.correspondence not in ("nearest", "index"):
            raise ValueError(f"unknown correspondence mode {self.correspondence!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "GicpConfig":
        return cls(**d)


class GicpResult(NamedTuple):
    transform: RigidTransform
    cost: float
    iterations: int


def _skew(v: np.ndarray) -> np.ndarray:
    """Batch of cross-product matrices, (N, 3) -> (N, 3, 3)."""
    z = np.zeros(len(v))
    return np.stack([
        np.stack([z, -v[:, 2], v[:, 1]], axis=1),
        np.stack([v[:, 2], z, -v[:, 0]], axis=1),
        np.stack([-v[:, 1], v[:, 0], z], axis=1),
    ], axis=1)


def _cost(q: Quaternion, t: np.ndarray, model_pts, model_cov, scene_pts, scene_cov) -> tuple[float, np.ndarray, np.ndarray]:
    r = q.to_matrix()
    p = model_pts @ r.T + t
    d = scene_pts - p
    w = np.linalg.inv(scene_cov + r @ model_cov @ r.T)
    return float(np.einsum("ni,nij,nj->", d, w, d)), d, w


def _apply_update(q: Quaternion, t: np.ndarray, x: np.ndarray) -> tuple[Quaternion, np.ndarray]:
    """Left-multiply the small motion x = (omega, delta)."""
    dq = Quaternion.from_rotvec(x[:3])
    return normalize(dq * q), dq.rotate(t) + x[3:]


def gicp_refine(model: PointCloud, scene: PointCloud, initial: RigidTransform, config: GicpConfig = GicpConfig(),
                callback: Callable[[int, RigidTransform, float], None] | None = None) -> GicpResult:
    """Refine ``initial`` (model frame -> scene frame) by Generalized-ICP.

    Each iteration matches every transformed model point to its nearest scene
    point within the correspondence distance, then takes one Gauss-Newton
    step on the summed Mahalanobis residuals with step halving if the cost
    under those correspondences rises.
    """
    if len(model) == 0 or len(scene) == 0:
        raise ValueError("both clouds must be nonempty")
    if model.covariances is None or scene.covariances is None:
        raise ValueError("both clouds need covariances (see estimate_covariances)")
    if config.correspondence == "index" and len(model) != len(scene):
        raise ValueError("index correspondence needs clouds of equal size")
    max_dist = config.max_correspondence_distance
    if max_dist is None and config.correspondence == "nearest":
        max_dist = 2.0 * median_spacing(scene.points)
    index = NeighborIndex(scene.points) if config.correspondence == "nearest" else None

    q = normalize(initial.rotation)
    t = initial.t.copy()
    cost = float("nan")
    it = 0
    for it in range(1, config.max_iterations + 1):
        if index is not None:
            p = model.transformed(RigidTransform(q, tuple(t))).points
            nn, dist = index.nearest_many(p)
            keep = dist <= max_dist
            if not keep.any():
                raise ValueError(f"no overlap: no model point has a scene point within {max_dist:.6g} m")
            mi, si = np.nonzero(keep)[0], nn[keep]
        else:
            mi = si = np.arange(len(model))
        mp, mc = model.points[mi], model.covariances[mi]
        sp, sc = scene.points[si], scene.covariances[si]
        cost, d, w = _cost(q, t, mp, mc, sp, sc)

        p = mp @ q.to_matrix().T + t
        # d(x) ~= d + [p]x omega - delta
        jac = np.concatenate([_skew(p), np.broadcast_to(-np.eye(3), (len(p), 3, 3))], axis=2)
        h = np.einsum("nki,nkl,nlj->ij", jac, w, jac)
        g = np.einsum("nki,nkl,nl->i", jac, w, d)
        cond = np.linalg.cond(h)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(
                f"singular normal equations at iteration {it} (condition number {cond:.3g}, "
                f"{len(mi)} correspondences); the clouds may be degenerate, e.g. planar or collinear")
        x = -np.linalg.solve(h, g)

        step, accepted = 1.0, False
        for _ in range(MAX_HALVINGS + 1):
            q_new, t_new = _apply_update(q, t, step * x)
            new_cost = _cost(q_new, t_new, mp, mc, sp, sc)[0]
            if new_cost <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        q, t, cost = q_new, t_new, new_cost
        if callback is not None:
            callback(it, RigidTransform(q, tuple(t)), cost)
        if np.linalg.norm(step * x) < config.transform_epsilon:
            break
    return GicpResult(RigidTransform(q, tuple(t)), cost, it)
