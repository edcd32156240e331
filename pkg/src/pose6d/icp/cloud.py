"""Point clouds: segmentation back-projection, neighbor search, covariances and PLY files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from pose6d.geometry import CameraIntrinsics, RigidTransform

# upper-triangle order used in PLY files
_TRIU = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
_COV_NAMES = ("c00", "c01", "c02", "c11", "c12", "c22")


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    covariances: Optional[np.ndarray] = None  # (N, 3, 3)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.covariances is not None:
            cov = np.asarray(self.covariances, dtype=float)
            if cov.shape != (len(pts), 3, 3):
                raise ValueError(f"expected covariances of shape {(len(pts), 3, 3)}, got {cov.shape}")
            if not np.allclose(cov, cov.transpose(0, 2, 1), atol=1e-12):
                raise ValueError("covariances must be symmetric")
            object.__setattr__(self, "covariances", cov)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, transform: RigidTransform) -> "PointCloud":
        r = transform.rotation.to_matrix()
        cov = None if self.covariances is None else r @ self.covariances @ r.T
        return PointCloud(transform.apply(self.points), cov)


def segment_to_cloud(mask: np.ndarray, depth: np.ndarray, intrinsics: CameraIntrinsics,
                     origin: tuple[int, int] = (0, 0)) -> PointCloud:
    """Back-project masked pixels with positive depth.

    ``origin`` is the full-image (x, y) of pixel (0, 0), for masks and depth
    maps that are crops of a larger frame.
    """
    mask = np.asarray(mask, bool)
    depth = np.asarray(depth, float)
    if mask.shape != depth.shape:
        raise ValueError(f"mask shape {mask.shape} != depth shape {depth.shape}")
    rows, cols = np.nonzero(mask & (depth > 0) & np.isfinite(depth))
    if rows.size == 0:
        raise ValueError("empty segment: no masked pixel has valid depth")
    d = depth[rows, cols]
    x = (cols + origin[0] - intrinsics.cx) * d / intrinsics.fx
    y = (rows + origin[1] - intrinsics.cy) * d / intrinsics.fy
    return PointCloud(np.stack([x, y, d], axis=1))


class NeighborIndex:
    """Exact Euclidean nearest neighbors; ties go to the lowest point index."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("cannot index an empty cloud")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, query) -> tuple[int, float]:
        idx, dist = self.nearest_many(np.asarray(query, float).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def nearest_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        k = min(len(self.points), 4)
        dist, idx = self._tree.query(q, k=k)
        dist, idx = dist.reshape(len(q), k), idx.reshape(len(q), k)
        # exact distances so the tie test does not depend on tree arithmetic
        exact = np.linalg.norm(self.points[idx] - q[:, None, :], axis=2)
        best = exact.min(axis=1)
        out = np.where(exact == best[:, None], idx, len(self.points)).min(axis=1)
        # all k candidates tied: more equidistant points may exist beyond them
        full = np.nonzero(np.all(exact == best[:, None], axis=1) & (k < len(self.points)))[0]
        for i in full:
            cand = np.array(self._tree.query_ball_point(q[i], best[i] * (1 + 1e-12) + 1e-300), dtype=int)
            d = np.linalg.norm(self.points[cand] - q[i], axis=1)
            out[i] = cand[d == d.min()].min()
            best[i] = d.min()
        return out, best

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the ``k`` nearest points, closest first."""
        if k > len(self.points):
            raise ValueError(f"k={k} exceeds cloud size {len(self.points)}")
        dist, idx = self._tree.query(np.asarray(queries, float).reshape(-1, 3), k=k)
        return idx.reshape(-1, k), dist.reshape(-1, k)


def median_spacing(points: np.ndarray) -> float:
    """Median distance from each point to its nearest other point."""
    _, dist = NeighborIndex(points).knn(points, 2)
    return float(np.median(dist[:, 1]))


def estimate_covariances(cloud: PointCloud, k_neighbors: int = 10, plane_epsilon: float = 1e-3) -> PointCloud:
    """Plane-like covariances from the k-neighborhood scatter of each point.

    The scatter's eigenvectors are kept and its eigenvalues replaced by
    (plane_epsilon, 1, 1), smallest first, so each point is modelled as a
    small planar patch.
    """
    if k_neighbors < 3:
        raise ValueError("k_neighbors must be >= 3")
    if len(cloud) <= k_neighbors:
        raise ValueError(f"need more than k_neighbors={k_neighbors} points, got {len(cloud)}")
    pts = cloud.points
    idx, _ = NeighborIndex(pts).knn(pts, k_neighbors)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
    _, vecs = np.linalg.eigh(scatter)  # ascending eigenvalues
    vals = np.array([plane_epsilon, 1.0, 1.0])
    cov = np.einsum("nij,j,nkj->nik", vecs, vals, vecs)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return PointCloud(pts, cov)


def write_ply(cloud: PointCloud, path: Path) -> None:
    has_cov = cloud.covariances is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z"]
    if has_cov:
        lines += [f"property double {n}" for n in _COV_NAMES]
    lines.append("end_header")
    for i, p in enumerate(cloud.points):
        vals = list(p)
        if has_cov:
            vals += [cloud.covariances[i][a, b] for a, b in _TRIU]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path: Path) -> PointCloud:
    """Read an ASCII PLY vertex list (x y z, optionally the six covariance terms)."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, props, i = None, [], 1
    while i < len(text):
        parts = text[i].split()
        i += 1
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise ValueError(f"{path}: unsupported element {parts[1]!r}")
            n = int(parts[2])
        elif parts[0] == "property":
            props.append(parts[-1])
        elif parts[0] == "end_header":
            break
    if n is None or props[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: missing vertex element or x/y/z properties")
    data = np.array([[float(v) for v in line.split()] for line in text[i:i + n]], dtype=float).reshape(n, len(props))
    cov = None
    if all(c in props for c in _COV_NAMES):
        cov = np.zeros((n, 3, 3))
        for name, (a, b) in zip(_COV_NAMES, _TRIU):
            cov[:, a, b] = cov[:, b, a] = data[:, props.index(name)]
    return PointCloud(data[:, :3], cov)
