"""Procedural toy objects standing in for scanned turntable objects.

Each object is a triangle soup made of one or more convex parts. Faces carry
flat colors chosen so that orientation is visible from the image, except for
the dumbbell, which is rotationally symmetric about its bar up to a small
label patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from pose6d.geometry import SymmetrySpec

# no reds: red is reserved for the focus encoding
PALETTE = np.array([
    [40, 200, 60], [30, 90, 230], [240, 220, 40], [40, 210, 220], [200, 60, 220],
    [235, 235, 235], [110, 110, 110], [250, 150, 30], [20, 120, 40], [150, 100, 240],
    [140, 230, 150], [90, 60, 30],
], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class ToyObject:
    name: str
    vertices: np.ndarray  # (V, 3) object frame, meters
    faces: np.ndarray  # (F, 3) vertex indices, counter-clockwise seen from outside
    face_colors: np.ndarray  # (F, 3) uint8
    symmetry: SymmetrySpec = SymmetrySpec()

    @property
    def radius(self) -> float:
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform surface samples, (n, 3) in the object frame."""
        areas = self.face_areas()
        f = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        v = self.vertices[self.faces[f]]
        return (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]


def _hull_part(points: np.ndarray, colors: np.ndarray, rng: np.random.Generator | None = None):
    """Triangulated convex hull with one color per planar facet.

    ``colors`` is cycled over facets in a deterministic order.
    """
    hull = ConvexHull(points)
    faces = hull.simplices.copy()
    centroid = points.mean(axis=0)
    # orient outward
    for i, (a, b, c) in enumerate(faces):
        n = np.cross(points[b] - points[a], points[c] - points[a])
        if np.dot(n, points[a] - centroid) < 0:
            faces[i] = (a, c, b)
    planes = np.round(hull.equations, 6)
    _, plane_id = np.unique(planes, axis=0, return_inverse=True)
    plane_id = plane_id.reshape(-1)
    face_colors = colors[plane_id % len(colors)]
    return points, faces, face_colors


def _merge(parts):
    verts, faces, colors = [], [], []
    offset = 0
    for v, f, c in parts:
        verts.append(v)
        faces.append(f + offset)
        colors.append(c)
        offset += len(v)
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(colors)


def make_box(half_extents=(0.015, 0.010, 0.007), colors=None, name="box") -> ToyObject:
    hx, hy, hz = half_extents
    pts = np.array([[sx * hx, sy * hy, sz * hz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
    v, f, c = _hull_part(pts, PALETTE[:6] if colors is None else np.asarray(colors, np.uint8))
    return ToyObject(name, v, f, c)


def make_wedge(name="wedge") -> ToyObject:
    tri = np.array([[-0.014, -0.010], [0.016, -0.008], [-0.004, 0.013]])
    pts = np.array([[x, y, z] for x, y in tri for z in (-0.008, 0.008)])
    v, f, c = _hull_part(pts, PALETTE[[3, 4, 7, 8, 1]])
    return ToyObject(name, v, f, c)


def make_gem(seed: int = 3, n_points: int = 12, name="gem") -> ToyObject:
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n_points, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pts = d * np.array([0.017, 0.012, 0.009])
    v, f, c = _hull_part(pts, PALETTE[[0, 1, 2, 5, 9, 10, 11, 3]])
    return ToyObject(name, v, f, c)


def _cylinder(radius: float, z0: float, z1: float, sides: int) -> np.ndarray:
    a = 2 * np.pi * (np.arange(sides) + 0.5) / sides
    ring = np.stack([radius * np.cos(a), radius * np.sin(a)], axis=1)
    return np.concatenate([np.c_[ring, np.full(sides, z0)], np.c_[ring, np.full(sides, z1)]])


def make_dumbbell(label: bool = True, sides: int = 16, name="dumbbell") -> ToyObject:
    """Two plates on a bar along the object z axis.

    Continuous symmetry about z, broken only by an optional small label on
    one plate rim.
    """
    plate = np.array([[70, 70, 80]], np.uint8)
    bar = np.array([[200, 200, 210]], np.uint8)
    parts = [
        _hull_part(_cylinder(0.011, -0.015, -0.009, sides), plate),
        _hull_part(_cylinder(0.004, -0.009, 0.009, sides), bar),
        _hull_part(_cylinder(0.011, 0.009, 0.015, sides), plate),
    ]
    v, f, c = _merge(parts)
    c = c.copy()
    if label:
        # tint the rim facets of the top plate that face +x
        n = ToyObject(name, v, f, c).face_normals()
        centers = v[f].mean(axis=1)
        rim = (np.abs(n[:, 2]) < 0.5) & (centers[:, 2] > 0.009) & (n[:, 0] > 0.9)
        c[rim] = (240, 220, 40)
    return ToyObject(name, v, f, c, SymmetrySpec.continuous((0.0, 0.0, 1.0)))


def catalog() -> dict[str, ToyObject]:
    return {
        "box": make_box(),
        "wedge": make_wedge(),
        "gem": make_gem(),
        "slab": make_box((0.016, 0.013, 0.004), PALETTE[[9, 2, 5, 0, 10, 7]], name="slab"),
        "prism6": _prism6(),
        "dumbbell": make_dumbbell(),
        "dumbbell_plain": make_dumbbell(label=False, name="dumbbell_plain"),
    }


def _prism6() -> ToyObject:
    v, f, c = _hull_part(_cylinder(0.012, -0.009, 0.011, 6) * [1.0, 0.8, 1.0], PALETTE[[1, 2, 4, 5, 7, 8, 10, 11]])
    return ToyObject("prism6", v, f, c)


def family(name: str, count: int, seed: int = 0) -> list[ToyObject]:
    """Instances of one object category with varied proportions and colors."""
    rng = np.random.default_rng([seed, 0xFA])
    out = []
    base = np.array([0.015, 0.010, 0.007])
    for i in range(count):
        ext = base * rng.uniform(0.8, 1.2, size=3)
        cols = PALETTE[:6].astype(int) + rng.integers(-25, 26, size=(6, 3))
        out.append(make_box(tuple(ext), np.clip(cols, 0, 255), name=f"{name}{i}"))
    return out


DEFAULT_OBJECTS = ("box", "wedge", "gem")


def get_objects(names) -> list[ToyObject]:
    cat = catalog()
    unknown = [n for n in names if n not in cat]
    if unknown:
        raise KeyError(f"unknown toy objects {unknown}; available: {sorted(cat)}")
    return [cat[n] for n in names]
