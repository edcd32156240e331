"""Quaternion algebra, symmetry handling and pinhole lifting.

Quaternions are stored scalar-first, ``(w, x, y, z)``. Composition ``a * b``
applies ``b`` first, then ``a`` (same as rotation-matrix products). Object
symmetries act on the right: if ``s`` is a symmetry rotation expressed in the
object frame, the poses ``q`` and ``q * s`` look identical.

Angles are radians internally; functions whose names end in ``_deg`` or that
report errors return degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_DEGENERATE_NORM = 1e-12
# ties between discrete-symmetry candidates are resolved lexicographically
_TIE_TOL = 1e-12


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Quaternion":
        w, x, y, z = (float(v) for v in a)
        return cls(w, x, y, z)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n < _DEGENERATE_NORM:
            raise ValueError("rotation axis has zero length")
        axis = axis / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), *(s * axis))

    @classmethod
    def from_rotvec(cls, v: Sequence[float]) -> "Quaternion":
        v = np.asarray(v, dtype=float)
        angle = float(np.linalg.norm(v))
        # sin(a/2)/a, with its Taylor series where the quotient loses precision
        s = math.sin(0.5 * angle) / angle if angle > 1e-6 else 0.5 - angle * angle / 48.0
        return cls(math.cos(0.5 * angle), *(s * v))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Quaternion":
        m = np.asarray(m, dtype=float)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * math.sqrt(tr + 1.0)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return normalize(cls(*q))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def inverse(self) -> "Quaternion":
        n2 = self.norm() ** 2
        return Quaternion(self.w / n2, -self.x / n2, -self.y / n2, -self.z / n2)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def to_matrix(self) -> np.ndarray:
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.to_matrix().T

    def angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        return 2.0 * math.atan2(float(np.linalg.norm(self.vec)), abs(self.w))

    def allclose(self, other: "Quaternion", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.as_array(), other.as_array(), atol=atol, rtol=0.0))


def _unit_axis(axis: Sequence[float]) -> np.ndarray:
    a = np.asarray(axis, dtype=float)
    n = np.linalg.norm(a)
    if n < _DEGENERATE_NORM:
        raise ValueError("symmetry axis has zero length")
    return a / n


@dataclass(frozen=True)
class SymmetrySpec:
    """Rotational symmetry of an object about one object-frame axis.

    ``kind`` is ``"none"``, ``"discrete"`` (``order`` >= 2 copies per turn) or
    ``"continuous"``.
    """

    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    kind: str = "none"
    order: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("none", "discrete", "continuous"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        a = np.asarray(self.axis, dtype=float)
        if a.shape != (3,):
            raise ValueError("symmetry axis must be a 3-vector")
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("symmetry axis must have unit length")
        if self.kind == "discrete" and self.order < 2:
            raise ValueError("discrete symmetry order must be >= 2")
        object.__setattr__(self, "axis", tuple(float(v) for v in a))

    @classmethod
    def none(cls) -> "SymmetrySpec":
        return cls()

    @classmethod
    def continuous(cls, axis: Sequence[float]) -> "SymmetrySpec":
        return cls(tuple(_unit_axis(axis)), "continuous", 1)

    @classmethod
    def discrete(cls, axis: Sequence[float], order: int) -> "SymmetrySpec":
        return cls(tuple(_unit_axis(axis)), "discrete", int(order))

    def group_element(self, k: int) -> Quaternion:
        """k-th rotation of a discrete group; identity for other kinds."""
        if self.kind != "discrete":
            return Quaternion.identity()
        return Quaternion.from_axis_angle(self.axis, 2.0 * math.pi * k / self.order)

    def to_json(self) -> dict:
        return {"axis": list(self.axis), "kind": self.kind, "order": self.order}

    @classmethod
    def from_json(cls, d: dict) -> "SymmetrySpec":
        kind = d.get("kind", "none")
        axis = d.get("axis", [0.0, 0.0, 1.0])
        if kind == "none":
            return cls(tuple(_unit_axis(axis)), "none", 1)
        if kind == "continuous":
            return cls.continuous(axis)
        return cls.discrete(axis, int(d["order"]))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def project(self, p: np.ndarray) -> np.ndarray:
        """Project camera-frame points (..., 3) to pixel coordinates (..., 2)."""
        p = np.asarray(p, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)

    def back_project(self, px: float, py: float, depth: float) -> np.ndarray:
        return np.array([(px - self.cx) * depth / self.fx, (py - self.cy) * depth / self.fy, depth])

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_json(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class Pose5D:
    """Crop-relative translation ``(u, v)`` in [-1, 1] plus orientation."""

    u: float
    v: float
    q: Quaternion

    def validate(self) -> None:
        if not (-1.0 <= self.u <= 1.0 and -1.0 <= self.v <= 1.0):
            raise ValueError(f"crop translation ({self.u}, {self.v}) outside [-1, 1]")
        if abs(self.q.norm() - 1.0) > 1e-6:
            raise ValueError("pose quaternion is not unit norm")

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])

    def to_json(self) -> dict:
        return {"u": self.u, "v": self.v, "q": list(self.q.as_array())}

    @classmethod
    def from_json(cls, d: dict) -> "Pose5D":
        return cls(float(d["u"]), float(d["v"]), Quaternion.from_array(d["q"]))


@dataclass(frozen=True)
class RigidTransform:
    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if abs(self.rotation.norm() - 1.0) > 1e-6:
            raise ValueError("rotation quaternion is not unit norm")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.rotation.rotate(points) + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation * other.rotation, tuple(self.apply(other.t)))

    def inverse(self) -> "RigidTransform":
        r = self.rotation.conjugate()
        return RigidTransform(r, tuple(-r.rotate(self.t)))

    def to_json(self) -> dict:
        return {"rotation": list(self.rotation.as_array()), "translation": list(self.translation)}

    @classmethod
    def from_json(cls, d: dict) -> "RigidTransform":
        return cls(Quaternion.from_array(d["rotation"]), tuple(d["translation"]))


def normalize(q: Quaternion) -> Quaternion:
    n = q.norm()
    if n <= _DEGENERATE_NORM:
        raise ValueError("degenerate quaternion")
    return Quaternion(q.w / n, q.x / n, q.y / n, q.z / n)


def canonicalize_hemisphere(q: Quaternion) -> Quaternion:
    return q if q.w >= 0 else -q


def swing_twist(q: Quaternion, axis: Sequence[float]) -> tuple[Quaternion, Quaternion]:
    """Split ``q`` into ``swing * twist`` where ``twist`` rotates about ``axis``.

    The twist is the normalized projection of ``q`` onto the (w, axis) plane.
    When that projection vanishes (a half-turn about an axis perpendicular to
    ``axis``) the twist is taken to be the identity.
    """
    a = _unit_axis(axis)
    p = float(np.dot(q.vec, a))
    tw = Quaternion(q.w, *(p * a))
    n = tw.norm()
    if n < 1e-12:
        twist = Quaternion.identity()
    else:
        twist = Quaternion(tw.w / n, tw.x / n, tw.y / n, tw.z / n)
    swing = q * twist.conjugate()
    return swing, twist


def twist_angle(q: Quaternion, axis: Sequence[float]) -> float:
    """Signed rotation angle of the twist of ``q`` about ``axis`` (radians)."""
    a = _unit_axis(axis)
    return 2.0 * math.atan2(float(np.dot(q.vec, a)), q.w)


def _lex_greater(a: Quaternion, b: Quaternion) -> bool:
    """Tolerant lexicographic (w, x, y, z) comparison."""
    for ca, cb in zip(a.as_array(), b.as_array()):
        if ca > cb + _TIE_TOL:
            return True
        if ca < cb - _TIE_TOL:
            return False
    return False


def _perpendicular(axis: np.ndarray) -> np.ndarray:
    ref = np.eye(3)[int(np.argmin(np.abs(axis)))]
    n = np.cross(axis, ref)
    return n / np.linalg.norm(n)


def canonicalize_symmetry(q: Quaternion, spec: SymmetrySpec) -> Quaternion:
    """Map every pose in the symmetry orbit of ``q`` to one representative."""
    if spec.kind == "none":
        return canonicalize_hemisphere(q)
    if spec.kind == "continuous":
        a = np.asarray(spec.axis)
        if math.hypot(q.w, float(np.dot(q.vec, a))) < 1e-12:
            # orbit of half-turns about axes perpendicular to the symmetry
            # axis; every member is a valid swing, so pin a fixed one
            return Quaternion(0.0, *_perpendicular(a))
        swing, _ = swing_twist(q, spec.axis)
        return canonicalize_hemisphere(normalize(swing))
    best = None
    for k in range(spec.order):
        c = q * spec.group_element(k)
        for cand in (c, -c):
            if best is None or _lex_greater(cand, best):
                best = cand
    if best.w < 0:
        # only reachable when w is within the tie tolerance of zero
        best = Quaternion(0.0, best.x, best.y, best.z)
    return best


def angular_distance(q1: Quaternion, q2: Quaternion) -> float:
    """Geodesic distance between two orientations, degrees in [0, 180]."""
    # equals 2*acos(|<q1, q2>|) but stays accurate near zero
    return math.degrees((q1.conjugate() * q2).angle())


def symmetry_aware_error(q_gt: Quaternion, q_pred: Quaternion, spec: SymmetrySpec) -> float:
    """Orientation error in degrees that ignores rotation the object cannot show.

    Continuous symmetries remove the error component about the symmetry axis:
    the twist angle of the relative rotation is extracted and rotated back out
    before measuring. Discrete symmetries take the smallest distance over the
    group.
    """
    if spec.kind == "none":
        return angular_distance(q_gt, q_pred)
    if spec.kind == "discrete":
        return min(angular_distance(q_gt * spec.group_element(k), q_pred) for k in range(spec.order))
    q_error = q_gt.conjugate() * q_pred
    psi = twist_angle(q_error, spec.axis)
    q_prime = Quaternion.from_axis_angle(spec.axis, -psi)
    residual = q_prime * q_error
    return math.degrees(residual.angle())


def sample_depth(depth: np.ndarray, px: float, py: float, window: int = 5) -> float:
    """Median of the positive depths in a ``window`` x ``window`` patch."""
    h, w = depth.shape
    cx, cy = int(round(px)), int(round(py))
    r = window // 2
    patch = depth[max(cy - r, 0):min(cy + r + 1, h), max(cx - r, 0):min(cx + r + 1, w)]
    valid = patch[np.isfinite(patch) & (patch > 0)]
    if valid.size == 0:
        raise ValueError("missing depth")
    return float(np.median(valid))


def lift_to_6d(
    pose: Pose5D,
    crop_center: Sequence[float],
    crop_size: int,
    depth_image: np.ndarray,
    intrinsics: CameraIntrinsics,
    depth_origin: Sequence[int] = (0, 0),
    window: int = 5,
) -> RigidTransform:
    """Back-project a crop-relative 5D pose to a camera-frame 6D pose.

    ``depth_origin`` is the full-image pixel (x, y) of ``depth_image[0, 0]``;
    leave it at zero for full-frame depth maps, set it to the crop corner when
    passing a depth crop.
    """
    pose.validate()
    half = crop_size / 2.0
    px = float(crop_center[0]) + pose.u * half
    py = float(crop_center[1]) + pose.v * half
    d = sample_depth(np.asarray(depth_image, dtype=float), px - depth_origin[0], py - depth_origin[1], window)
    return RigidTransform(pose.q, tuple(intrinsics.back_project(px, py, d)))


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    """Uniformly distributed unit quaternion."""
    v = rng.normal(size=4)
    return normalize(Quaternion(*v))
