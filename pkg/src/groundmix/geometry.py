"""Pinhole camera geometry, rotations and 3D boxes.

Conventions
-----------
Camera frame: x right, y down, z forward. Pixel coordinates are continuous
with the image spanning ``[0, W] x [0, H]``; pixel ``(i, j)`` covers
``[i, i+1) x [j, j+1)``.

A box frame has its height axis along local y (y down, like the camera), its
width along local x and its length along local z. ``Box3D.dims`` is
``(w, h, l)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateInput,
    IntersectionBehindCamera,
    NonPositiveDepth,
    RayParallelToPlane,
    ZeroCenter,
)

Vec3 = Tuple[float, float, float]

ROTATION_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_matrix(cls, K) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float).reshape(3, 3)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, sx: float, sy: float) -> "CameraIntrinsics":
        """Intrinsics after resizing the image by ``sx`` horizontally and ``sy`` vertically."""
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box ``(x1, y1, x2, y2)`` in pixels."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return max(0.0, self.x2 - self.x1)

    @property
    def height(self) -> float:
        return max(0.0, self.y2 - self.y1)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def intersection(self, other: "Box2D") -> Optional["Box2D"]:
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x2 <= x1 or y2 <= y1:
            return None
        return Box2D(x1, y1, x2, y2)

    def clip(self, width: float, height: float) -> Optional["Box2D"]:
        return self.intersection(Box2D(0.0, 0.0, float(width), float(height)))

    def scaled(self, sx: float, sy: float) -> "Box2D":
        return Box2D(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


def _as_vec3(v) -> Vec3:
    a = np.asarray(v, dtype=float).reshape(3)
    return (float(a[0]), float(a[1]), float(a[2]))


def _as_rot(R) -> Tuple[float, ...]:
    a = np.asarray(R, dtype=float).reshape(9)
    return tuple(float(x) for x in a)


@dataclass(frozen=True)
class GroundPlane:
    """Plane ``normal . p = offset`` in camera coordinates."""

    normal: Vec3
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "normal", _as_vec3(self.normal))
        object.__setattr__(self, "offset", float(self.offset))
        if abs(math.sqrt(sum(c * c for c in self.normal)) - 1.0) > ROTATION_TOL:
            raise ValueError(f"plane normal must be unit length, got {self.normal}")

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def signed_distance(self, p) -> float:
        return float(np.dot(self.n, np.asarray(p, dtype=float)) - self.offset)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in the camera frame.

    ``rotation`` is the egocentric rotation stored row-major as 9 floats; use
    :attr:`R` for the matrix. ``box2d`` is the (truncated) image box when known.
    """

    center: Vec3
    dims: Vec3
    rotation: Tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    category: int = 0
    track_id: Optional[int] = None
    score: Optional[float] = None
    box2d: Optional[Box2D] = field(default=None, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center))
        object.__setattr__(self, "dims", _as_vec3(self.dims))
        object.__setattr__(self, "rotation", _as_rot(self.rotation))
        object.__setattr__(self, "category", int(self.category))
        if self.track_id is not None:
            object.__setattr__(self, "track_id", int(self.track_id))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation).reshape(3, 3)

    @property
    def c(self) -> np.ndarray:
        return np.array(self.center)

    def replace(self, **changes) -> "Box3D":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# projection


def project(K: CameraIntrinsics, p) -> Tuple[float, float]:
    x, y, z = _as_vec3(p)
    if z <= 0:
        raise NonPositiveDepth(f"cannot project point with z={z}")
    return (K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def project_points(K: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project` for an ``(N, 3)`` array; no depth check."""
    pts = np.asarray(pts, dtype=float)
    u = K.fx * pts[:, 0] / pts[:, 2] + K.cx
    v = K.fy * pts[:, 1] / pts[:, 2] + K.cy
    return np.stack([u, v], axis=1)


def pixel_ray(K: CameraIntrinsics, px) -> np.ndarray:
    """Direction (with z = 1) of the ray through pixel ``px``."""
    u, v = px
    return np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])


def unproject_at_depth(K: CameraIntrinsics, px, z: float) -> Vec3:
    if z <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {z}")
    ray = pixel_ray(K, px)
    return _as_vec3(ray * z)


def unproject_to_plane(K: CameraIntrinsics, px, plane: GroundPlane) -> Vec3:
    """Intersect the viewing ray through ``px`` with ``plane``."""
    ray = pixel_ray(K, px)
    n = plane.n
    denom = float(n @ ray)
    if abs(denom) <= 1e-9:
        raise RayParallelToPlane(f"ray through {tuple(px)} is parallel to the plane")
    t = plane.offset / denom
    if t <= 0:
        raise IntersectionBehindCamera(f"ray through {tuple(px)} meets the plane behind the camera")
    return _as_vec3(ray * t)


# ---------------------------------------------------------------------------
# rotations


def is_rotation(R, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    ortho = np.max(np.abs(R.T @ R - np.eye(3)))
    return bool(ortho <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def gram_schmidt_rotation(v: Sequence[float]) -> np.ndarray:
    """Map a 6D vector (two stacked 3-vectors) to a rotation matrix.

    The first triple gives the first column after normalisation, the second
    triple is orthogonalised against it to give the second column, and the
    third column is their cross product.
    """
    v = np.asarray(v, dtype=float).reshape(6)
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= 1e-9:
        raise DegenerateInput("first 3-vector is zero")
    b1 = a1 / n1
    u2 = a2 - (b1 @ a2) * b1
    n2 = np.linalg.norm(u2)
    if n2 <= 1e-9:
        raise DegenerateInput("second 3-vector is parallel to the first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``axis`` must be a unit vector."""
    k = np.asarray(axis, dtype=float)
    Kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * Kx + (1.0 - math.cos(angle)) * (Kx @ Kx)


def ray_alignment(center) -> np.ndarray:
    """Rotation that takes the viewing ray to ``center`` onto the optical axis.

    Axis-angle form: axis ``ray x e_z`` (normalised), angle ``acos(ray . e_z)``.
    For a ray pointing straight backwards the axis is taken as ``e_x``.
    """
    c = np.asarray(center, dtype=float).reshape(3)
    norm = np.linalg.norm(c)
    if norm <= 0:
        raise ZeroCenter("object center coincides with the camera center")
    ray = c / norm
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(ray, ez)
    s = np.linalg.norm(axis)
    cos_a = float(np.clip(ray @ ez, -1.0, 1.0))
    if s < 1e-15:
        if cos_a > 0:
            return np.eye(3)
        return axis_angle_matrix(np.array([1.0, 0.0, 0.0]), math.pi)
    return axis_angle_matrix(axis / s, math.atan2(s, cos_a))


def egocentric_to_allocentric(R, center) -> np.ndarray:
    return ray_alignment(center) @ np.asarray(R, dtype=float)


def allocentric_to_egocentric(R, center) -> np.ndarray:
    return ray_alignment(center).T @ np.asarray(R, dtype=float)


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def single_angle_to_so3(yaw: float, ground_normal) -> np.ndarray:
    """Lift a yaw angle about the ground normal to a full rotation.

    Uses ``R = Rx(roll) @ Ry(pitch) @ Rz(yaw)`` where roll and pitch are solved
    so that the box z-axis (third column) equals ``ground_normal``:
    ``pitch = asin(n_x)``, ``roll = atan2(-n_y, n_z)``.
    """
    n = np.asarray(ground_normal, dtype=float).reshape(3)
    pitch = math.asin(float(np.clip(n[0], -1.0, 1.0)))
    roll = math.atan2(-n[1], n[2])
    return _rot_x(roll) @ _rot_y(pitch) @ _rot_z(yaw)


def rotation_about_optical_axis(phi: float) -> np.ndarray:
    return _rot_z(phi)


# ---------------------------------------------------------------------------
# boxes

# corner k has sign pattern (sx, sy, sz) with bits of k: sx = bit 2, sy = bit 1,
# sz = bit 0, 0 -> -1 and 1 -> +1, i.e. lexicographic over (x, y, z)
CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)

# corner index pairs that differ in exactly one sign
BOX_EDGES = tuple(
    (i, j) for i in range(8) for j in range(i + 1, 8) if bin(i ^ j).count("1") == 1
)


def box_corners(b: Box3D) -> np.ndarray:
    """The 8 corners as an ``(8, 3)`` array, ordered as :data:`CORNER_SIGNS`."""
    half = np.asarray(b.dims) / 2.0
    local = CORNER_SIGNS * half
    return local @ b.R.T + b.c


def _front_points(corners: np.ndarray, near: float = 1e-6) -> np.ndarray:
    """Corners in front of the camera plus edge crossings of the plane ``z = near``."""
    pts = [c for c in corners if c[2] > 0]
    for i, j in BOX_EDGES:
        a, b = corners[i], corners[j]
        if (a[2] > near) != (b[2] > near) and max(a[2], b[2]) > near:
            t = (near - a[2]) / (b[2] - a[2])
            pts.append(a + t * (b - a))
    return np.array(pts).reshape(-1, 3)


def project_box_to_2d(b: Box3D, K: CameraIntrinsics, image_size) -> Optional[Box2D]:
    """Truncated image box of ``b``; ``None`` when invisible or zero-area.

    Portions of the box behind the camera are cut at a near plane before
    projecting, so boxes straddling the camera still get a sensible extent.
    """
    width, height = image_size
    corners = box_corners(b)
    if not np.any(corners[:, 2] > 0):
        return None
    pts = _front_points(corners)
    uv = project_points(K, pts)
    # far-off coordinates only matter through clipping
    uv = np.clip(uv, -1e12, 1e12)
    raw = Box2D(float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))
    return raw.clip(width, height)


def box_from_bottom_center(bottom, dims, R) -> Vec3:
    """Center of a box whose bottom-face center is ``bottom``."""
    R = np.asarray(R, dtype=float)
    h = float(dims[1])
    return _as_vec3(np.asarray(bottom, dtype=float) - R @ np.array([0.0, h / 2.0, 0.0]))
