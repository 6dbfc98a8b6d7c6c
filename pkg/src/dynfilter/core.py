"""Geometric primitives: rigid transforms, pinhole camera, planes, horizon lines.

Conventions: distances in meters, pixels with origin at the top-left and +v
pointing down. A :class:`Pose` used for projection maps world points into the
camera frame (``X_cam = R @ X_world + t``); trajectories store camera-to-world
poses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateError,
    DegenerateFitError,
    DegeneratePlaneError,
    ValidationError,
)

ORTHO_TOL = 1e-9


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi):
    """Rodrigues formula: rotation vector -> rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-8:
        # second-order series keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    theta = math.acos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if math.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        i = int(np.argmax(axis))
        axis = M[i] / max(axis[i], 1e-300)
        axis /= np.linalg.norm(axis)
        if np.dot(w, axis) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * w


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    return float(np.linalg.norm(so3_log(R)))


def renormalized(R, tol=1e-12):
    """``R`` itself, or its nearest rotation once rounding drift exceeds ``tol``."""
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        return nearest_rotation(R)
    return R


def nearest_rotation(M):
    """Project a 3x3 matrix onto SO(3) (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def rot_x(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t`` with an optional timestamp."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: Optional[float] = None

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValidationError("rotation is not orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls, timestamp=None):
        return cls(np.eye(3), np.zeros(3), timestamp)

    @classmethod
    def from_matrix(cls, T, timestamp=None):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3], timestamp)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``; the timestamp of ``self`` is kept."""
        return Pose(renormalized(self.R @ other.R), self.R @ other.t + self.t, self.timestamp)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t, self.timestamp)

    def apply(self, X):
        """Transform a point (3,) or points (N, 3)."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def with_timestamp(self, timestamp):
        return Pose(self.R, self.t, timestamp)

    def allclose(self, other: "Pose", atol=1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol, rtol=0) and np.allclose(self.t, other.t, atol=atol, rtol=0))

    def __repr__(self):
        return f"Pose(t={self.t.tolist()}, rotvec={so3_log(self.R).tolist()}, timestamp={self.timestamp})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, u, v) -> bool:
        return 0.0 <= u < self.width and 0.0 <= v < self.height


@dataclass(frozen=True)
class Plane:
    """Plane ``a x + b y + c z + d = 0`` with unit normal in canonical sign."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        norm2 = self.a * self.a + self.b * self.b + self.c * self.c
        if not abs(norm2 - 1.0) <= 1e-12:
            raise ValidationError("plane normal must be unit length; use Plane.from_coefficients")

    @classmethod
    def from_coefficients(cls, a, b, c, d, canonical=True) -> "Plane":
        n = np.array([a, b, c], dtype=float)
        norm = float(np.linalg.norm(n))
        if not norm > 0 or not math.isfinite(norm):
            raise DegeneratePlaneError("plane normal is zero")
        n = n / norm
        d = float(d) / norm
        if canonical:
            n, d = _canonical_sign(n, d)
        # renormalise so the stored normal is unit to the last ulp
        n = n / math.sqrt(float(n @ n))
        return cls(float(n[0]), float(n[1]), float(n[2]), float(d))

    @property
    def normal(self):
        return np.array([self.a, self.b, self.c])

    def coefficients(self):
        return np.array([self.a, self.b, self.c, self.d])

    def signed_distance(self, points):
        P = np.asarray(points, dtype=float)
        return P @ self.normal + self.d


def _canonical_sign(n, d):
    # largest-magnitude component positive; argmax returns the first axis on ties
    k = int(np.argmax(np.abs(n)))
    if n[k] < 0:
        return -n, -d
    return n, d


def point_plane_distance(p, plane) -> float:
    """Unsigned distance from ``p`` to ``plane``.

    ``plane`` may be a :class:`Plane` or any raw ``[a, b, c, d]`` sequence;
    raw coefficients need not be normalised.
    """
    if isinstance(plane, Plane):
        a, b, c, d = plane.a, plane.b, plane.c, plane.d
    else:
        a, b, c, d = (float(v) for v in plane)
    norm = math.sqrt(a * a + b * b + c * c)
    if norm == 0.0:
        raise DegeneratePlaneError("plane normal is zero")
    x, y, z = (float(v) for v in p)
    return abs(a * x + b * y + c * z + d) / norm


def fit_plane_svd(points) -> Plane:
    """Total-least-squares plane through the centroid of ``points``."""
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] < 3:
        raise DegenerateFitError("plane fit needs at least 3 points")
    centroid = P.mean(axis=0)
    Q = P - centroid
    _, s, Vt = np.linalg.svd(Q, full_matrices=False)
    if s[0] == 0.0 or s[1] <= 1e-10 * s[0]:
        raise DegenerateFitError("points are coincident or collinear")
    n = Vt[2]
    return Plane.from_coefficients(n[0], n[1], n[2], -float(n @ centroid))


def project(K: CameraIntrinsics, pose: Pose, X_world):
    """Pinhole projection of a world point; ``pose`` maps world to camera."""
    Xc = pose.apply(X_world)
    z = float(Xc[2])
    if not z > 0.0:
        raise BehindCameraError(f"point has non-positive depth {z}")
    return (K.fx * float(Xc[0]) / z + K.cx, K.fy * float(Xc[1]) / z + K.cy)


def project_many(K: CameraIntrinsics, pose: Pose, X_world):
    """Vectorised projection; returns ``(uv (N,2), depth (N,))`` without depth checks."""
    Xc = pose.apply(np.atleast_2d(X_world))
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    return np.column_stack([u, v]), z


def backproject(K: CameraIntrinsics, pose: Pose, pixel, depth):
    """Inverse of :func:`project` for a known camera-frame depth."""
    u, v = pixel
    Xc = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.inverse().apply(Xc)


def horizon_line(K: CameraIntrinsics, plane_normal_cam):
    """Image of the plane's line at infinity, or ``None`` if it has no finite image.

    Returns ``l = K^-T n`` scaled so that ``hypot(l[0], l[1]) == 1``. Pass the
    normal pointing from the camera towards the ground: pixels with
    ``l @ (u, v, 1) < 0`` then look away from the ground (sky side).
    """
    n = np.asarray(plane_normal_cam, dtype=float)
    norm = float(np.linalg.norm(n))
    if norm == 0.0 or not math.isfinite(norm):
        raise DegenerateError("plane normal is zero")
    n = n / norm
    l = np.linalg.solve(K.matrix().T, n)
    s = math.hypot(l[0], l[1])
    if s <= 1e-12 * max(1.0, abs(l[2])):
        return None
    return l / s


def line_side(line, u, v):
    """Signed value ``l_a u + l_b v + l_c`` (pixels when the line is normalised)."""
    return line[0] * u + line[1] * v + line[2]


def camera_centers(poses_c2w):
    return np.array([p.t for p in poses_c2w])
