"""Rigid-body poses, pinhole ray generation, and Gaussian pose noise.

Quaternions are stored (x, y, z, w) with the scalar part kept nonnegative
so pose equality and averaging are well-defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose",
    "CameraIntrinsics",
    "pixel_rays",
    "perturb_pose",
    "quat_multiply",
    "quat_rotation_matrix",
    "quat_from_axis_angle",
    "quat_angle_between",
    "save_trajectory",
    "load_trajectory",
]

_QUAT_NORM_TOL = 1e-9


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so the scalar part is nonnegative; q and -q are one rotation."""
    return -q if q[3] < 0.0 else q


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product; supports (..., 4) batches broadcasting."""
    x1, y1, z1, w1 = np.moveaxis(np.asarray(q1, dtype=np.float64), -1, 0)
    x2, y2, z2, w2 = np.moveaxis(np.asarray(q2, dtype=np.float64), -1, 0)
    return np.stack(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.asarray(q, dtype=np.float64).copy()
    out[..., :3] *= -1.0
    return out


def quat_rotation_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix/matrices for unit quaternion(s) of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    x, y, z, w = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * angle
    s = math.sin(half) / n
    return np.array([a[0] * s, a[1] * s, a[2] * s, math.cos(half)])


def quat_angle_between(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic angle in radians between two unit quaternions."""
    d = abs(float(np.dot(np.asarray(q1, dtype=np.float64), np.asarray(q2, dtype=np.float64))))
    return 2.0 * math.acos(min(1.0, d))


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) of a rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    t = m[0, 0] + m[1, 1] + m[2, 2]
    if t > 0.0:
        r = math.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array([(m[2, 1] - m[1, 2]) * s, (m[0, 2] - m[2, 0]) * s,
                      (m[1, 0] - m[0, 1]) * s, 0.5 * r])
    else:
        i = int(np.argmax([m[0, 0], m[1, 1], m[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = math.sqrt(1.0 + m[i, i] - m[j, j] - m[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[i] = 0.5 * r
        q[j] = (m[j, i] + m[i, j]) * s
        q[k] = (m[k, i] + m[i, k]) * s
        q[3] = (m[k, j] - m[j, k]) * s
    q /= np.linalg.norm(q)
    return quat_canonical(q)


def yaw_quaternion(yaw: float) -> np.ndarray:
    """Rotation about +z only; roll and pitch are exactly zero."""
    return quat_canonical(np.array([0.0, 0.0, math.sin(0.5 * yaw), math.cos(0.5 * yaw)]))


def quat_yaw(q: np.ndarray) -> float:
    x, y, z, w = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation in meters plus a unit quaternion."""

    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4).copy()
        n = np.linalg.norm(q)
        if n < 1e-9:
            raise ValueError("quaternion norm is degenerate")
        if abs(n - 1.0) > _QUAT_NORM_TOL:
            q = q / n
        q = quat_canonical(q)
        t.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_rotation_matrix(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` in this pose's frame."""
        t = self.translation + self.rotation_matrix() @ other.translation
        q = quat_multiply(self.rotation, other.rotation)
        return Pose(t, q)

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        ti = -(quat_rotation_matrix(qi) @ self.translation)
        return Pose(ti, qi)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to (..., 3) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, 3], quat_from_matrix(m[:3, :3]))

    def translation_distance(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def rotation_angle(self, other: "Pose") -> float:
        return quat_angle_between(self.rotation, other.rotation)


def compose_pose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def pixel_rays(intr: CameraIntrinsics, pixels) -> np.ndarray:
    """Unit camera-frame ray directions for (u, v) pixel coordinates.

    The direction for (u, v) is normalize(((u - cx)/fx, (v - cy)/fy, 1)).
    """
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if px.shape[-1] != 2:
        raise ValueError(f"pixels must be (n, 2), got shape {px.shape}")
    u, v = px[:, 0], px[:, 1]
    if np.any(u < 0) or np.any(u >= intr.width) or np.any(v < 0) or np.any(v >= intr.height):
        raise ValueError("pixel coordinates outside image bounds")
    d = np.empty((len(px), 3), dtype=np.float64)
    d[:, 0] = (u - intr.cx) / intr.fx
    d[:, 1] = (v - intr.cy) / intr.fy
    d[:, 2] = 1.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d


def _sample_perturbations(n: int, sigma_t: float, sigma_r_deg: float, rng: np.random.Generator):
    """Batch noise draws: (n,3) offsets, (n,4) unit delta quaternions."""
    if sigma_t < 0 or sigma_r_deg < 0:
        raise ValueError("noise standard deviations must be nonnegative")
    offsets = rng.normal(0.0, sigma_t, (n, 3)) if sigma_t > 0 else np.zeros((n, 3))
    axes = rng.standard_normal((n, 3))
    norms = np.linalg.norm(axes, axis=1, keepdims=True)
    bad = norms[:, 0] < 1e-12
    if np.any(bad):  # vanishing axis draw: fall back to +x, measure zero
        axes[bad] = (1.0, 0.0, 0.0)
        norms[bad] = 1.0
    axes /= norms
    angles = rng.normal(0.0, math.radians(sigma_r_deg), n) if sigma_r_deg > 0 else np.zeros(n)
    half = 0.5 * angles
    s = np.sin(half)
    dq = np.concatenate([axes * s[:, None], np.cos(half)[:, None]], axis=1)
    return offsets, dq


def perturb_pose(pose: Pose, sigma_t: float, sigma_r_deg: float,
                 rng: np.random.Generator) -> Pose:
    """Gaussian pose noise.

    Translation gets independent N(0, sigma_t^2) per axis; rotation is
    composed (in the local frame) with a rotation about a uniformly random
    axis by an angle drawn from N(0, sigma_r^2), sigma_r in degrees.
    """
    offsets, dq = _sample_perturbations(1, sigma_t, sigma_r_deg, rng)
    t = pose.translation + offsets[0]
    q = quat_multiply(pose.rotation, dq[0])
    return Pose(t, q)


def save_trajectory(path, poses, timestamps=None) -> None:
    """One line per frame: ``t tx ty tz qx qy qz qw`` (whitespace-separated)."""
    poses = list(poses)
    if timestamps is None:
        timestamps = range(len(poses))
    with open(path, "w", encoding="ascii") as f:
        for t, p in zip(timestamps, poses):
            tx, ty, tz = p.translation
            qx, qy, qz, qw = p.rotation
            f.write(f"{float(t):.17g} {tx:.17g} {ty:.17g} {tz:.17g} "
                    f"{qx:.17g} {qy:.17g} {qz:.17g} {qw:.17g}\n")


def load_trajectory(path) -> tuple[np.ndarray, list[Pose]]:
    """Inverse of save_trajectory; returns (timestamps, poses)."""
    stamps = []
    poses = []
    with open(path, "r", encoding="ascii") as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            vals = [float(x) for x in parts]
            stamps.append(vals[0])
            poses.append(Pose(np.array(vals[1:4]), np.array(vals[4:8])))
    return np.array(stamps), poses
