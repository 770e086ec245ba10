"""Pinhole camera model and rigid world/camera transforms.

Conventions used throughout the package:

* ``x_cam = R @ x_world + t`` (world to camera), the same convention as the
  common SfM text export.
* Camera frame: x right, y down, z along the optical axis.
* Pixel ``(u, v)``: continuous, with the center of the top-left pixel at
  ``(0, 0)``. A pixel is in bounds iff ``0 <= u <= width - 1`` and
  ``0 <= v <= height - 1``.

All point functions accept a single point of shape ``(3,)`` or a stack of
shape ``(..., 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, InvalidPose, NonPositiveDepth

EPS_Z = 1e-6
_ROTATION_TOL = 1e-6


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
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid sensor size {self.width}x{self.height}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the same camera sampled on a ``width x height`` lattice
        whose corner pixel centers coincide with the original ones."""
        sx = (width - 1) / (self.width - 1) if self.width > 1 else 1.0
        sy = (height - 1) / (self.height - 1) if self.height > 1 else 1.0
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidPose(f"bad shapes rotation={r.shape} translation={t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidPose("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ROTATION_TOL:
            raise InvalidPose("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ROTATION_TOL:
            raise InvalidPose(f"rotation determinant {np.linalg.det(r):.9g} != 1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, qvec, tvec) -> "CameraPose":
        """Build from a scalar-first unit quaternion ``(qw, qx, qy, qz)``."""
        qw, qx, qy, qz = (float(q) for q in qvec)
        norm = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        if not np.isfinite(norm) or abs(norm - 1.0) > 1e-3:
            raise InvalidPose(f"quaternion norm {norm:.6g} is not 1")
        rot = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        return cls(rot, tvec)

    @classmethod
    def from_center(cls, rotation, center) -> "CameraPose":
        rotation = np.asarray(rotation, dtype=float)
        return cls(rotation, -rotation @ np.asarray(center, dtype=float))

    @property
    def quaternion(self) -> np.ndarray:
        """Scalar-first quaternion with ``qw >= 0``."""
        qx, qy, qz, qw = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([qw, qx, qy, qz])
        return -q if qw < 0 else q

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.rotation[2].copy()


def nadir_rotation(yaw_deg: float = 0.0) -> np.ndarray:
    """World-to-camera rotation of a camera looking straight down (world z up).

    With zero yaw the image x axis points along world +x and the image top
    faces world +y.
    """
    base = np.diag([1.0, -1.0, -1.0])
    return base @ Rotation.from_euler("z", yaw_deg, degrees=True).as_matrix().T


def world_to_camera(pose: CameraPose, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ pose.rotation.T + pose.translation


def camera_to_world(pose: CameraPose, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return (p - pose.translation) @ pose.rotation


def project(k: CameraIntrinsics, p, eps_z: float = EPS_Z) -> np.ndarray:
    """Pinhole projection of camera-frame points to pixels.

    Raises:
        BehindCamera: if any point has ``z <= eps_z``.
    """
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(~(z > eps_z)):
        raise BehindCamera(f"point(s) with depth <= {eps_z} m cannot be projected")
    u = k.fx * p[..., 0] / z + k.cx
    v = k.fy * p[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def project_points(k: CameraIntrinsics, p, eps_z: float = EPS_Z):
    """Non-raising projection: returns ``(uv, in_front)``; ``uv`` is NaN where
    the point is behind the camera."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    front = z > eps_z
    zs = np.where(front, z, np.nan)
    uv = np.stack([k.fx * p[..., 0] / zs + k.cx, k.fy * p[..., 1] / zs + k.cy], axis=-1)
    return uv, front


def backproject(k: CameraIntrinsics, px, depth) -> np.ndarray:
    """Lift pixel(s) at the given camera-frame depth(s) to camera-frame points.

    Raises:
        NonPositiveDepth: if any depth is not strictly positive.
    """
    px = np.asarray(px, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("depth must be > 0")
    x = depth * (px[..., 0] - k.cx) / k.fx
    y = depth * (px[..., 1] - k.cy) / k.fy
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def tie_point_depth(pose: CameraPose, p):
    """Camera-frame depth (z) of world point(s); callers reject values <= 0."""
    p = np.asarray(p, dtype=float)
    return p @ pose.rotation[2] + pose.translation[2]


def pixel_rays(k: CameraIntrinsics, pose: CameraPose, px) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin and world directions scaled so that the camera-frame z of
    ``origin + s * direction`` equals ``s``."""
    px = np.asarray(px, dtype=float)
    d_cam = np.stack(
        [(px[..., 0] - k.cx) / k.fx, (px[..., 1] - k.cy) / k.fy, np.ones(px.shape[:-1])],
        axis=-1,
    )
    return pose.center, d_cam @ pose.rotation
