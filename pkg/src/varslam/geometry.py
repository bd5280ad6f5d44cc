"""SE(3) algebra, pinhole projection and whitened reprojection residuals.

Conventions
-----------
* Poses are world-to-camera transforms ``T_cw``: ``p_c = R @ X + t``.
* Twists are ordered rotation first: ``xi = (omega, v)``.
* Pose increments are applied on the left: ``T <- exp(delta) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

Z_MIN = 1e-6


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy],
                     [wz, 0.0, -wx],
                     [-wy, wx, 0.0]])


def _so3_coeffs(theta: float):
    # A = sin(t)/t, B = (1-cos t)/t^2, C = (t - sin t)/t^3
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    return (math.sin(theta) / theta,
            (1.0 - math.cos(theta)) / theta ** 2,
            (theta - math.sin(theta)) / theta ** 3)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    a, b, _ = _so3_coeffs(float(np.linalg.norm(w)))
    W = hat(w)
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 stays well conditioned near 0 and pi where acos does not
    theta = math.atan2(0.5 * float(np.linalg.norm(vee)), 0.5 * (np.trace(R) - 1.0))
    if theta < 1e-4:
        return 0.5 * (1.0 + theta * theta / 6.0) * vee
    if math.pi - theta < 1e-3:
        # near pi the antisymmetric part vanishes; the symmetric part is
        # cos(t) I + (1 - cos t) a a^T
        cos_t = math.cos(theta)
        A = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
        k = int(np.argmax(np.diag(A)))
        axis = A[:, k] / math.sqrt(max(A[k, k], 1e-300))
        if vee @ axis < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * math.sin(theta)) * vee


def rotation_angle(R: np.ndarray) -> float:
    return float(np.linalg.norm(so3_log(R)))


@dataclass(frozen=True)
class SE3Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "SE3Pose":
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return compose(self, other)

    def inverse(self) -> "SE3Pose":
        Rt = self.rotation.T
        return SE3Pose(Rt, -Rt @ self.translation)

    def act(self, points) -> np.ndarray:
        """Transform one point (3,) or a batch (N, 3)."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def normalized(self) -> "SE3Pose":
        """Project the rotation back onto SO(3); long composition chains drift."""
        U, _, Vt = np.linalg.svd(self.rotation)
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return SE3Pose(R, self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.allclose(R.T @ R, np.eye(3), atol=tol)
                and abs(np.linalg.det(R) - 1.0) < tol)


def compose(a: SE3Pose, b: SE3Pose) -> SE3Pose:
    return SE3Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_exp(xi) -> SE3Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    w, v = xi[:3], xi[3:]
    a, b, c = _so3_coeffs(float(np.linalg.norm(w)))
    W = hat(w)
    W2 = W @ W
    R = np.eye(3) + a * W + b * W2
    V = np.eye(3) + b * W + c * W2
    return SE3Pose(R, V @ v)


def se3_log(pose: SE3Pose) -> np.ndarray:
    w = so3_log(pose.rotation)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-4:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        a, b, _ = _so3_coeffs(theta)
        d = (1.0 - a / (2.0 * b)) / theta ** 2
    V_inv = np.eye(3) - 0.5 * W + d * (W @ W)
    return np.concatenate([w, V_inv @ pose.translation])


def pose_error(a: SE3Pose, b: SE3Pose) -> Tuple[float, float]:
    """(rotation angle in rad, translation distance) between two poses."""
    return (rotation_angle(a.rotation.T @ b.rotation),
            float(np.linalg.norm(a.translation - b.translation)))


# ---------------------------------------------------------------------------
# camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def contains(self, pixels) -> np.ndarray:
        px = np.asarray(pixels, dtype=float)
        return ((px[..., 0] >= 0) & (px[..., 0] <= self.width)
                & (px[..., 1] >= 0) & (px[..., 1] <= self.height))


@dataclass(frozen=True)
class MapPoint:
    id: int
    position: np.ndarray

    def __post_init__(self):
        pos = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ValueError(f"map point {self.id} has non-finite position")
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class Observation:
    point_id: int
    frame_id: int
    pixel: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.array(self.pixel, dtype=float).reshape(2))
        if not self.sigma > 0:
            raise ValueError("observation sigma must be positive")


def project_points(p_cam: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (N, 3); returns pixels and an in-front mask."""
    p = np.atleast_2d(p_cam)
    z = p[:, 2]
    front = z > Z_MIN
    zs = np.where(front, z, 1.0)
    uv = np.column_stack([intr.fx * p[:, 0] / zs + intr.cx,
                          intr.fy * p[:, 1] / zs + intr.cy])
    uv[~front] = np.nan
    return uv, front


def project(pose: SE3Pose, point, intr: CameraIntrinsics) -> Optional[np.ndarray]:
    """Pixel of a world point, or ``None`` when it lies behind the camera."""
    X = point.position if isinstance(point, MapPoint) else np.asarray(point, dtype=float)
    uv, front = project_points(pose.act(X)[None, :], intr)
    return uv[0] if front[0] else None


def unproject(pixel, depth: float, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point at ``depth`` along the ray through ``pixel``."""
    px = np.asarray(pixel, dtype=float)
    x = (px[..., 0] - intr.cx) / intr.fx
    y = (px[..., 1] - intr.cy) / intr.fy
    d = np.asarray(depth, dtype=float)
    return np.stack([x * d, y * d, d * np.ones_like(x)], axis=-1)


def reprojection_residual(obs: Observation, pose: SE3Pose, point: MapPoint,
                          intr: CameraIntrinsics) -> Optional[np.ndarray]:
    """Whitened residual ``(u - pi(T X)) / sigma``; ``None`` if behind the camera."""
    uv = project(pose, point, intr)
    if uv is None:
        return None
    return (obs.pixel - uv) / obs.sigma


def batch_residuals(R: np.ndarray, t: np.ndarray, X: np.ndarray, pixels: np.ndarray,
                    sigmas: np.ndarray, intr: CameraIntrinsics, jacobians: bool = True):
    """Vectorized whitened residuals and Jacobians.

    ``R`` (N, 3, 3) and ``t`` (N, 3) are the pose of each observation, ``X``
    (N, 3) its world point. Returns ``(r, valid, J_pose, J_point)`` with shapes
    (N, 2), (N,), (N, 2, 6), (N, 2, 3). Rows with ``valid == False`` (behind the
    camera) carry zeros.
    """
    pc = (R @ X[:, :, None])[:, :, 0] + t
    z = pc[:, 2]
    valid = z > Z_MIN
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs
    u = intr.fx * pc[:, 0] * inv_z + intr.cx
    v = intr.fy * pc[:, 1] * inv_z + intr.cy
    inv_s = 1.0 / sigmas
    r = np.column_stack([(pixels[:, 0] - u) * inv_s, (pixels[:, 1] - v) * inv_s])
    r[~valid] = 0.0
    if not jacobians:
        return r, valid, None, None

    n = X.shape[0]
    # d(pi)/d(p_c), scaled by -1/sigma since r = (u - pi) / sigma
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = intr.fx * inv_z
    Jp[:, 0, 2] = -intr.fx * pc[:, 0] * inv_z ** 2
    Jp[:, 1, 1] = intr.fy * inv_z
    Jp[:, 1, 2] = -intr.fy * pc[:, 1] * inv_z ** 2
    Jp *= -inv_s[:, None, None]
    Jp[~valid] = 0.0

    # d(p_c)/d(delta) = [-[p_c]x, I] for a left increment
    dpc = np.zeros((n, 3, 6))
    dpc[:, 0, 1] = pc[:, 2]
    dpc[:, 0, 2] = -pc[:, 1]
    dpc[:, 1, 0] = -pc[:, 2]
    dpc[:, 1, 2] = pc[:, 0]
    dpc[:, 2, 0] = pc[:, 1]
    dpc[:, 2, 1] = -pc[:, 0]
    dpc[:, 0, 3] = dpc[:, 1, 4] = dpc[:, 2, 5] = 1.0

    J_pose = Jp @ dpc
    J_point = Jp @ R
    return r, valid, J_pose, J_point


def residual_jacobians(obs: Observation, pose: SE3Pose, point: MapPoint,
                       intr: CameraIntrinsics) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """(2x6 pose Jacobian, 2x3 point Jacobian) of the whitened residual."""
    r, valid, Jx, Jl = batch_residuals(pose.rotation[None], pose.translation[None],
                                       point.position[None], obs.pixel[None],
                                       np.array([obs.sigma]), intr)
    if not valid[0]:
        return None
    return Jx[0], Jl[0]
