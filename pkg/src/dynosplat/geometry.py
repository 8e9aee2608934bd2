"""SE(3) poses, quaternions and the pinhole camera model.

Conventions used throughout the project:

* Poses are **camera-to-world**: a point ``x_cam`` in the camera frame maps to
  ``x_world = R @ x_cam + t``.
* Quaternions are stored ``(qx, qy, qz, qw)`` (scalar last), matching the TUM
  trajectory file layout.
* Pose tangent vectors are 6-vectors ``(wx, wy, wz, vx, vy, vz)`` — rotation
  first — and perturbations act on the **left**: ``T <- exp(delta) @ T``.
* Pixel ``(u, v)`` has its center at integer coordinates, ``u`` along the
  image width (columns) and ``v`` along the height (rows).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from an (x, y, z, w) quaternion; normalizes the input."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    if n == 0.0:
        raise ValueError("zero quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Vectorized quat_to_rotmat for an (N, 4) array of (x, y, z, w) quaternions."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    x, y, z, w = (q / n).T
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (x, y, z, w) from a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w], dtype=np.float64)
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b for (x, y, z, w) quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        dtype=np.float64,
    )


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]], dtype=np.float64)


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula: rotation matrix from an axis-angle vector."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    A = np.sin(th) / th
    B = (1.0 - np.cos(th)) / (th * th)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix."""
    cos_th = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    th = np.arccos(cos_th)
    if th < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5
    if np.pi - th < 1e-6:
        # near pi: extract axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using off-diagonals
        if axis[0] > 0:
            axis[1] = np.copysign(axis[1], A[0, 1])
            axis[2] = np.copysign(axis[2], A[0, 2])
        elif axis[1] > 0:
            axis[2] = np.copysign(axis[2], A[1, 2])
        return th * axis / np.linalg.norm(axis)
    return th / (2.0 * np.sin(th)) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )


@dataclass(frozen=True)
class PoseSE3:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-4:
            raise ValueError(f"rotation not orthonormal (|R'R - I| = {err:.3e})")
        if err > _ORTHO_TOL:
            # rounding drift from long composition chains: snap to the nearest rotation
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
        if np.linalg.det(R) < 0:
            raise ValueError("rotation has negative determinant")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_quat_trans(q: np.ndarray, t: np.ndarray) -> "PoseSE3":
        return PoseSE3(quat_to_rotmat(q), np.asarray(t, dtype=np.float64))

    def quat(self) -> np.ndarray:
        return rotmat_to_quat(self.rotation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self @ other (apply ``other`` first)."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) or (3,) points by this pose."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(W, t) such that x_cam = W @ x_world + t."""
        W = self.rotation.T
        return W, -W @ self.translation


def se3_exp(delta: np.ndarray) -> PoseSE3:
    """Exponential map: tangent (w, v) -> PoseSE3."""
    delta = np.asarray(delta, dtype=np.float64)
    w, v = delta[:3], delta[3:]
    th = np.linalg.norm(w)
    K = skew(w)
    R = so3_exp(w)
    if th < 1e-12:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        A = (1.0 - np.cos(th)) / (th * th)
        B = (th - np.sin(th)) / (th ** 3)
        V = np.eye(3) + A * K + B * (K @ K)
    return PoseSE3(R, V @ v)


def se3_log(T: PoseSE3) -> np.ndarray:
    """Logarithm map: PoseSE3 -> tangent (w, v)."""
    w = so3_log(T.rotation)
    th = np.linalg.norm(w)
    K = skew(w)
    if th < 1e-12:
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        A = (1.0 - np.cos(th)) / (th * th)
        B = (th - np.sin(th)) / (th ** 3)
        Vinv = np.linalg.inv(np.eye(3) + A * K + B * (K @ K))
    return np.concatenate([w, Vinv @ T.translation])


def perturb_pose(T: PoseSE3, delta: np.ndarray) -> PoseSE3:
    """Left-multiplicative update T <- exp(delta) @ T (the project-wide convention)."""
    return se3_exp(delta).compose(T)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model; all quantities in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point outside the image")

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """(N, 3) camera-frame points -> (N, 2) pixel coordinates (u, v)."""
        p = np.asarray(p_cam, dtype=np.float64)
        z = p[..., 2]
        return np.stack(
            [self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy],
            axis=-1,
        )

    def backproject_pixels(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates + z-depth -> (N, 3) camera-frame points."""
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx
        y = (np.asarray(v, dtype=np.float64) - self.cy) / self.fy
        d = np.asarray(depth, dtype=np.float64)
        return np.stack([x * d, y * d, d], axis=-1)
