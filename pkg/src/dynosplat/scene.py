"""Scene representation: 3D Gaussians, the growable map, and RGB-D frames.

A :class:`GaussianMap` stores its gaussians struct-of-arrays style so the
renderer can work on whole-map numpy arrays; :class:`Gaussian3D` is the
single-primitive value type used at API boundaries.  Map mutation is
single-writer; reads are safe from any thread.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, quat_mul, quat_to_rotmat, quats_to_rotmats, rotmat_to_quat


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic gaussian: position, orientation, axis scales, opacity, RGB.

    Color is the degree-0 (view-independent) spherical-harmonic coefficient,
    stored directly as RGB in [0, 1].
    """

    mean: np.ndarray      # (3,) meters
    rotation: np.ndarray  # (4,) unit quaternion (x, y, z, w)
    scale: np.ndarray     # (3,) meters, > 0
    opacity: float        # [0, 1]
    color: np.ndarray     # (3,) in [0, 1]

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        c = np.asarray(self.color, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("quaternion must be unit norm")
        if np.any(s <= 0):
            raise ValueError("scale components must be > 0")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must be in [0,1]")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("color components must be in [0,1]")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "color", c)


def covariance(g: Gaussian3D) -> np.ndarray:
    """World-space covariance R diag(s) diag(s) R^T (symmetric positive definite)."""
    R = quat_to_rotmat(g.rotation)
    return R @ np.diag(g.scale ** 2) @ R.T


def covariances(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Vectorized covariance for (N,4) quaternions and (N,3) scales -> (N,3,3)."""
    R = quats_to_rotmats(quats)
    RS = R * scales[:, None, :]  # R @ diag(s)
    return RS @ RS.transpose(0, 2, 1)


class GaussianMap:
    """Growable gaussian collection with stable integer ids."""

    def __init__(self):
        self.means = np.zeros((0, 3), dtype=np.float64)
        self.quats = np.zeros((0, 4), dtype=np.float64)
        self.scales = np.zeros((0, 3), dtype=np.float64)
        self.opacities = np.zeros(0, dtype=np.float64)
        self.colors = np.zeros((0, 3), dtype=np.float64)
        self.ids = np.zeros(0, dtype=np.int64)
        self._next_id = 0

    def __len__(self) -> int:
        return self.means.shape[0]

    def add(self, means, quats, scales, opacities, colors) -> np.ndarray:
        """Append gaussians; returns the assigned ids."""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        n = means.shape[0]
        quats = np.broadcast_to(np.asarray(quats, dtype=np.float64), (n, 4))
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        norms = np.linalg.norm(quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("quaternions must be unit norm")
        if np.any(scales <= 0):
            raise ValueError("scales must be > 0")
        if np.any((opacities < 0) | (opacities > 1)):
            raise ValueError("opacities must be in [0,1]")
        if np.any((colors < 0) | (colors > 1)):
            raise ValueError("colors must be in [0,1]")
        new_ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
        self._next_id += n
        self.means = np.concatenate([self.means, means])
        self.quats = np.concatenate([self.quats, quats.copy()])
        self.scales = np.concatenate([self.scales, scales.copy()])
        self.opacities = np.concatenate([self.opacities, opacities.copy()])
        self.colors = np.concatenate([self.colors, colors.copy()])
        self.ids = np.concatenate([self.ids, new_ids])
        return new_ids

    def remove(self, keep_mask: np.ndarray) -> "GaussianMap":
        """Drop gaussians where keep_mask is False; returns the removed ones."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        removed = self.subset(~keep_mask)
        for name in ("means", "quats", "scales", "opacities", "colors", "ids"):
            setattr(self, name, getattr(self, name)[keep_mask])
        return removed

    def subset(self, mask: np.ndarray) -> "GaussianMap":
        out = GaussianMap()
        out.means = self.means[mask].copy()
        out.quats = self.quats[mask].copy()
        out.scales = self.scales[mask].copy()
        out.opacities = self.opacities[mask].copy()
        out.colors = self.colors[mask].copy()
        out.ids = self.ids[mask].copy()
        out._next_id = self._next_id
        return out

    def copy(self) -> "GaussianMap":
        return self.subset(np.ones(len(self), dtype=bool))

    def gaussian(self, index: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[index],
            self.quats[index],
            self.scales[index],
            float(self.opacities[index]),
            self.colors[index],
        )

    def validate(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("duplicate gaussian ids")
        if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1.0) > 1e-9):
            raise ValueError("non-unit quaternion in map")
        if np.any(self.scales <= 0):
            raise ValueError("non-positive scale in map")


def merge_maps(maps: list) -> GaussianMap:
    """Union of several maps into a fresh map (new ids, original maps untouched).

    Rendering the union is the depth-ordered merge of the component renders.
    """
    out = GaussianMap()
    for m in maps:
        if len(m):
            out.add(m.means, m.quats, m.scales, m.opacities, m.colors)
    return out


def transform_map(gmap: GaussianMap, T: PoseSE3) -> GaussianMap:
    """Rigidly move every gaussian by T (means rotated+translated, frames rotated)."""
    out = gmap.copy()
    out.means = gmap.means @ T.rotation.T + T.translation
    q_T = rotmat_to_quat(T.rotation)
    out.quats = np.stack([quat_mul(q_T, q) for q in gmap.quats]) if len(gmap) else gmap.quats.copy()
    if len(out):
        out.quats /= np.linalg.norm(out.quats, axis=1, keepdims=True)
    return out


@dataclass(frozen=True)
class Mask:
    """Boolean pixel mask tied to a frame's H x W grid."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def shape(self):
        return self.bits.shape

    def area(self) -> int:
        return int(self.bits.sum())

    def empty(self) -> bool:
        return not self.bits.any()

    @staticmethod
    def full(shape) -> "Mask":
        return Mask(np.ones(shape, dtype=bool))

    @staticmethod
    def none(shape) -> "Mask":
        return Mask(np.zeros(shape, dtype=bool))


@dataclass(frozen=True)
class FrameRGBD:
    """One RGB-D observation; depth in meters, zero/out-of-range depth invalid."""

    color: np.ndarray      # (H, W, 3) in [0, 1]
    depth: np.ndarray      # (H, W) meters
    valid_mask: np.ndarray  # (H, W) bool
    timestamp: float = 0.0

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        valid = np.asarray(self.valid_mask, dtype=bool)
        if color.ndim != 3 or color.shape[2] != 3:
            raise ValueError("color must be HxWx3")
        if depth.shape != color.shape[:2] or valid.shape != depth.shape:
            raise ValueError("depth/valid_mask shape mismatch")
        if np.any(depth[valid] < 0):
            raise ValueError("negative depth marked valid")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid_mask", valid)

    @staticmethod
    def from_raw(color, depth, min_depth: float, max_depth: float, timestamp: float = 0.0) -> "FrameRGBD":
        """Build a frame deriving the validity mask from the depth range."""
        depth = np.asarray(depth, dtype=np.float64)
        valid = (depth > 0) & (depth >= min_depth) & (depth <= max_depth) & np.isfinite(depth)
        return FrameRGBD(color, depth, valid, timestamp)

    @property
    def shape(self):
        return self.depth.shape


def backproject(
    frame: FrameRGBD,
    K: CameraIntrinsics,
    T: PoseSE3,
    region: Mask,
    stride: int = 2,
    init_opacity: float = 0.5,
    scale_factor: float = 0.5,
) -> GaussianMap:
    """Lift selected pixels to isotropic gaussians in world space.

    One gaussian per selected pixel on the stride grid: mean at the
    back-projected point, color from the pixel, isotropic scale
    ``depth / fx * stride * scale_factor`` (about half the pixel footprint at
    that depth so a fresh splat covers ~1 pixel).  An empty region yields an
    empty map.
    """
    sel = region.bits & frame.valid_mask
    if stride > 1:
        grid = np.zeros_like(sel)
        grid[::stride, ::stride] = True
        sel = sel & grid
    vs, us = np.nonzero(sel)
    out = GaussianMap()
    if us.size == 0:
        return out
    d = frame.depth[vs, us]
    p_cam = K.backproject_pixels(us.astype(np.float64), vs.astype(np.float64), d)
    p_world = T.apply(p_cam)
    s = (d / K.fx) * stride * scale_factor
    scales = np.repeat(s[:, None], 3, axis=1)
    quats = np.tile(np.array([0.0, 0.0, 0.0, 1.0]), (us.size, 1))
    colors = np.clip(frame.color[vs, us], 0.0, 1.0)
    out.add(p_world, quats, scales, np.full(us.size, init_opacity), colors)
    return out
