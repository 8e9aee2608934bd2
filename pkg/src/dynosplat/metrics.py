"""Trajectory, image-quality, reconstruction and mask-overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3
from .scene import Mask

PSNR_CAP_DB = 100.0  # sentinel for identical images


@dataclass
class Trajectory:
    """Ordered (timestamp, pose) pairs with strictly increasing timestamps."""

    timestamps: np.ndarray  # (N,)
    poses: list  # list[PoseSE3]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.poses) != self.timestamps.size:
            raise ValueError("timestamp/pose count mismatch")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return self.timestamps.size

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses]) if self.poses else np.zeros((0, 3))


def associate_timestamps(a: np.ndarray, b: np.ndarray, tol: float = 0.02) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp association within ``tol`` seconds.

    Candidate pairs are sorted by |dt| and matched one-to-one, the TUM
    benchmark convention.
    """
    pairs = []
    for i, ta in enumerate(a):
        dt = np.abs(b - ta)
        j = int(np.argmin(dt)) if b.size else -1
        if j >= 0 and dt[j] <= tol:
            pairs.append((float(dt[j]), i, j))
    pairs.sort()
    used_a, used_b, out = set(), set(), []
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    out.sort()
    return out


@dataclass(frozen=True)
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation


def align_umeyama(est: Trajectory, gt: Trajectory, with_scale: bool = False,
                  tol: float = 0.02) -> Alignment:
    """Least-squares rigid (optionally similarity) alignment est -> gt.

    Closed-form over the translation components of timestamp-associated poses.
    """
    pairs = associate_timestamps(est.timestamps, gt.timestamps, tol)
    if len(pairs) < 3:
        raise ValueError(f"need >= 3 associated pose pairs, got {len(pairs)}")
    src = np.stack([est.poses[i].translation for i, _ in pairs])
    dst = np.stack([gt.poses[j].translation for _, j in pairs])
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(pairs)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / len(pairs)
        scale = float(np.trace(np.diag(D) @ S) / var_s) if var_s > 0 else 1.0
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return Alignment(R, t, scale)


def ate(est: Trajectory, gt: Trajectory, with_scale: bool = False,
        tol: float = 0.02) -> tuple[float, float]:
    """(RMSE, S.D.) of translational residuals after rigid alignment, meters."""
    align = align_umeyama(est, gt, with_scale=with_scale, tol=tol)
    pairs = associate_timestamps(est.timestamps, gt.timestamps, tol)
    src = np.stack([est.poses[i].translation for i, _ in pairs])
    dst = np.stack([gt.poses[j].translation for _, j in pairs])
    err = np.linalg.norm(align.apply(src) - dst, axis=1)
    rmse = float(np.sqrt(np.mean(err ** 2)))
    sd = float(np.sqrt(np.mean((err - err.mean()) ** 2)))
    return rmse, sd


def psnr(a: np.ndarray, b: np.ndarray, mask: Mask | np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images over a pixel mask."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shape mismatch")
    if bits.shape != a.shape[:2]:
        raise ValueError("mask shape mismatch")
    if not bits.any():
        raise ValueError("empty mask")
    diff = (a - b)[bits]
    mse = float(np.mean(diff ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def recon_metrics(pred_points: np.ndarray, gt_points: np.ndarray,
                  threshold: float = 0.05) -> tuple[float, float, float]:
    """(accuracy m, completeness m, completion ratio %) between point clouds.

    accuracy: mean nearest-neighbor distance pred->gt; completeness: gt->pred;
    ratio: percentage of gt points with a prediction within ``threshold``.
    """
    pred = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise ValueError("empty point cloud")
    d_pred, _ = cKDTree(gt).query(pred, k=1)
    d_gt, _ = cKDTree(pred).query(gt, k=1)
    accuracy = float(np.mean(d_pred))
    completeness = float(np.mean(d_gt))
    ratio = float(100.0 * np.mean(d_gt <= threshold))
    return accuracy, completeness, ratio


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if a.bits.shape != b.bits.shape:
        raise ValueError("mask shape mismatch")
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    inter = np.logical_and(a.bits, b.bits).sum()
    return float(inter / union)
