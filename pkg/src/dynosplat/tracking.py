"""Frame-to-model camera tracking on SE(3).

The pose is initialized by replaying the previous inter-frame motion and then
refined by first-order descent on a masked photometric + geometric objective:

    L = lambda * mean_{M_track} |I_hat - I|_1  +  (1-lambda) * mean_{M_track & M_v} |D_hat - D|_1

``M_track`` excludes active dynamic-object pixels and low-opacity (poorly
mapped) regions, and is recomputed from the current render once per
iteration.  Updates are Adam steps on the SE(3) tangent with the configured
per-group learning rates, plus step halving whenever a step would increase
the loss, so the per-iteration loss trend is monotone by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RenderSettings, TrackingConfig
from .geometry import CameraIntrinsics, PoseSE3, perturb_pose
from .render import render, render_backward
from .scene import FrameRGBD, GaussianMap, Mask


class TrackingDegenerateError(RuntimeError):
    pass


@dataclass
class TrackingResult:
    pose: PoseSE3
    final_loss: float
    iterations_run: int
    inlier_fraction: float


def constant_velocity_init(pose_prev: PoseSE3, pose_prev2: PoseSE3) -> PoseSE3:
    """Predict the next pose by replaying the last relative motion."""
    return pose_prev.compose(pose_prev2.inverse().compose(pose_prev))


def tracking_mask(m_d: Mask, opacity: np.ndarray, tau_track: float) -> Mask:
    """Reliable static region: not dynamic and opacity strictly above tau."""
    if m_d.bits.shape != opacity.shape:
        raise ValueError("mask/opacity shape mismatch")
    return Mask(~m_d.bits & (opacity > tau_track))


def _loss_terms(out, frame: FrameRGBD, m_track: Mask, lam: float):
    """Masked L1 color/depth losses, each normalized by its pixel count."""
    mt = m_track.bits
    md = mt & frame.valid_mask
    n_i = int(mt.sum())
    n_d = int(md.sum())
    loss = 0.0
    if n_i:
        loss += lam * float(np.abs(out.color - frame.color)[mt].sum()) / n_i
    if n_d:
        loss += (1.0 - lam) * float(np.abs(out.depth - frame.depth)[md].sum()) / n_d
    return loss, n_i, n_d


def optimize_pose(
    gmap: GaussianMap,
    frame: FrameRGBD,
    m_d: Mask,
    init: PoseSE3,
    cfg: TrackingConfig,
    K: CameraIntrinsics,
    settings: RenderSettings | None = None,
) -> TrackingResult:
    """Minimize the masked tracking loss starting from ``init``.

    Raises :class:`TrackingDegenerateError` when fewer than
    ``min_inlier_fraction`` of pixels survive the tracking mask.
    """
    settings = settings or RenderSettings()
    if len(gmap) == 0:
        raise ValueError("cannot track against an empty map")
    n_pix = K.width * K.height
    pose = init
    out = render(gmap, pose, K, settings)
    losses = []
    stagnant = 0
    iterations = 0
    inlier = 0.0
    lr = np.concatenate([np.full(3, cfg.lr_rotation), np.full(3, cfg.lr_translation)])
    adam_m = np.zeros(6)
    adam_v = np.zeros(6)
    for _ in range(cfg.iterations):
        iterations += 1
        m_track = tracking_mask(m_d, out.opacity, cfg.tau_track)
        loss0, n_i, n_d = _loss_terms(out, frame, m_track, cfg.lambda_track)
        inlier = n_i / n_pix
        if inlier < cfg.min_inlier_fraction:
            raise TrackingDegenerateError(
                f"tracking degenerate: inlier fraction {inlier:.4f}"
            )
        if not np.isfinite(loss0):
            raise RuntimeError("non-finite tracking loss")

        mt = m_track.bits
        md = mt & frame.valid_mask
        d_color = np.zeros_like(out.color)
        if n_i:
            d_color[mt] = cfg.lambda_track * np.sign(out.color - frame.color)[mt] / n_i
        d_depth = np.zeros_like(out.depth)
        if n_d:
            d_depth[md] = (1.0 - cfg.lambda_track) * np.sign(out.depth - frame.depth)[md] / n_d
        grads = render_backward(gmap, pose, K, out, d_color, d_depth, None, settings)
        g = grads.d_pose
        adam_m = 0.9 * adam_m + 0.1 * g
        adam_v = 0.999 * adam_v + 0.001 * g * g
        m_hat = adam_m / (1.0 - 0.9 ** iterations)
        v_hat = adam_v / (1.0 - 0.999 ** iterations)
        step = -lr * m_hat / (np.sqrt(v_hat) + 1e-8)

        accepted = False
        for _h in range(cfg.max_halvings + 1):
            cand_pose = perturb_pose(pose, step)
            cand_out = render(gmap, cand_pose, K, settings)
            cand_loss, _, _ = _loss_terms(cand_out, frame, m_track, cfg.lambda_track)
            if cand_loss <= loss0:
                pose, out = cand_pose, cand_out
                losses.append(cand_loss)
                accepted = True
                break
            step = step * 0.5
        if not accepted:
            losses.append(loss0)

        if len(losses) >= 2:
            prev = losses[-2]
            rel = abs(prev - losses[-1]) / max(abs(prev), 1e-12)
            stagnant = stagnant + 1 if rel < cfg.early_stop_rel else 0
            if stagnant >= cfg.early_stop_patience:
                break
    return TrackingResult(
        pose=pose,
        final_loss=losses[-1] if losses else float("nan"),
        iterations_run=iterations,
        inlier_fraction=inlier,
    )
