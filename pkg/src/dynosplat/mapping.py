"""Dynamic-static decoupled mapping.

Static side: detected objects are excised from the map by back-projected
frustum/depth-band membership, holes are refilled by inserting gaussians
where rendered opacity is low, and the map is optimized against sampled
keyframes under an L1 + structural-similarity photometric loss, an L1 depth
loss and a scale (anisotropy) regularizer, with opacity-gated densification
and pruning.

Dynamic side: each tracked object gets an independent gaussian snapshot per
keyframe, back-projected from its mask and optimized under the same losses
restricted to the object mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import MappingConfig, RenderSettings
from .geometry import CameraIntrinsics, PoseSE3
from .render import render, render_backward
from .scene import FrameRGBD, GaussianMap, Mask, backproject

# ---------------------------------------------------------------------------
# structural similarity (differentiable, masked)

_WIN = 11
_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _gauss_kernel():
    r = _WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / _SIGMA) ** 2)
    return k / k.sum()

_KERNEL = _gauss_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    out = ndimage.convolve1d(img, _KERNEL, axis=0, mode="reflect")
    return ndimage.convolve1d(out, _KERNEL, axis=1, mode="reflect")


def _ssim_channel(a, b):
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a ** 2
    var_b = _blur(b * b) - mu_b ** 2
    cov = _blur(a * b) - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + _C1
    A2 = 2 * cov + _C2
    B1 = mu_a ** 2 + mu_b ** 2 + _C1
    B2 = var_a + var_b + _C2
    S = (A1 * A2) / (B1 * B2)
    return S, (mu_a, mu_b, A1, A2, B1, B2)


def ssim(a: np.ndarray, b: np.ndarray, mask: Mask) -> float:
    """Mean structural similarity over masked pixels (11x11 gaussian window,
    sigma 1.5, standard constants on [0,1] images); channels averaged."""
    if a.shape != b.shape:
        raise ValueError("image shape mismatch")
    if mask.empty():
        raise ValueError("empty mask")
    a = np.atleast_3d(np.asarray(a, dtype=np.float64))
    b = np.atleast_3d(np.asarray(b, dtype=np.float64))
    m = mask.bits
    vals = [float(_ssim_channel(a[:, :, ch], b[:, :, ch])[0][m].mean()) for ch in range(a.shape[2])]
    return float(np.mean(vals))


def ssim_with_grad(a: np.ndarray, b: np.ndarray, mask: Mask):
    """(ssim value, d ssim / d a) for the masked mean; used by the mapping loss."""
    if mask.empty():
        raise ValueError("empty mask")
    a = np.atleast_3d(np.asarray(a, dtype=np.float64))
    b = np.atleast_3d(np.asarray(b, dtype=np.float64))
    m = mask.bits
    nch = a.shape[2]
    weight = m.astype(np.float64) / (m.sum() * nch)
    total = 0.0
    grad = np.zeros_like(a)
    for ch in range(nch):
        ac, bc = a[:, :, ch], b[:, :, ch]
        S, (mu_a, mu_b, A1, A2, B1, B2) = _ssim_channel(ac, bc)
        total += S[m].mean() / nch
        # factored so the identical-image case cancels bitwise exactly:
        # with a == b, ratio_a = ratio_b = 1 and every term zeroes out, which
        # keeps perfect reconstructions true optimizer fixed points
        ratio_a = A1 / B1
        ratio_b = A2 / B2
        dS_dmu = 2.0 * (mu_b * ratio_b - S * mu_a) / B1
        dS_dvar = -S / B2
        dS_dcov = 2.0 * ratio_a / B2
        G1 = weight * dS_dmu
        G2 = weight * dS_dvar
        G3 = weight * dS_dcov
        grad[:, :, ch] = (
            _blur(G1)
            + (2.0 * ac * _blur(G2) + bc * _blur(G3))
            - _blur(2.0 * mu_a * G2 + mu_b * G3)
        )
    return float(total), grad


# ---------------------------------------------------------------------------
# regularization, separation, insertion


def scale_regularization(gmap: GaussianMap) -> float:
    """Mean absolute deviation of each gaussian's scales from their mean.

    Zero iff every gaussian is isotropic; penalizes needle-like ellipsoids.
    """
    if len(gmap) == 0:
        return 0.0
    s = gmap.scales
    mean = s.mean(axis=1, keepdims=True)
    dev = np.abs(s - mean)
    dev[dev <= 1e-12 * mean] = 0.0  # 1-ulp mean rounding is not anisotropy
    return float(dev.mean(axis=1).mean())


def scale_regularization_grad(gmap: GaussianMap) -> np.ndarray:
    n = len(gmap)
    if n == 0:
        return np.zeros((0, 3))
    s = gmap.scales
    mean = s.mean(axis=1, keepdims=True)
    dev = s - mean
    # rounding of the 3-term mean leaves +-1 ulp deviations on perfectly
    # isotropic gaussians; without a deadband their sign() would inject a
    # full-size spurious gradient
    sg = np.where(np.abs(dev) > 1e-12 * mean, np.sign(dev), 0.0)
    return (sg - sg.mean(axis=1, keepdims=True)) / (3.0 * n)


def separate_dynamic(
    static_map: GaussianMap,
    mask: Mask,
    frame: FrameRGBD,
    T: PoseSE3,
    K: CameraIntrinsics,
    eps_front: float = 0.02,
    eps_behind: float = 0.2,
) -> GaussianMap:
    """Excise gaussians lying in the masked region's back-projected depth band.

    A gaussian is extracted when its center projects into the mask at a pixel
    with valid depth and its camera depth is within ``[D - eps_front,
    D + eps_behind]`` of the observed depth there.  Returns the extracted
    gaussians (possibly empty: the object may be newly entered and unmapped).
    """
    if mask.empty():
        raise ValueError("empty separation mask")
    if len(static_map) == 0:
        return GaussianMap()
    W_rot, t_cw = T.world_to_camera()
    mu_cam = static_map.means @ W_rot.T + t_cw
    z = mu_cam[:, 2]
    front = z > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.round(K.fx * mu_cam[:, 0] / z + K.cx).astype(np.int64)
        v = np.round(K.fy * mu_cam[:, 1] / z + K.cy).astype(np.int64)
    inside = front & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    extract = np.zeros(len(static_map), dtype=bool)
    idx = np.nonzero(inside)[0]
    if idx.size:
        uu, vv = u[idx], v[idx]
        hit = mask.bits[vv, uu] & frame.valid_mask[vv, uu]
        d_obs = frame.depth[vv, uu]
        band = (z[idx] >= d_obs - eps_front) & (z[idx] <= d_obs + eps_behind)
        extract[idx] = hit & band
    return static_map.remove(~extract)


def insertion_mask(m_d: Mask, m_v: np.ndarray, opacity: np.ndarray, tau_map: float) -> Mask:
    """Pixels needing new gaussians: valid, not dynamic, opacity strictly below tau."""
    if m_d.bits.shape != opacity.shape or m_v.shape != opacity.shape:
        raise ValueError("shape mismatch")
    return Mask(~m_d.bits & m_v & (opacity < tau_map))


# ---------------------------------------------------------------------------
# optimizer


class _Adam:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mh = self.m / (1 - b1 ** self.t)
        vh = self.v / (1 - b2 ** self.t)
        return -lr * mh / (np.sqrt(vh) + eps)


class MapOptimizer:
    """Adam over (position, quaternion, log-scale, logit-opacity, color).

    Scale and opacity are optimized in log / logit space so the configured
    learning rates act multiplicatively, matching common splatting practice;
    quaternions are renormalized after each step.
    """

    OPACITY_LIM = (1e-4, 1.0 - 1e-4)
    SCALE_LIM = (1e-5, 2.0)

    def __init__(self, gmap: GaussianMap, cfg: MappingConfig, global_step: int = 0):
        self.gmap = gmap
        self.cfg = cfg
        self.global_step = global_step
        n = len(gmap)
        self.opt = {
            "mean": _Adam((n, 3)),
            "quat": _Adam((n, 4)),
            "log_scale": _Adam((n, 3)),
            "logit_op": _Adam((n,)),
            "color": _Adam((n, 3)),
        }

    def position_lr(self) -> float:
        c = self.cfg
        if c.lr_position_decay_steps <= 0:
            return c.lr_position
        frac = min(self.global_step / c.lr_position_decay_steps, 1.0)
        return float(c.lr_position * (c.lr_position_final / c.lr_position) ** frac)

    def apply(self, grads):
        # transforms below are applied only where the step is nonzero, so a
        # zero gradient is an exact no-op (log/exp round-trips would otherwise
        # drift parameters by an ulp and break fixed points)
        g = self.gmap
        c = self.cfg
        g.means += self.opt["mean"].step(grads.d_mean, self.position_lr())
        q_step = self.opt["quat"].step(grads.d_rotation, c.lr_rotation)
        rows = np.any(q_step != 0.0, axis=1)
        if rows.any():
            q = g.quats[rows] + q_step[rows]
            g.quats[rows] = q / np.linalg.norm(q, axis=1, keepdims=True)
        d_log_s = grads.d_scale * g.scales
        s_step = self.opt["log_scale"].step(d_log_s, c.lr_scale)
        rows = np.any(s_step != 0.0, axis=1)
        if rows.any():
            g.scales[rows] = np.clip(
                g.scales[rows] * np.exp(s_step[rows]), *self.SCALE_LIM
            )
        o = np.clip(g.opacities, *self.OPACITY_LIM)
        d_logit = grads.d_opacity * o * (1.0 - o)
        o_step = self.opt["logit_op"].step(d_logit, c.lr_opacity)
        rows = o_step != 0.0
        if rows.any():
            logit = np.log(o[rows] / (1.0 - o[rows])) + o_step[rows]
            g.opacities[rows] = np.clip(1.0 / (1.0 + np.exp(-logit)), *self.OPACITY_LIM)
        c_step = self.opt["color"].step(grads.d_color, c.lr_color)
        rows = np.any(c_step != 0.0, axis=1)
        if rows.any():
            g.colors[rows] = np.clip(g.colors[rows] + c_step[rows], 0.0, 1.0)
        self.global_step += 1


# ---------------------------------------------------------------------------
# mapping losses and steps


@dataclass
class Keyframe:
    index: int
    frame: FrameRGBD
    pose: PoseSE3
    dyn_mask: Mask


@dataclass
class DynamicModelSnapshot:
    """Per-object gaussians at one time step, tied to the mask they came from."""

    t: int
    gaussians: GaussianMap
    source_mask: Mask


def mapping_loss_and_grads(
    gmap: GaussianMap,
    frame: FrameRGBD,
    pose: PoseSE3,
    m_map: Mask,
    K: CameraIntrinsics,
    cfg: MappingConfig,
    settings: RenderSettings,
):
    """Composite mapping loss and its render-input gradients for one view.

    Returns (loss, d_color, d_depth, out); the scale-regularizer gradient is
    added separately since it bypasses the renderer.
    """
    out = render(gmap, pose, K, settings)
    m = m_map.bits
    n = int(m.sum())
    if n == 0:
        return None
    l1 = float(np.abs(out.color - frame.color)[m].sum()) / n
    # both images are masked before the structural term so pixels outside
    # M_map contribute exactly zero loss and zero gradient despite the
    # windowed statistics
    mw = m[:, :, None]
    ssim_val, ssim_grad = ssim_with_grad(out.color * mw, frame.color * mw, m_map)
    l_i = (1.0 - cfg.lambda_ssim) * l1 + cfg.lambda_ssim * (1.0 - ssim_val)
    l_d = float(np.abs(out.depth - frame.depth)[m].sum()) / n
    l_reg = scale_regularization(gmap)
    loss = cfg.lambda_color * l_i + cfg.lambda_depth * l_d + cfg.lambda_reg * l_reg

    d_color = np.zeros_like(out.color)
    d_color[m] = cfg.lambda_color * (1.0 - cfg.lambda_ssim) * np.sign(out.color - frame.color)[m] / n
    d_color[m] += cfg.lambda_color * cfg.lambda_ssim * (-ssim_grad)[m]
    d_depth = np.zeros_like(out.depth)
    d_depth[m] = cfg.lambda_depth * np.sign(out.depth - frame.depth)[m] / n
    return loss, d_color, d_depth, out


def _optimize_views(gmap, views, cfg, K, settings, global_step):
    """Run cfg.iterations Adam steps cycling over (frame, pose, mask) views.

    Returns (losses, mean screen-space gradient norm per gaussian).
    """
    opt = MapOptimizer(gmap, cfg, global_step)
    losses = []
    grad_accum = np.zeros(len(gmap))
    grad_hits = np.zeros(len(gmap))
    for it in range(cfg.iterations):
        frame, pose, m_map = views[it % len(views)]
        res = mapping_loss_and_grads(gmap, frame, pose, m_map, K, cfg, settings)
        if res is None:
            continue
        loss, d_color, d_depth, out = res
        if not np.isfinite(loss):
            raise RuntimeError("non-finite mapping loss")
        losses.append(loss)
        grads = render_backward(gmap, pose, K, out, d_color, d_depth, None, settings)
        grads.d_scale += cfg.lambda_reg * scale_regularization_grad(gmap)
        opt.apply(grads)
        contributed = grads.view_grad_norm > 0
        grad_accum[contributed] += grads.view_grad_norm[contributed]
        grad_hits[contributed] += 1
    mean_grad = np.where(grad_hits > 0, grad_accum / np.maximum(grad_hits, 1), 0.0)
    return losses, mean_grad


def densify_and_prune(gmap: GaussianMap, mean_view_grad: np.ndarray, cfg: MappingConfig,
                      rng: np.random.Generator):
    """Split high-opacity, high-gradient gaussians; prune low-opacity ones."""
    n_before = len(gmap)
    dense = (gmap.opacities > cfg.densify_opacity) & (mean_view_grad > cfg.densify_grad)
    n_split = int(dense.sum())
    if n_split:
        idx = np.nonzero(dense)[0]
        axis = np.argmax(gmap.scales[idx], axis=1)
        offset = np.zeros((n_split, 3))
        offset[np.arange(n_split), axis] = 0.5 * gmap.scales[idx, axis]
        # rotate the offset into world space with each gaussian's frame
        from .geometry import quats_to_rotmats

        R = quats_to_rotmats(gmap.quats[idx])
        off_w = np.einsum("nij,nj->ni", R, offset)
        new_scales = gmap.scales[idx] / 1.6
        gmap.scales[idx] = new_scales
        means_orig = gmap.means[idx].copy()
        gmap.means[idx] = means_orig - off_w
        gmap.add(means_orig + off_w, gmap.quats[idx], new_scales,
                 gmap.opacities[idx], gmap.colors[idx])
    pruned = gmap.opacities < cfg.prune_opacity
    n_prune = int(pruned.sum())
    if n_prune:
        gmap.remove(~pruned)
    return {"split": n_split, "pruned": n_prune, "size_before": n_before, "size": len(gmap)}


def static_mapping_step(
    gmap: GaussianMap,
    keyframes: list,
    cfg: MappingConfig,
    K: CameraIntrinsics,
    settings: RenderSettings,
    rng: np.random.Generator,
    global_step: int = 0,
    pixel_stride: int = 2,
    init_opacity: float = 0.5,
    init_scale_factor: float = 0.5,
) -> dict:
    """Insert gaussians for the newest keyframe's holes, then optimize the map
    over the newest plus a random sample of past keyframes; finally densify
    and prune."""
    if not keyframes:
        raise ValueError("need at least one keyframe")
    newest = keyframes[-1]
    inserted = 0
    out = render(gmap, newest.pose, K, settings) if len(gmap) else None
    opacity = out.opacity if out is not None else np.zeros(newest.frame.shape)
    m_ins = insertion_mask(newest.dyn_mask, newest.frame.valid_mask, opacity, cfg.tau_map)
    if not m_ins.empty():
        fresh = backproject(
            newest.frame, K, newest.pose, m_ins,
            stride=pixel_stride, init_opacity=init_opacity, scale_factor=init_scale_factor,
        )
        if len(fresh):
            gmap.add(fresh.means, fresh.quats, fresh.scales, fresh.opacities, fresh.colors)
            inserted = len(fresh)

    past = keyframes[:-1]
    sample = list(rng.choice(len(past), size=min(cfg.keyframe_sample, len(past)),
                             replace=False)) if past else []
    views = [(newest.frame, newest.pose, Mask(~newest.dyn_mask.bits & newest.frame.valid_mask))]
    for i in sorted(int(s) for s in sample):
        kf = past[i]
        views.append((kf.frame, kf.pose, Mask(~kf.dyn_mask.bits & kf.frame.valid_mask)))

    losses, mean_grad = _optimize_views(gmap, views, cfg, K, settings, global_step)
    stats = densify_and_prune(gmap, mean_grad, cfg, rng)
    stats.update(inserted=inserted, first_loss=losses[0] if losses else None,
                 last_loss=losses[-1] if losses else None)
    return stats


def init_dynamic_model(
    frame: FrameRGBD,
    mask: Mask,
    T: PoseSE3,
    K: CameraIntrinsics,
    t: int,
    pixel_stride: int = 2,
    init_opacity: float = 0.5,
    init_scale_factor: float = 0.5,
) -> DynamicModelSnapshot:
    """Back-project the object's masked pixels into a fresh gaussian snapshot."""
    if not (mask.bits & frame.valid_mask).any():
        raise ValueError("no valid object depth")
    gm = backproject(frame, K, T, mask, stride=pixel_stride,
                     init_opacity=init_opacity, scale_factor=init_scale_factor)
    if len(gm) == 0:
        # stride grid may have missed a tiny mask; retry densely
        gm = backproject(frame, K, T, mask, stride=1,
                         init_opacity=init_opacity, scale_factor=init_scale_factor)
    return DynamicModelSnapshot(t=t, gaussians=gm, source_mask=mask)


def dynamic_mapping_step(
    snapshot: DynamicModelSnapshot,
    frame: FrameRGBD,
    mask: Mask,
    pose: PoseSE3,
    cfg: MappingConfig,
    K: CameraIntrinsics,
    settings: RenderSettings,
    global_step: int = 0,
) -> dict:
    """Optimize a dynamic snapshot against its frame, restricted to the mask."""
    m_map = Mask(mask.bits & frame.valid_mask)
    if m_map.empty():
        raise ValueError("no valid object pixels")
    views = [(frame, pose, m_map)]
    losses, _ = _optimize_views(snapshot.gaussians, views, cfg, K, settings, global_step)
    return {"first_loss": losses[0] if losses else None,
            "last_loss": losses[-1] if losses else None,
            "size": len(snapshot.gaussians)}
