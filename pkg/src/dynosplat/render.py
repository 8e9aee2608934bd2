"""Differentiable gaussian splatting: forward rasterization and analytic backward.

Forward model per pixel, over splats sorted by camera depth (id tie-break):

    alpha_i = min(o_i * exp(-0.5 dᵀ Sigma2d⁻¹ d), alpha_clamp)
    I = sum c_i alpha_i T_i,   D = sum z_i alpha_i T_i,   O = sum alpha_i T_i
    T_i = prod_{j<i} (1 - alpha_j)

Contributions with ``alpha < alpha_min`` are dropped and compositing stops
once ``T < trans_eps``; both rules are part of the rendering contract and are
applied identically by :func:`render` (bucketed fragments) and
:func:`render_reference` (dense per-pixel loop), which is why the two agree to
float64 rounding.

The backward pass consumes the compositing tape saved by the forward pass and
chains analytically through the blending, the alpha expression, the 2D
covariance (including the dependence of the projection Jacobian on the camera
-frame mean) and the world-to-camera transform.  The pose gradient lives in
the 6-dim SE(3) tangent, left-multiplicative convention ``T <- exp(d) T``
with rotation components first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RenderSettings
from .geometry import CameraIntrinsics, PoseSE3
from .scene import Gaussian3D, GaussianMap, covariance, covariances, quats_to_rotmats

_DEFAULT = RenderSettings()


@dataclass(frozen=True)
class Splat2D:
    """A gaussian projected into screen space (covariance without blur floor)."""

    mean2d: np.ndarray     # (2,) px
    cov2d: np.ndarray      # (2, 2) px^2
    cam_depth: float       # m
    source_id: int


@dataclass
class RenderGradients:
    """Per-gaussian parameter gradients plus the SE(3) pose tangent gradient."""

    d_mean: np.ndarray      # (N, 3)
    d_rotation: np.ndarray  # (N, 4) w.r.t. the raw quaternion
    d_scale: np.ndarray     # (N, 3)
    d_opacity: np.ndarray   # (N,)
    d_color: np.ndarray     # (N, 3)
    d_pose: np.ndarray      # (6,) (wx, wy, wz, vx, vy, vz)
    view_grad_norm: np.ndarray  # (N,) accumulated screen-space positional gradient norm


@dataclass
class RenderOutput:
    """Rendered images plus the compositing tape needed for the backward pass.

    The tape is stored flat, sorted by pixel then blend order:
    ``(tape_pixel, tape_source, tape_alpha, tape_trans)`` — source is the
    gaussian id, trans the transmittance *before* the splat.
    """

    color: np.ndarray    # (H, W, 3)
    depth: np.ndarray    # (H, W)
    opacity: np.ndarray  # (H, W)
    tape_pixel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tape_source: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    tape_alpha: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tape_trans: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # internal: fragment -> kept-splat index, and kept-splat projection cache
    _frag_kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _kept_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _mean2d: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    _conic: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))
    _mu_cam: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def shape(self):
        return self.depth.shape


def _check_finite(gmap: GaussianMap):
    for name in ("means", "quats", "scales", "opacities", "colors"):
        arr = getattr(gmap, name)
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.nonzero(bad.reshape(len(gmap), -1).any(axis=1))[0][0])
            raise ValueError(f"non-finite {name} in gaussian id {int(gmap.ids[idx])}")


def project_gaussian(
    g: Gaussian3D, T: PoseSE3, K: CameraIntrinsics, settings: RenderSettings = _DEFAULT
) -> Splat2D | None:
    """Project one gaussian; returns None when culled (behind camera / off-image)."""
    W, t_cw = T.world_to_camera()
    mu_cam = W @ g.mean + t_cw
    x, y, z = mu_cam
    if z <= settings.near_plane:
        return None
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    m = settings.cull_margin
    if u < -m or u > K.width - 1 + m or v < -m or v > K.height - 1 + m:
        return None
    J = np.array(
        [[K.fx / z, 0.0, -K.fx * x / z ** 2], [0.0, K.fy / z, -K.fy * y / z ** 2]]
    )
    sigma_cam = W @ covariance(g) @ W.T
    cov2d = J @ sigma_cam @ J.T
    return Splat2D(np.array([u, v]), cov2d, float(z), -1)


class _Projected:
    """Struct-of-arrays projection of the visible subset of a map."""

    __slots__ = (
        "index", "ids", "mu_cam", "mean2d", "z", "cov2d", "conic", "radius", "order", "W", "t_cw",
    )

    def __init__(self, gmap: GaussianMap, T: PoseSE3, K: CameraIntrinsics, s: RenderSettings):
        W, t_cw = T.world_to_camera()
        self.W, self.t_cw = W, t_cw
        mu_cam = gmap.means @ W.T + t_cw
        z = mu_cam[:, 2]
        keep = z > s.near_plane
        with np.errstate(divide="ignore", invalid="ignore"):
            u = K.fx * mu_cam[:, 0] / z + K.cx
            v = K.fy * mu_cam[:, 1] / z + K.cy
        m = s.cull_margin
        keep &= np.where(
            keep,
            (u >= -m) & (u <= K.width - 1 + m) & (v >= -m) & (v <= K.height - 1 + m),
            False,
        )
        keep &= gmap.opacities > s.alpha_min
        idx = np.nonzero(keep)[0]
        self.index = idx
        self.ids = gmap.ids[idx]
        self.mu_cam = mu_cam[idx]
        self.z = z[idx]
        self.mean2d = np.stack([u[idx], v[idx]], axis=1)
        sigma_w = covariances(gmap.quats[idx], gmap.scales[idx])
        sigma_cam = np.einsum("ab,nbc,dc->nad", W, sigma_w, W)
        J = self._jacobians(K)
        cov2d = np.einsum("nab,nbc,ndc->nad", J, sigma_cam, J)
        cov2d = 0.5 * (cov2d + cov2d.transpose(0, 2, 1))
        self.cov2d = cov2d
        a = cov2d[:, 0, 0] + s.blur_floor
        b = cov2d[:, 0, 1]
        c = cov2d[:, 1, 1] + s.blur_floor
        det = a * c - b * b
        conic = np.empty_like(cov2d)
        conic[:, 0, 0] = c / det
        conic[:, 0, 1] = -b / det
        conic[:, 1, 0] = -b / det
        conic[:, 1, 1] = a / det
        self.conic = conic
        lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
        # largest distance at which alpha could still reach alpha_min
        self.radius = np.sqrt(
            2.0 * lam_max * np.log(np.maximum(gmap.opacities[idx] / s.alpha_min, 1.0 + 1e-12))
        )
        self.order = np.lexsort((self.ids, self.z))

    def _jacobians(self, K: CameraIntrinsics) -> np.ndarray:
        n = self.mu_cam.shape[0]
        x, y, z = self.mu_cam.T
        J = np.zeros((n, 2, 3))
        J[:, 0, 0] = K.fx / z
        J[:, 0, 2] = -K.fx * x / z ** 2
        J[:, 1, 1] = K.fy / z
        J[:, 1, 2] = -K.fy * y / z ** 2
        return J


def _empty_output(K: CameraIntrinsics) -> RenderOutput:
    H, W = K.height, K.width
    return RenderOutput(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)))


def render(
    gmap: GaussianMap, T: PoseSE3, K: CameraIntrinsics, settings: RenderSettings = _DEFAULT
) -> RenderOutput:
    """Rasterize the map. Deterministic: fixed depth/id ordering, no data races."""
    _check_finite(gmap)
    if len(gmap) == 0:
        return _empty_output(K)
    P = _Projected(gmap, T, K, settings)
    n = P.index.size
    if n == 0:
        return _empty_output(K)
    H, Wd = K.height, K.width

    # integer pixel bounding boxes per splat
    x0 = np.maximum(np.ceil(P.mean2d[:, 0] - P.radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(P.mean2d[:, 0] + P.radius), Wd - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(P.mean2d[:, 1] - P.radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(P.mean2d[:, 1] + P.radius), H - 1).astype(np.int64)
    bw = x1 - x0 + 1
    bh = y1 - y0 + 1
    nonempty = (bw > 0) & (bh > 0)
    counts = np.where(nonempty, bw * bh, 0)
    total = int(counts.sum())
    if total == 0:
        return _empty_output(K)

    rank = np.empty(n, dtype=np.int64)
    rank[P.order] = np.arange(n)

    frag_splat = np.repeat(np.arange(n), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offsets, counts)
    fw = np.repeat(bw, counts)
    px = np.repeat(x0, counts) + local % fw
    py = np.repeat(y0, counts) + local // fw

    dx = px - P.mean2d[frag_splat, 0]
    dy = py - P.mean2d[frag_splat, 1]
    ca = P.conic[frag_splat, 0, 0]
    cb = P.conic[frag_splat, 0, 1]
    cc = P.conic[frag_splat, 1, 1]
    power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
    alpha = np.minimum(
        gmap.opacities[P.index][frag_splat] * np.exp(power), settings.alpha_clamp
    )
    keep = alpha >= settings.alpha_min
    frag_splat = frag_splat[keep]
    px, py, alpha = px[keep], py[keep], alpha[keep]

    pixel = py * Wd + px
    # sort by pixel, then depth rank; keys are unique so order is total
    key = pixel * n + rank[frag_splat]
    srt = np.argsort(key, kind="stable")
    pixel, frag_splat, alpha = pixel[srt], frag_splat[srt], alpha[srt]

    # per-pixel transmittance before each fragment, via segmented log-products
    m = pixel.size
    log1m = np.log1p(-alpha)
    cs = np.concatenate([[0.0], np.cumsum(log1m)[:-1]])
    newseg = np.empty(m, dtype=bool)
    newseg[0] = True
    newseg[1:] = pixel[1:] != pixel[:-1]
    seg_id = np.cumsum(newseg) - 1
    seg_base = cs[newseg][seg_id]
    trans = np.exp(cs - seg_base)

    live = trans >= settings.trans_eps
    pixel, frag_splat, alpha, trans = pixel[live], frag_splat[live], alpha[live], trans[live]

    w = alpha * trans
    npix = H * Wd
    out_o = np.bincount(pixel, weights=w, minlength=npix)
    out_d = np.bincount(pixel, weights=w * P.z[frag_splat], minlength=npix)
    cols = gmap.colors[P.index]
    out_c = np.stack(
        [np.bincount(pixel, weights=w * cols[frag_splat, ch], minlength=npix) for ch in range(3)],
        axis=1,
    )
    return RenderOutput(
        color=out_c.reshape(H, Wd, 3),
        depth=out_d.reshape(H, Wd),
        opacity=out_o.reshape(H, Wd),
        tape_pixel=pixel,
        tape_source=P.ids[frag_splat],
        tape_alpha=alpha,
        tape_trans=trans,
        _frag_kept=frag_splat,
        _kept_index=P.index,
        _mean2d=P.mean2d,
        _conic=P.conic,
        _mu_cam=P.mu_cam,
    )


def render_reference(
    gmap: GaussianMap, T: PoseSE3, K: CameraIntrinsics, settings: RenderSettings = _DEFAULT
) -> RenderOutput:
    """Brute-force oracle: full-image alpha evaluation per splat, no bounding
    boxes, no fragment bucketing.  Same rendering contract as :func:`render`."""
    _check_finite(gmap)
    H, Wd = K.height, K.width
    splats = []
    for i in range(len(gmap)):
        sp = project_gaussian(gmap.gaussian(i), T, K, settings)
        if sp is not None and gmap.opacities[i] > settings.alpha_min:
            splats.append((sp.cam_depth, int(gmap.ids[i]), i, sp))
    splats.sort(key=lambda rec: (rec[0], rec[1]))
    out = _empty_output(K)
    if not splats:
        return out
    us, vs = np.meshgrid(np.arange(Wd, dtype=np.float64), np.arange(H, dtype=np.float64))
    trans = np.ones((H, Wd))
    tape = []
    for order_i, (zdepth, gid, i, sp) in enumerate(splats):
        cov = sp.cov2d + settings.blur_floor * np.eye(2)
        conic = np.linalg.inv(cov)
        dx = us - sp.mean2d[0]
        dy = vs - sp.mean2d[1]
        power = -0.5 * (
            conic[0, 0] * dx * dx + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
        )
        alpha = np.minimum(gmap.opacities[i] * np.exp(power), settings.alpha_clamp)
        contrib = (alpha >= settings.alpha_min) & (trans >= settings.trans_eps)
        a = np.where(contrib, alpha, 0.0)
        wgt = a * trans
        out.opacity += wgt
        out.depth += wgt * zdepth
        out.color += wgt[:, :, None] * gmap.colors[i]
        if contrib.any():
            ys, xs = np.nonzero(contrib)
            tape.append(
                (
                    ys * Wd + xs,
                    np.full(ys.size, gid, dtype=np.int64),
                    alpha[ys, xs],
                    trans[ys, xs],
                    np.full(ys.size, order_i, dtype=np.int64),
                )
            )
        trans = trans * np.where(contrib, 1.0 - alpha, 1.0)
    if tape:
        pix = np.concatenate([t[0] for t in tape])
        src = np.concatenate([t[1] for t in tape])
        alf = np.concatenate([t[2] for t in tape])
        trn = np.concatenate([t[3] for t in tape])
        ord_ = np.concatenate([t[4] for t in tape])
        srt = np.lexsort((ord_, pix))
        out.tape_pixel, out.tape_source = pix[srt], src[srt]
        out.tape_alpha, out.tape_trans = alf[srt], trn[srt]
    return out


def _segment_suffix(values: np.ndarray, newseg: np.ndarray, seg_id: np.ndarray) -> np.ndarray:
    """Per element, the sum of the *following* values within its segment."""
    incl = np.cumsum(values)
    base = np.concatenate([[0.0], incl])[np.nonzero(newseg)[0]][seg_id]
    incl_within = incl - base
    starts = np.nonzero(newseg)[0]
    totals = np.add.reduceat(values, starts)
    return totals[seg_id] - incl_within


def render_backward(
    gmap: GaussianMap,
    T: PoseSE3,
    K: CameraIntrinsics,
    output: RenderOutput,
    d_color: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
    d_opacity: np.ndarray | None = None,
    settings: RenderSettings = _DEFAULT,
) -> RenderGradients:
    """Analytic gradients of ``sum(d_color*I) + sum(d_depth*D) + sum(d_opacity*O)``.

    ``output`` must come from :func:`render` on the same (map, pose, camera);
    gaussians that contributed to no pixel get exactly zero gradient.
    """
    H, Wd = K.height, K.width
    if d_color is None:
        d_color = np.zeros((H, Wd, 3))
    if d_depth is None:
        d_depth = np.zeros((H, Wd))
    if d_opacity is None:
        d_opacity = np.zeros((H, Wd))
    if d_color.shape != (H, Wd, 3) or d_depth.shape != (H, Wd) or d_opacity.shape != (H, Wd):
        raise ValueError("loss gradient shape mismatch")
    if output.shape != (H, Wd):
        raise ValueError("tape shape mismatch")

    N = len(gmap)
    grads = RenderGradients(
        d_mean=np.zeros((N, 3)),
        d_rotation=np.zeros((N, 4)),
        d_scale=np.zeros((N, 3)),
        d_opacity=np.zeros(N),
        d_color=np.zeros((N, 3)),
        d_pose=np.zeros(6),
        view_grad_norm=np.zeros(N),
    )
    m = output.tape_pixel.size
    if m == 0:
        return grads

    kept = output._kept_index          # kept-splat -> map row
    fs = output._frag_kept             # fragment -> kept-splat row
    pixel = output.tape_pixel
    alpha = output.tape_alpha
    trans = output.tape_trans
    W_rot, _ = T.world_to_camera()

    newseg = np.empty(m, dtype=bool)
    newseg[0] = True
    newseg[1:] = pixel[1:] != pixel[:-1]
    seg_id = np.cumsum(newseg) - 1

    dI = d_color.reshape(-1, 3)[pixel]     # (m, 3)
    dD = d_depth.reshape(-1)[pixel]
    dO = d_opacity.reshape(-1)[pixel]

    cols = gmap.colors[kept][fs]           # (m, 3)
    zs = output._mu_cam[fs, 2]
    w = alpha * trans

    # suffixes of accumulated contributions after each fragment
    suf_c = np.stack(
        [_segment_suffix(w * cols[:, ch], newseg, seg_id) for ch in range(3)], axis=1
    )
    suf_d = _segment_suffix(w * zs, newseg, seg_id)
    suf_o = _segment_suffix(w, newseg, seg_id)

    one_m = 1.0 - alpha
    d_alpha = (
        np.sum(dI * (trans[:, None] * cols - suf_c / one_m[:, None]), axis=1)
        + dD * (trans * zs - suf_d / one_m)
        + dO * (trans - suf_o / one_m)
    )

    # direct color / depth chains
    nk = kept.size
    for ch in range(3):
        grads.d_color[:, ch] += np.bincount(kept[fs], weights=dI[:, ch] * w, minlength=N)
    d_z_blend = np.bincount(fs, weights=dD * w, minlength=nk)

    opac = gmap.opacities[kept][fs]
    clamped = alpha >= settings.alpha_clamp
    g_val = np.where(clamped, 0.0, alpha / opac)   # zero kills the chain when clamped
    d_g = opac * d_alpha * ~clamped
    grads.d_opacity += np.bincount(
        kept[fs], weights=np.where(clamped, 0.0, g_val * d_alpha), minlength=N
    )

    # alpha -> 2D mean and 2D covariance
    px = pixel % Wd
    py = pixel // Wd
    dx = px - output._mean2d[fs, 0]
    dy = py - output._mean2d[fs, 1]
    con = output._conic[fs]
    adx = con[:, 0, 0] * dx + con[:, 0, 1] * dy
    ady = con[:, 0, 1] * dx + con[:, 1, 1] * dy
    coef = d_g * g_val
    d_m2d = np.stack(
        [
            np.bincount(fs, weights=coef * adx, minlength=nk),
            np.bincount(fs, weights=coef * ady, minlength=nk),
        ],
        axis=1,
    )
    half = 0.5 * coef
    d_cov2d = np.zeros((nk, 2, 2))
    d_cov2d[:, 0, 0] = np.bincount(fs, weights=half * adx * adx, minlength=nk)
    xy = np.bincount(fs, weights=half * adx * ady, minlength=nk)
    d_cov2d[:, 0, 1] = xy
    d_cov2d[:, 1, 0] = xy
    d_cov2d[:, 1, 1] = np.bincount(fs, weights=half * ady * ady, minlength=nk)

    grads.view_grad_norm[kept] = np.hypot(d_m2d[:, 0], d_m2d[:, 1])

    # projection backward (vectorized over kept splats)
    mu_cam = output._mu_cam
    x, y, z = mu_cam.T
    J = np.zeros((kept.size, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2

    sigma_w = covariances(gmap.quats[kept], gmap.scales[kept])
    sigma_cam = np.einsum("ab,nbc,dc->nad", W_rot, sigma_w, W_rot)

    d_mu_cam = np.einsum("nba,nb->na", J, d_m2d)
    d_mu_cam[:, 2] += d_z_blend
    d_sigma_cam = np.einsum("nba,nbc,ncd->nad", J, d_cov2d, J)
    # J depends on mu_cam: dL/dJ = (G + G^T) J Sigma_cam, here G == d_cov2d is symmetric
    dJ = 2.0 * np.einsum("nab,nbc,ncd->nad", d_cov2d, J, sigma_cam)
    fx, fy = K.fx, K.fy
    d_mu_cam[:, 0] += dJ[:, 0, 2] * (-fx / z ** 2)
    d_mu_cam[:, 1] += dJ[:, 1, 2] * (-fy / z ** 2)
    d_mu_cam[:, 2] += (
        dJ[:, 0, 0] * (-fx / z ** 2)
        + dJ[:, 0, 2] * (2.0 * fx * x / z ** 3)
        + dJ[:, 1, 1] * (-fy / z ** 2)
        + dJ[:, 1, 2] * (2.0 * fy * y / z ** 3)
    )

    grads.d_mean[kept] = d_mu_cam @ W_rot
    d_sigma_w = np.einsum("ba,nbc,cd->nad", W_rot, d_sigma_cam, W_rot)
    d_sigma_w = 0.5 * (d_sigma_w + d_sigma_w.transpose(0, 2, 1))

    R = quats_to_rotmats(gmap.quats[kept])
    s = gmap.scales[kept]
    grads.d_scale[kept] = 2.0 * s * np.einsum("nik,nij,njk->nk", R, d_sigma_w, R)
    dR = 2.0 * np.einsum("nab,nbc->nac", d_sigma_w, R * (s ** 2)[:, None, :])
    grads.d_rotation[kept] = _rotmat_grad_to_quat(gmap.quats[kept], dR)

    # pose tangent: W(d) = W exp(-[w]x), t(d) = t - W v
    G_W = np.einsum("na,nb->ab", d_mu_cam, gmap.means[kept])
    G_W += 2.0 * np.einsum("nab,bc,ncd->ad", d_sigma_cam, W_rot, sigma_w)
    C = W_rot.T @ G_W
    d_omega = -np.array([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])
    d_nu = -W_rot.T @ d_mu_cam.sum(axis=0)
    grads.d_pose = np.concatenate([d_omega, d_nu])
    return grads


def _rotmat_grad_to_quat(quats: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain dL/dR -> dL/dq for (x,y,z,w) quaternions, through normalization."""
    n = quats.shape[0]
    norm = np.linalg.norm(quats, axis=1, keepdims=True)
    q = quats / norm
    qx, qy, qz, qw = q.T
    zero = np.zeros(n)
    # dR/dqx etc. for the unit quaternion (rows stacked per component)
    dRdx = np.stack(
        [zero, 2 * qy, 2 * qz, 2 * qy, -4 * qx, -2 * qw, 2 * qz, 2 * qw, -4 * qx], axis=1
    ).reshape(n, 3, 3)
    dRdy = np.stack(
        [-4 * qy, 2 * qx, 2 * qw, 2 * qx, zero, 2 * qz, -2 * qw, 2 * qz, -4 * qy], axis=1
    ).reshape(n, 3, 3)
    dRdz = np.stack(
        [-4 * qz, -2 * qw, 2 * qx, 2 * qw, -4 * qz, 2 * qy, 2 * qx, 2 * qy, zero], axis=1
    ).reshape(n, 3, 3)
    dRdw = np.stack(
        [zero, -2 * qz, 2 * qy, 2 * qz, zero, -2 * qx, -2 * qy, 2 * qx, zero], axis=1
    ).reshape(n, 3, 3)
    d_unit = np.stack(
        [
            np.einsum("nij,nij->n", dR, dRdx),
            np.einsum("nij,nij->n", dR, dRdy),
            np.einsum("nij,nij->n", dR, dRdz),
            np.einsum("nij,nij->n", dR, dRdw),
        ],
        axis=1,
    )
    # through q_hat = q / |q|
    proj = d_unit - np.sum(d_unit * q, axis=1, keepdims=True) * q
    return proj / norm
