"""Dynamic object handling: map/observation inconsistency, prompt-driven
segmentation, and bidirectional per-object mask tracks.

The detection cue is disagreement between the rendered static map and the
live frame.  Within the inconsistent region, the depth sign separates the two
causes: observed-closer-than-rendered means a new occluder (the object),
observed-farther means freshly exposed background.  A prompt point at the
center of the largest inscribed circle of the dynamic region seeds a
full-object segmentation, after which the object is tracked backward through
history and forward with the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import DetectConfig
from .render import RenderOutput
from .scene import FrameRGBD, Mask

_CROSS = ndimage.generate_binary_structure(2, 1)
_EIGHT = np.ones((3, 3), dtype=bool)


class SegmentationOverflow(RuntimeError):
    """Region growth exceeded max_region_fraction of the image."""


class EmptyMaskError(ValueError):
    pass


@dataclass
class InconsistencyMaps:
    i_err: np.ndarray   # (H, W) per-pixel L2 color error over RGB
    d_err: np.ndarray   # (H, W) per-pixel |depth| error, meters
    m_ic: Mask          # inconsistent region
    m_ic_dyn: Mask      # inconsistent region attributed to dynamic occluders
    tau_color: float
    tau_depth: float
    status: str | None = None


def inconsistency(
    frame: FrameRGBD,
    rendered: RenderOutput,
    mult_color: float = 20.0,
    mult_depth: float = 20.0,
    cfg: DetectConfig | None = None,
) -> InconsistencyMaps:
    """Threshold photometric/geometric error at a multiple of its median.

    Pixels outside the frame's validity mask or with rendered opacity below
    ``tau_cover`` (unmapped regions) are excluded.  A zero (or tiny) median is
    floored to an absolute threshold so perfect reconstructions stay clean.
    """
    cfg = cfg or DetectConfig()
    if frame.shape != rendered.shape:
        raise ValueError("frame/render shape mismatch")
    i_err = np.linalg.norm(frame.color - rendered.color, axis=2)
    d_err = np.abs(frame.depth - rendered.depth)
    covered = frame.valid_mask & (rendered.opacity >= cfg.tau_cover)
    if not covered.any():
        empty = Mask.none(frame.shape)
        return InconsistencyMaps(i_err, d_err, empty, empty, cfg.floor_color,
                                 cfg.floor_depth, status="no valid covered pixels")
    tau_c = max(mult_color * float(np.median(i_err[covered])), cfg.floor_color)
    tau_d = max(mult_depth * float(np.median(d_err[covered])), cfg.floor_depth)
    m_ic = covered & ((i_err > tau_c) | (d_err > tau_d))
    m_dyn = m_ic & ((frame.depth - rendered.depth) < 0)
    return InconsistencyMaps(i_err, d_err, Mask(m_ic), Mask(m_dyn), tau_c, tau_d)


def prompt_point(m: Mask) -> tuple[int, int]:
    """Center (u, v) of the maximum inscribed circle of the largest component.

    Ties resolved toward the smallest row, then column.
    """
    if m.empty():
        raise EmptyMaskError("no dynamic region")
    labels, n = ndimage.label(m.bits, structure=_EIGHT)
    if n > 1:
        areas = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
        comp = labels == (int(np.argmax(areas)) + 1)
    else:
        comp = m.bits
    padded = np.zeros((comp.shape[0] + 2, comp.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = comp
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    best = np.argwhere(dist == dist.max())[0]  # argwhere is row-major sorted
    return int(best[1]), int(best[0])


def mask_center(m: Mask) -> tuple[int, int]:
    """Representative interior point of a mask (inscribed-circle center)."""
    return prompt_point(m)


class RegionGrowingBackend:
    """Default promptable segmenter: joint depth/color region growing.

    Grows over the 8-neighborhood; a pixel joins when its depth differs from
    the neighbor it is reached through by less than ``delta_depth`` (so growth
    is bounded by depth discontinuities) and its color by less than
    ``delta_color``.  Raises :class:`SegmentationOverflow` when the region
    exceeds ``max_region_fraction`` of the image.
    """

    def __init__(self, delta_depth: float = 0.05, delta_color: float = 0.15,
                 max_region_fraction: float = 0.5):
        self.delta_depth = delta_depth
        self.delta_color = delta_color
        self.max_region_fraction = max_region_fraction

    def segment(self, frame: FrameRGBD, prompt: tuple[int, int]) -> Mask:
        u, v = int(prompt[0]), int(prompt[1])
        H, W = frame.shape
        if not (0 <= u < W and 0 <= v < H):
            raise ValueError("prompt outside image")
        if not frame.valid_mask[v, u]:
            return Mask.none(frame.shape)
        depth = frame.depth
        color = frame.color
        valid = frame.valid_mask
        region = np.zeros((H, W), dtype=bool)
        region[v, u] = True
        frontier = region.copy()
        limit = self.max_region_fraction * H * W
        shifts = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
        while frontier.any():
            grown = np.zeros_like(region)
            for dy, dx in shifts:
                ys0, ys1 = max(0, -dy), min(H, H - dy)
                xs0, xs1 = max(0, -dx), min(W, W - dx)
                src = frontier[ys0:ys1, xs0:xs1]
                if not src.any():
                    continue
                yd0, yd1 = ys0 + dy, ys1 + dy
                xd0, xd1 = xs0 + dx, xs1 + dx
                cand = (
                    src
                    & valid[yd0:yd1, xd0:xd1]
                    & ~region[yd0:yd1, xd0:xd1]
                    & (np.abs(depth[yd0:yd1, xd0:xd1] - depth[ys0:ys1, xs0:xs1]) < self.delta_depth)
                    & (
                        np.linalg.norm(
                            color[yd0:yd1, xd0:xd1] - color[ys0:ys1, xs0:xs1], axis=2
                        )
                        < self.delta_color
                    )
                )
                grown[yd0:yd1, xd0:xd1] |= cand
            grown &= ~region
            region |= grown
            if region.sum() > limit:
                raise SegmentationOverflow(
                    f"segmentation overflow: region exceeds {self.max_region_fraction:.0%} of image"
                )
            frontier = grown
        return Mask(region)


def segment_object(backend, frame: FrameRGBD, prompt: tuple[int, int]) -> Mask:
    """Full-object mask from a prompt point via the pluggable backend."""
    return backend.segment(frame, prompt)


@dataclass
class DynamicObject:
    """Per-object identity and time-indexed track state."""

    id: int
    detected_at: int
    masks: dict = field(default_factory=dict)        # t -> Mask
    centers: dict = field(default_factory=dict)      # t -> (u, v)
    visibility: dict = field(default_factory=dict)   # t -> bool
    snapshots: dict = field(default_factory=dict)    # t -> DynamicModelSnapshot
    active: bool = True
    termination_reason: str | None = None

    def record(self, t: int, mask: Mask):
        self.masks[t] = mask
        self.centers[t] = mask_center(mask)
        self.visibility[t] = True

    def last_time(self) -> int:
        return max(self.masks.keys())

    def latest_mask(self) -> Mask:
        return self.masks[self.last_time()]


@dataclass
class ObjectRegistry:
    objects: list = field(default_factory=list)
    next_id: int = 0

    def new_object(self, t: int) -> DynamicObject:
        obj = DynamicObject(id=self.next_id, detected_at=t)
        self.next_id += 1
        self.objects.append(obj)
        return obj

    def active(self) -> list:
        return [o for o in self.objects if o.active]

    def union_mask_at(self, t: int, shape) -> Mask:
        """Union of masks recorded at time t over objects visible then."""
        bits = np.zeros(shape, dtype=bool)
        for o in self.objects:
            if o.visibility.get(t) and t in o.masks:
                bits |= o.masks[t].bits
        return Mask(bits)

    def union_latest_active(self, shape) -> Mask:
        """Union of the most recent masks of currently active objects."""
        bits = np.zeros(shape, dtype=bool)
        for o in self.active():
            bits |= o.latest_mask().bits
        return Mask(bits)


def terminate_check(
    obj: DynamicObject,
    candidate: Mask,
    image_size: tuple[int, int],
    cfg: DetectConfig | None = None,
    prev_time: int | None = None,
) -> str | None:
    """Tracking-termination rules; returns a reason string or None to continue.

    Terminates when the candidate center comes within ``border_margin`` of an
    image border, the mask area grows by more than ``area_growth`` x, or the
    center jumps over ``center_jump`` x the image diagonal in one frame.
    """
    cfg = cfg or DetectConfig()
    W, H = image_size
    if candidate.empty():
        return "lost: empty mask"
    cu, cv = mask_center(candidate)
    if cu < cfg.border_margin * W or cu > (1 - cfg.border_margin) * W:
        return "center near horizontal image boundary"
    if cv < cfg.border_margin * H or cv > (1 - cfg.border_margin) * H:
        return "center near vertical image boundary"
    t_prev = prev_time if prev_time is not None else obj.last_time()
    prev_mask = obj.masks[t_prev]
    if candidate.area() > cfg.area_growth * prev_mask.area():
        return f"mask area grew over {cfg.area_growth}x"
    pu, pv = obj.centers[t_prev]
    diag = float(np.hypot(W, H))
    if np.hypot(cu - pu, cv - pv) > cfg.center_jump * diag:
        return f"center jumped over {cfg.center_jump:.0%} of the image diagonal"
    return None


def track_backward(obj: DynamicObject, frames: list, backend, cfg: DetectConfig | None = None):
    """Trace the object back through history from its detection frame.

    ``frames[k]`` must be the FrameRGBD at index k; stops at frame 0, on a
    termination rule, or when segmentation fails/overflows (the object only
    entered the view at detection time).
    """
    cfg = cfg or DetectConfig()
    t = obj.detected_at
    for k in range(t - 1, -1, -1):
        frame = frames[k]
        H, W = frame.shape
        try:
            mask = segment_object(backend, frame, obj.centers[k + 1])
        except SegmentationOverflow:
            break
        reason = terminate_check(obj, mask, (W, H), cfg, prev_time=k + 1)
        if reason is not None:
            break
        obj.record(k, mask)


def track_forward(obj: DynamicObject, frame: FrameRGBD, t: int, backend,
                  cfg: DetectConfig | None = None):
    """Propagate the object's mask to the new frame; applies termination rules."""
    cfg = cfg or DetectConfig()
    if not obj.active:
        return
    H, W = frame.shape
    prev_t = obj.last_time()
    try:
        mask = segment_object(backend, frame, obj.centers[prev_t])
    except SegmentationOverflow:
        obj.active = False
        obj.visibility[t] = False
        obj.termination_reason = "segmentation overflow"
        return
    reason = terminate_check(obj, mask, (W, H), cfg, prev_time=prev_t)
    if reason is not None:
        obj.active = False
        obj.visibility[t] = False
        obj.termination_reason = reason
        return
    obj.record(t, mask)


def detect(
    frame: FrameRGBD,
    rendered: RenderOutput,
    registry: ObjectRegistry,
    t: int,
    backend,
    history: list | None = None,
    cfg: DetectConfig | None = None,
) -> list:
    """Detect new dynamic objects at frame t; returns the newly registered ones.

    Each connected component of the (morphologically opened) dynamic
    inconsistency mask that does not substantially lie inside an active
    object's current mask spawns a new object, which is immediately tracked
    backward through ``history``.
    """
    cfg = cfg or DetectConfig()
    maps = inconsistency(frame, rendered, cfg.mult_color, cfg.mult_depth, cfg)
    bits = maps.m_ic_dyn.bits
    if cfg.opening_radius > 0:
        bits = ndimage.binary_opening(bits, structure=_CROSS, iterations=cfg.opening_radius)
    labels, n = ndimage.label(bits, structure=_EIGHT)
    new_objects = []
    H, W = frame.shape
    for li in range(1, n + 1):
        comp = labels == li
        area = int(comp.sum())
        if area < cfg.min_component_area:
            continue
        matched = False
        for obj in registry.active():
            m = obj.masks.get(t, obj.latest_mask())
            overlap = np.logical_and(comp, m.bits).sum() / area
            if overlap > cfg.overlap_match:
                matched = True
                break
        if matched:
            continue
        try:
            prompt = prompt_point(Mask(comp))
            mask = segment_object(backend, frame, prompt)
        except (SegmentationOverflow, EmptyMaskError):
            continue
        if mask.empty():
            continue
        obj = registry.new_object(t)
        obj.record(t, mask)
        new_objects.append(obj)
        if history is not None and t > 0:
            track_backward(obj, history, backend, cfg)
    return new_objects
