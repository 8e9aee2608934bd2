"""Per-frame SLAM loop: track -> object update/detect -> separate -> map.

Frame 0 seeds the static map (anchored at the dataset's first ground-truth
pose when one is available, identity otherwise).  Every subsequent frame is
tracked against the static map with active object masks excluded; objects are
forward-tracked each frame; at the detection cadence the rendered map is
compared with the observation to find new movers, which are segmented,
back-tracked through history and excised from the static map.  Keyframes
trigger static map insertion/optimization and per-object snapshot updates.

All randomness flows from the config seed, so a rerun with the same inputs
produces a byte-identical run directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .dataset import (
    DatasetHandle,
    save_map_npz,
    write_map_ply,
    write_mask_png,
    write_trajectory,
)
from .detect import ObjectRegistry, RegionGrowingBackend, detect, track_forward
from .geometry import PoseSE3
from .mapping import (
    Keyframe,
    dynamic_mapping_step,
    init_dynamic_model,
    separate_dynamic,
    static_mapping_step,
)
from .metrics import Trajectory, psnr
from .render import render
from .scene import Mask, GaussianMap, backproject, merge_maps
from .tracking import TrackingDegenerateError, constant_velocity_init, optimize_pose


@dataclass
class RunResult:
    trajectory: Trajectory
    static_map: GaussianMap
    registry: ObjectRegistry
    keyframes: list
    logs: list
    aborted: str | None = None


def _log_entry(**kw):
    return {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in kw.items()}


def run_slam(dataset: DatasetHandle, cfg: PipelineConfig, out_dir=None,
             progress: bool = False) -> RunResult:
    cfg.validate()
    K = dataset.intrinsics
    rng = np.random.default_rng(cfg.seed)
    backend = RegionGrowingBackend(
        cfg.detect.delta_depth, cfg.detect.delta_color, cfg.detect.max_region_fraction
    )
    registry = ObjectRegistry()
    gmap = GaussianMap()
    keyframes: list[Keyframe] = []
    frames = []
    poses = []
    stamps = []
    logs = []
    mapping_steps = 0
    aborted = None

    first_pose = PoseSE3.identity()
    if dataset.gt_trajectory is not None and len(dataset.gt_trajectory):
        first_pose = dataset.gt_trajectory.poses[0]

    def dyn_mask_at(t, shape):
        if not cfg.dynamic_enabled:
            return Mask.none(shape)
        return registry.union_mask_at(t, shape)

    def refresh_keyframe_masks():
        for kf in keyframes:
            kf.dyn_mask = dyn_mask_at(kf.index, kf.frame.shape)

    def do_mapping(t):
        nonlocal mapping_steps
        refresh_keyframe_masks()
        stats = static_mapping_step(
            gmap, keyframes, cfg.mapping, K, cfg.render, rng,
            global_step=mapping_steps, pixel_stride=cfg.pixel_stride,
            init_opacity=cfg.init_opacity, init_scale_factor=cfg.init_scale_factor,
        )
        mapping_steps += cfg.mapping.iterations
        snaps = {}
        if cfg.dynamic_enabled:
            for obj in registry.active():
                if obj.visibility.get(t) and t in obj.masks:
                    m = Mask(obj.masks[t].bits & frames[t].valid_mask)
                    if m.empty():
                        continue
                    snap = init_dynamic_model(
                        frames[t], obj.masks[t], poses[t], K, t,
                        pixel_stride=cfg.pixel_stride, init_opacity=cfg.init_opacity,
                        init_scale_factor=cfg.init_scale_factor,
                    )
                    dynamic_mapping_step(
                        snap, frames[t], obj.masks[t], poses[t], cfg.mapping, K, cfg.render
                    )
                    obj.snapshots[t] = snap
                    snaps[obj.id] = len(snap.gaussians)
        return stats, snaps

    n = len(dataset)
    for t in range(n):
        frame = dataset.load_frame(t)
        frames.append(frame)
        entry = {"frame": t, "timestamp": frame.timestamp}

        if t == 0:
            poses.append(first_pose)
            stamps.append(frame.timestamp)
            seed_map = backproject(
                frame, K, first_pose, Mask.full(frame.shape),
                stride=cfg.pixel_stride, init_opacity=cfg.init_opacity,
                scale_factor=cfg.init_scale_factor,
            )
            gmap.add(seed_map.means, seed_map.quats, seed_map.scales,
                     seed_map.opacities, seed_map.colors)
            keyframes.append(Keyframe(0, frame, first_pose, Mask.none(frame.shape)))
            stats, snaps = do_mapping(0)
            entry.update(event="init", map_size=len(gmap), mapping=stats)
            logs.append(_log_entry(**entry))
            continue

        # ---- per-frame object mask updates (pure functions of the frame)
        init = (
            constant_velocity_init(poses[t - 1], poses[t - 2])
            if t >= 2
            else poses[t - 1]
        )
        fresh = []
        if cfg.dynamic_enabled:
            for obj in registry.active():
                track_forward(obj, frame, t, backend, cfg.detect)
            if t % cfg.detect.cadence == 0:
                # consistency analysis against the motion-predicted view: the
                # optimized pose would already have absorbed part of the object
                # motion, masking happens before pose refinement
                rendered = render(gmap, init, K, cfg.render)
                fresh = detect(frame, rendered, registry, t, backend, frames, cfg.detect)
                extracted_total = 0
                retro = 0
                for obj in fresh:
                    # excise the object along its whole back-tracked history so
                    # the positions it occupied before detection are cleaned too
                    for k in sorted(obj.masks):
                        if obj.masks[k].empty():
                            continue
                        pose_k = poses[k] if k < len(poses) else init
                        extracted = separate_dynamic(
                            gmap, obj.masks[k], frames[k], pose_k, K,
                            cfg.sep_eps_front, cfg.sep_eps_behind,
                        )
                        extracted_total += len(extracted)
                    # snapshots for past keyframes the object was visible in
                    for kf in keyframes:
                        k = kf.index
                        if k in obj.masks and obj.visibility.get(k):
                            m = Mask(obj.masks[k].bits & frames[k].valid_mask)
                            if m.empty():
                                continue
                            snap = init_dynamic_model(
                                frames[k], obj.masks[k], poses[k], K, k,
                                pixel_stride=cfg.pixel_stride,
                                init_opacity=cfg.init_opacity,
                                init_scale_factor=cfg.init_scale_factor,
                            )
                            dynamic_mapping_step(
                                snap, frames[k], obj.masks[k], poses[k],
                                cfg.mapping, K, cfg.render,
                            )
                            obj.snapshots[k] = snap
                            retro += 1
                if fresh:
                    entry.update(
                        new_objects=[o.id for o in fresh],
                        extracted=extracted_total,
                        retro_snapshots=retro,
                    )

        # ---- masked pose optimization
        m_d = (
            registry.union_mask_at(t, frame.shape)
            if cfg.dynamic_enabled
            else Mask.none(frame.shape)
        )
        if cfg.dynamic_enabled and m_d.empty():
            m_d = registry.union_latest_active(frame.shape)
        try:
            result = optimize_pose(gmap, frame, m_d, init, cfg.tracking, K, cfg.render)
        except TrackingDegenerateError as exc:
            aborted = str(exc)
            logs.append(_log_entry(frame=t, event="aborted", error=str(exc)))
            break
        poses.append(result.pose)
        stamps.append(frame.timestamp)
        entry.update(
            tracking_loss=result.final_loss,
            tracking_iters=result.iterations_run,
            inliers=result.inlier_fraction,
        )

        # poses of the frames tracked just before a detection predate the
        # masks; refine them now that bidirectional tracking filled those in
        if fresh:
            window = range(max(1, t - cfg.detect.cadence + 1), t)
            refined = 0
            for k in window:
                m_k = registry.union_mask_at(k, frame.shape)
                if m_k.empty():
                    continue
                try:
                    res_k = optimize_pose(
                        gmap, frames[k], m_k, poses[k], cfg.tracking, K, cfg.render
                    )
                except TrackingDegenerateError:
                    continue
                poses[k] = res_k.pose
                for kf in keyframes:
                    if kf.index == k:
                        kf.pose = res_k.pose
                refined += 1
            if refined:
                entry.update(retracked=refined)

        # ---- keyframe mapping
        if t % cfg.mapping.keyframe_stride == 0:
            keyframes.append(
                Keyframe(t, frame, result.pose, dyn_mask_at(t, frame.shape))
            )
            stats, snaps = do_mapping(t)
            entry.update(keyframe=True, map_size=len(gmap), mapping=stats)
            if snaps:
                entry.update(snapshots=snaps)
        logs.append(_log_entry(**entry))
        if progress:
            print(
                f"frame {t}/{n - 1} loss={result.final_loss:.3e} map={len(gmap)}",
                flush=True,
            )

    traj = Trajectory(np.asarray(stamps), poses)
    result = RunResult(traj, gmap, registry, keyframes, logs, aborted)
    if out_dir is not None:
        write_run_dir(Path(out_dir), result, dataset, cfg)
    if aborted:
        raise TrackingDegenerateError(aborted)
    return result


def composite_render(static_map: GaussianMap, snapshots: list, pose: PoseSE3, K, settings):
    """Depth-ordered merge of the static map with object snapshots: rendering
    the union set composites everything in one global depth order."""
    merged = merge_maps([static_map] + [s.gaussians for s in snapshots])
    return render(merged, pose, K, settings)


def keyframe_psnrs(result: RunResult, K, settings) -> list[float]:
    """Composite-render PSNR against each keyframe's observation."""
    values = []
    for kf in result.keyframes:
        snaps = []
        for obj in result.registry.objects:
            if kf.index in obj.snapshots:
                snaps.append(obj.snapshots[kf.index])
        out = composite_render(result.static_map, snaps, kf.pose, K, settings)
        values.append(psnr(out.color, kf.frame.color, Mask(kf.frame.valid_mask)))
    return values


def write_run_dir(out: Path, result: RunResult, dataset: DatasetHandle, cfg: PipelineConfig):
    from .config import dump_config

    out.mkdir(parents=True, exist_ok=True)
    write_trajectory(out / "trajectory.txt", result.trajectory)
    write_map_ply(out / "static_map.ply", result.static_map)
    save_map_npz(out / "static_map.npz", result.static_map)
    (out / "config.ini").write_text(dump_config(cfg))
    K = dataset.intrinsics
    (out / "intrinsics.txt").write_text(
        f"{K.fx:g} {K.fy:g} {K.cx:g} {K.cy:g} {K.width} {K.height}\n"
    )

    masks_dir = out / "masks"
    masks_dir.mkdir(exist_ok=True)
    obj_lines = []
    for obj in result.registry.objects:
        odir = out / "objects" / f"{obj.id:03d}"
        for t in sorted(obj.snapshots):
            odir.mkdir(parents=True, exist_ok=True)
            write_map_ply(odir / f"snapshot_{t:06d}.ply", obj.snapshots[t].gaussians)
            save_map_npz(odir / f"snapshot_{t:06d}.npz", obj.snapshots[t].gaussians)
        for t in sorted(obj.masks):
            write_mask_png(masks_dir / f"{t:06d}_{obj.id:03d}.png", obj.masks[t])
        for t in sorted(set(obj.masks) | set(obj.visibility)):
            visible = bool(obj.visibility.get(t, False))
            center = list(obj.centers.get(t, (-1, -1)))
            area = obj.masks[t].area() if t in obj.masks else 0
            obj_lines.append(
                json.dumps(
                    {"id": obj.id, "t": t, "visible": visible,
                     "center": center, "area": area},
                    sort_keys=True,
                )
            )
    (out / "objects.jsonl").write_text("\n".join(obj_lines) + ("\n" if obj_lines else ""))
    (out / "log.jsonl").write_text(
        "\n".join(json.dumps(e, sort_keys=True) for e in result.logs) + "\n"
    )

    lines = [
        f"frames = {len(result.trajectory)}",
        f"map_gaussians = {len(result.static_map)}",
        f"objects = {len(result.registry.objects)}",
        f"aborted = {result.aborted or 'no'}",
    ]
    if dataset.gt_trajectory is not None and len(result.trajectory) >= 3:
        from .metrics import ate

        rmse, sd = ate(result.trajectory, dataset.gt_trajectory)
        lines += [f"ate_rmse_m = {rmse:.9f}", f"ate_sd_m = {sd:.9f}"]
    try:
        vals = keyframe_psnrs(result, dataset.intrinsics, cfg.render)
        lines.append(f"keyframe_psnr_db = {np.mean(vals):.6f}")
    except ValueError:
        pass
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
