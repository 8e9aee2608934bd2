"""Command-line interface.

Subcommands: synth, run, eval-traj, eval-recon, eval-masks, render,
sweep-threshold.  Errors print a single machine-parseable line
``error: <message>`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys


def _build_parser():
    p = argparse.ArgumentParser(
        prog="dynosplat",
        description="RGB-D dynamic SLAM on gaussian splats",
    )
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP threads (set before numpy import)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write a synthetic TUM-layout dataset")
    sp.add_argument("spec", nargs="?", help="scene spec file")
    sp.add_argument("--demo", choices=["static", "dynamic"],
                    help="use a built-in demo scene instead of a spec file")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=None)
    sp.add_argument("--out", required=True)

    rp = sub.add_parser("run", help="run SLAM on a dataset directory")
    rp.add_argument("--dataset", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--config", default=None)
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--detect-cadence", type=int, default=None)
    rp.add_argument("--multiplier", type=float, default=None,
                    help="inconsistency threshold multiplier (range 10-30)")
    rp.add_argument("--no-dynamic", action="store_true",
                    help="ablation: disable dynamic detection and masking")
    rp.add_argument("--progress", action="store_true")
    rp.add_argument("--dump-config", action="store_true",
                    help="print the effective config and exit")

    tp = sub.add_parser("eval-traj", help="ATE between trajectories")
    tp.add_argument("estimated")
    tp.add_argument("groundtruth")
    tp.add_argument("--with-scale", action="store_true", help="Sim(3) alignment")

    ep = sub.add_parser("eval-recon", help="accuracy/completeness vs GT cloud")
    ep.add_argument("--run", required=True, help="run directory (static_map.ply)")
    ep.add_argument("--dataset", required=True, help="dataset with GT poses")
    ep.add_argument("--threshold", type=float, default=0.05)
    ep.add_argument("--stride", type=int, default=4, help="GT backprojection stride")
    ep.add_argument("--every", type=int, default=5, help="use every Nth GT frame")

    mp = sub.add_parser("eval-masks", help="per-frame mask IoU vs GT masks")
    mp.add_argument("--run", required=True)
    mp.add_argument("--dataset", required=True)

    np_ = sub.add_parser("render", help="render a novel view from a saved map")
    np_.add_argument("--run", required=True, help="run directory (static_map.npz)")
    np_.add_argument("--pose", required=True,
                     help="'tx ty tz qx qy qz qw' camera-to-world")
    np_.add_argument("--out", required=True, help="output PNG (color)")
    np_.add_argument("--depth-out", default=None, help="optional 16-bit depth PNG")
    np_.add_argument("--with-objects", action="store_true",
                     help="composite the latest object snapshots")

    wp = sub.add_parser("sweep-threshold",
                        help="detection outcome across multipliers 10-30")
    wp.add_argument("--dataset", required=True)
    wp.add_argument("--out", required=True, help="directory for the sweep runs")
    wp.add_argument("--seed", type=int, default=0)
    wp.add_argument("--multipliers", default="10,15,20,25,30")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _dispatch(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line machine-parseable error contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    # imports deferred so --threads can pin BLAS pools before numpy loads
    import numpy as np

    from .config import PipelineConfig, dump_config, load_config

    if args.command == "synth":
        from .dataset import write_tum_dataset
        from .synthetic import (
            demo_dynamic_spec,
            demo_static_spec,
            generate,
            spec_from_text,
        )

        if args.demo == "static":
            kw = {"n_frames": args.frames} if args.frames else {}
            spec = demo_static_spec(seed=args.seed, **kw)
        elif args.demo == "dynamic":
            kw = {"n_frames": args.frames} if args.frames else {}
            spec = demo_dynamic_spec(seed=args.seed, **kw)
        elif args.spec:
            with open(args.spec, "r", encoding="utf-8") as fh:
                spec = spec_from_text(fh.read())
        else:
            raise ValueError("synth needs a spec file or --demo")
        gt = generate(spec)
        write_tum_dataset(gt, args.out)
        print(f"wrote {len(gt.frames)} frames to {args.out}")
        return 0

    if args.command == "run":
        from .dataset import open_dataset
        from .pipeline import run_slam

        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.detect_cadence is not None:
            cfg.detect.cadence = args.detect_cadence
        if args.multiplier is not None:
            cfg.detect.mult_color = args.multiplier
            cfg.detect.mult_depth = args.multiplier
        if args.no_dynamic:
            cfg.dynamic_enabled = False
        cfg.validate()
        if args.dump_config:
            print(dump_config(cfg), end="")
            return 0
        dataset = open_dataset(args.dataset, cfg.dataset)
        if dataset.dropped:
            print(f"dropped {dataset.dropped} unassociated frames", file=sys.stderr)
        result = run_slam(dataset, cfg, out_dir=args.out, progress=args.progress)
        print(f"run complete: {len(result.trajectory)} poses, "
              f"{len(result.static_map)} gaussians, "
              f"{len(result.registry.objects)} objects -> {args.out}")
        return 0

    if args.command == "eval-traj":
        from .dataset import read_trajectory
        from .metrics import ate

        est = read_trajectory(args.estimated)
        gt = read_trajectory(args.groundtruth)
        rmse, sd = ate(est, gt, with_scale=args.with_scale)
        print(f"rmse {rmse:.9f}")
        print(f"sd {sd:.9f}")
        return 0

    if args.command == "eval-recon":
        from pathlib import Path

        from .dataset import open_dataset, read_ply_points, read_mask_png
        from .metrics import recon_metrics
        from .scene import Mask, backproject

        pred = read_ply_points(Path(args.run) / "static_map.ply")
        ds = open_dataset(args.dataset)
        if ds.gt_trajectory is None:
            raise ValueError("dataset has no groundtruth.txt")
        clouds = []
        for i in range(0, len(ds), args.every):
            frame = ds.load_frame(i)
            pairs = np.abs(ds.gt_trajectory.timestamps - frame.timestamp)
            pose = ds.gt_trajectory.poses[int(np.argmin(pairs))]
            static = np.ones(frame.shape, dtype=bool)
            for _oid, m in ds.gt_masks(i).items():
                static &= ~m.bits
            gm = backproject(frame, ds.intrinsics, pose, Mask(static), stride=args.stride)
            clouds.append(gm.means)
        gt_cloud = np.concatenate(clouds)
        acc, comp, ratio = recon_metrics(pred, gt_cloud, args.threshold)
        print(f"accuracy_m {acc:.6f}")
        print(f"completeness_m {comp:.6f}")
        print(f"completion_ratio_pct {ratio:.3f}")
        return 0

    if args.command == "eval-masks":
        from pathlib import Path

        from .dataset import open_dataset, read_mask_png
        from .metrics import mask_iou

        ds = open_dataset(args.dataset)
        run_masks = Path(args.run) / "masks"
        if not run_masks.is_dir():
            raise ValueError(f"no masks directory in {args.run}")
        if ds.masks_dir is None:
            raise ValueError("dataset has no GT masks directory")
        per_frame = []
        for i in range(len(ds)):
            gt_masks = ds.gt_masks(i)
            if not gt_masks:
                continue
            pred = [read_mask_png(p) for p in sorted(run_masks.glob(f"{i:06d}_*.png"))]
            for oid, gtm in sorted(gt_masks.items()):
                best = max((mask_iou(pm, gtm) for pm in pred), default=0.0)
                per_frame.append((i, oid, best))
                print(f"frame {i} object {oid} iou {best:.4f}")
        if per_frame:
            vals = [x[2] for x in per_frame]
            print(f"mean_iou {np.mean(vals):.4f}")
            print(f"min_iou {min(vals):.4f}")
        else:
            print("mean_iou nan")
        return 0

    if args.command == "render":
        from pathlib import Path

        from .dataset import load_map_npz, write_color_png, write_depth_png
        from .geometry import CameraIntrinsics, PoseSE3
        from .render import render
        from .scene import merge_maps

        run = Path(args.run)
        gmap = load_map_npz(run / "static_map.npz")
        if args.with_objects:
            snaps = []
            for npz in sorted(run.glob("objects/*/snapshot_*.npz")):
                snaps.append(load_map_npz(npz))
            # keep only each object's latest snapshot
            latest = {}
            for npz in sorted(run.glob("objects/*/snapshot_*.npz")):
                latest[npz.parent.name] = npz
            snaps = [load_map_npz(p) for p in latest.values()]
            gmap = merge_maps([gmap] + snaps)
        vals = args.pose.split()
        if len(vals) != 7:
            raise ValueError("pose must be 'tx ty tz qx qy qz qw'")
        pose = PoseSE3.from_quat_trans(
            np.array([float(v) for v in vals[3:]]), np.array([float(v) for v in vals[:3]])
        )
        intr = (run / "intrinsics.txt").read_text().split()
        K = CameraIntrinsics(float(intr[0]), float(intr[1]), float(intr[2]),
                             float(intr[3]), int(intr[4]), int(intr[5]))
        out = render(gmap, pose, K)
        write_color_png(args.out, out.color)
        if args.depth_out:
            write_depth_png(args.depth_out, out.depth)
        print(f"rendered {K.width}x{K.height} view to {args.out}")
        return 0

    if args.command == "sweep-threshold":
        import json as _json
        from pathlib import Path

        from .dataset import open_dataset, read_mask_png
        from .metrics import mask_iou
        from .pipeline import run_slam

        mults = [float(v) for v in args.multipliers.split(",")]
        ds_root = args.dataset
        outcomes = []
        for m in mults:
            cfg = PipelineConfig()
            cfg.seed = args.seed
            cfg.detect.mult_color = m
            cfg.detect.mult_depth = m
            cfg.validate()
            dataset = open_dataset(ds_root, cfg.dataset)
            out_dir = Path(args.out) / f"mult_{m:g}"
            result = run_slam(dataset, cfg, out_dir=out_dir)
            n_obj = len(result.registry.objects)
            final_iou = float("nan")
            if dataset.masks_dir is not None and n_obj:
                last_vals = []
                for obj in result.registry.objects:
                    t_last = max(obj.masks)
                    gtm = dataset.gt_masks(t_last)
                    if gtm:
                        last_vals.append(
                            max(mask_iou(obj.masks[t_last], g) for g in gtm.values())
                        )
                if last_vals:
                    final_iou = float(np.mean(last_vals))
            outcomes.append({"multiplier": m, "objects": n_obj, "final_iou": final_iou})
            print(f"multiplier {m:g}: objects {n_obj} final_iou {final_iou:.4f}")
        verdicts = {o["objects"] > 0 for o in outcomes}
        ious = [o["final_iou"] for o in outcomes if np.isfinite(o["final_iou"])]
        stable = len(verdicts) == 1 and (not ious or max(ious) - min(ious) <= 0.05)
        print(f"stable {'yes' if stable else 'no'}")
        (Path(args.out) / "sweep.json").write_text(
            _json.dumps({"outcomes": outcomes, "stable": stable}, sort_keys=True, indent=1)
        )
        return 0

    raise ValueError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
