"""On-disk formats: TUM RGB-D dataset layout, trajectories, PNG and PLY.

TUM conventions: ``rgb.txt`` / ``depth.txt`` index files with
``timestamp path`` lines ('#' comments), depth as 16-bit PNG at
``depth_scale`` units per meter (default 5000), trajectories as
``timestamp tx ty tz qx qy qz qw`` text lines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DatasetConfig
from .geometry import CameraIntrinsics, PoseSE3
from .metrics import Trajectory, associate_timestamps
from .scene import FrameRGBD, GaussianMap, Mask


class DatasetError(RuntimeError):
    pass


def write_color_png(path, color01: np.ndarray):
    arr = np.clip(np.asarray(color01) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_color_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_depth_png(path, depth_m: np.ndarray, depth_scale: float = 5000.0):
    arr = np.clip(np.asarray(depth_m) * depth_scale + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_depth_png(path, depth_scale: float = 5000.0) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return arr / depth_scale


def write_mask_png(path, mask: Mask):
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> Mask:
    arr = np.asarray(Image.open(path).convert("L"))
    return Mask(arr > 127)


def write_trajectory(path, traj: Trajectory):
    """TUM text format: 'timestamp tx ty tz qx qy qz qw', one line per pose."""
    with open(path, "w", encoding="utf-8") as fh:
        for ts, pose in zip(traj.timestamps, traj.poses):
            t = pose.translation
            q = pose.quat()
            fh.write(
                f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def read_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise DatasetError(f"bad trajectory line: {line!r}")
            stamps.append(vals[0])
            poses.append(PoseSE3.from_quat_trans(np.array(vals[4:8]), np.array(vals[1:4])))
    return Trajectory(np.asarray(stamps), poses)


def _read_index(path: Path) -> list[tuple[float, str]]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            ts, rel = line.split()[:2]
            entries.append((float(ts), rel))
    return entries


@dataclass
class DatasetHandle:
    """Associated (timestamp, color path, depth path) triples plus optional GT."""

    root: Path
    triples: list                      # [(timestamp, color_path, depth_path)]
    intrinsics: CameraIntrinsics
    depth_scale: float
    min_depth: float
    max_depth: float
    gt_trajectory: Trajectory | None = None
    masks_dir: Path | None = None
    dropped: int = 0

    def __len__(self):
        return len(self.triples)

    def load_frame(self, i: int) -> FrameRGBD:
        ts, cpath, dpath = self.triples[i]
        color = read_color_png(cpath)
        depth = read_depth_png(dpath, self.depth_scale)
        return FrameRGBD.from_raw(color, depth, self.min_depth, self.max_depth, ts)

    def gt_masks(self, i: int) -> dict[int, Mask]:
        """Ground-truth masks for frame i keyed by object id (empty if none)."""
        if self.masks_dir is None:
            return {}
        out = {}
        for p in sorted(self.masks_dir.glob(f"{i:06d}_*.png")):
            oid = int(p.stem.split("_")[1])
            out[oid] = read_mask_png(p)
        return out


def open_dataset(root, cfg: DatasetConfig | None = None) -> DatasetHandle:
    """Open a TUM-layout directory, associating rgb/depth by nearest timestamp."""
    cfg = cfg or DatasetConfig()
    root = Path(root)
    rgb_index = root / "rgb.txt"
    depth_index = root / "depth.txt"
    if not rgb_index.exists():
        raise DatasetError(f"missing index file: {rgb_index}")
    if not depth_index.exists():
        raise DatasetError(f"missing index file: {depth_index}")
    rgb = _read_index(rgb_index)
    dep = _read_index(depth_index)
    pairs = associate_timestamps(
        np.array([t for t, _ in rgb]), np.array([t for t, _ in dep]), cfg.association_tol
    )
    triples = []
    for i, j in pairs:
        cpath = root / rgb[i][1]
        dpath = root / dep[j][1]
        if not cpath.exists() or not dpath.exists():
            raise DatasetError(f"indexed file missing: {cpath if not cpath.exists() else dpath}")
        triples.append((rgb[i][0], cpath, dpath))
    if not triples:
        raise DatasetError("zero rgb/depth associations")
    dropped = len(rgb) - len(triples)

    intr_file = root / "intrinsics.txt"
    if intr_file.exists():
        vals = intr_file.read_text().split()
        intrinsics = CameraIntrinsics(
            float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]),
            int(vals[4]), int(vals[5]),
        )
    else:
        intrinsics = CameraIntrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height)

    gt_path = root / "groundtruth.txt"
    gt = read_trajectory(gt_path) if gt_path.exists() else None
    masks_dir = root / "masks"
    return DatasetHandle(
        root=root,
        triples=triples,
        intrinsics=intrinsics,
        depth_scale=cfg.depth_scale,
        min_depth=cfg.min_depth,
        max_depth=cfg.max_depth,
        gt_trajectory=gt,
        masks_dir=masks_dir if masks_dir.is_dir() else None,
        dropped=dropped,
    )


def write_tum_dataset(gt, out_dir, depth_scale: float = 5000.0):
    """Write a GroundTruth sequence as a TUM-layout dataset directory.

    Layout: rgb/, depth/ (16-bit PNG), rgb.txt, depth.txt, groundtruth.txt,
    intrinsics.txt, masks/<frame>_<object>.png, bounds.txt, scene.txt.
    """
    from .synthetic import spec_to_text

    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    rgb_lines, depth_lines, gt_lines, bounds_lines = [], [], [], []
    for i, (frame, pose) in enumerate(zip(gt.frames, gt.poses)):
        ts = frame.timestamp
        cname = f"rgb/{i:06d}.png"
        dname = f"depth/{i:06d}.png"
        write_color_png(out / cname, frame.color)
        write_depth_png(out / dname, frame.depth, depth_scale)
        rgb_lines.append(f"{ts:.6f} {cname}")
        depth_lines.append(f"{ts:.6f} {dname}")
        q = pose.quat()
        t = pose.translation
        gt_lines.append(
            f"{ts:.6f} " + " ".join(f"{v:.9f}" for v in (t[0], t[1], t[2], q[0], q[1], q[2], q[3]))
        )
        for oid, mask in gt.object_masks[i].items():
            write_mask_png(out / "masks" / f"{i:06d}_{oid:03d}.png", mask)
        for oid, (lo, hi) in gt.object_bounds[i].items():
            bounds_lines.append(
                f"{i} {oid} " + " ".join(f"{v:.9f}" for v in np.concatenate([lo, hi]))
            )
    (out / "rgb.txt").write_text("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    (out / "depth.txt").write_text("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    (out / "groundtruth.txt").write_text(
        "# timestamp tx ty tz qx qy qz qw\n" + "\n".join(gt_lines) + "\n"
    )
    K = gt.spec.intrinsics
    (out / "intrinsics.txt").write_text(
        f"{K.fx:g} {K.fy:g} {K.cx:g} {K.cy:g} {K.width} {K.height}\n"
    )
    (out / "bounds.txt").write_text(
        "# frame object xmin ymin zmin xmax ymax zmax\n" + "\n".join(bounds_lines) + "\n"
    )
    (out / "scene.txt").write_text(spec_to_text(gt.spec))
    return out


def read_bounds(path) -> list[dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Parse bounds.txt into per-frame {object_id: (min3, max3)} dicts."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            rows.append((int(vals[0]), int(vals[1]), [float(v) for v in vals[2:8]]))
    n = max((r[0] for r in rows), default=-1) + 1
    out = [dict() for _ in range(n)]
    for fi, oid, b in rows:
        out[fi][oid] = (np.array(b[:3]), np.array(b[3:]))
    return out


def write_map_ply(path, gmap: GaussianMap):
    """Binary little-endian PLY: one vertex per gaussian center with color,
    mean scale and opacity attributes."""
    n = len(gmap)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property float scale\nproperty float opacity\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        cols = np.clip(gmap.colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
        mean_scale = gmap.scales.mean(axis=1)
        for i in range(n):
            fh.write(struct.pack("<fff", *gmap.means[i].astype(np.float32)))
            fh.write(struct.pack("<BBB", *cols[i]))
            fh.write(struct.pack("<ff", float(mean_scale[i]), float(gmap.opacities[i])))


def read_ply_points(path) -> np.ndarray:
    """Read vertex positions from a PLY written by :func:`write_map_ply`."""
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise DatasetError("not a PLY file")
        n = 0
        props = []
        while True:
            line = fh.readline().strip().decode("ascii")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(tuple(line.split()[1:]))
            elif line == "end_header":
                break
        sizes = {"float": 4, "uchar": 1}
        stride = sum(sizes[t] for t, _ in props)
        raw = fh.read(n * stride)
    pts = np.zeros((n, 3), dtype=np.float64)
    for i in range(n):
        x, y, z = struct.unpack_from("<fff", raw, i * stride)
        pts[i] = (x, y, z)
    return pts


def save_map_npz(path, gmap: GaussianMap):
    """Full gaussian state (positions, orientations, scales, opacity, color)."""
    np.savez(
        path,
        means=gmap.means,
        quats=gmap.quats,
        scales=gmap.scales,
        opacities=gmap.opacities,
        colors=gmap.colors,
        ids=gmap.ids,
    )


def load_map_npz(path) -> GaussianMap:
    data = np.load(path)
    gmap = GaussianMap()
    gmap.means = data["means"]
    gmap.quats = data["quats"]
    gmap.scales = data["scales"]
    gmap.opacities = data["opacities"]
    gmap.colors = data["colors"]
    gmap.ids = data["ids"]
    gmap._next_id = int(gmap.ids.max()) + 1 if len(gmap) else 0
    return gmap
