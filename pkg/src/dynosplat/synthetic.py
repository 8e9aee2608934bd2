"""Analytic ray-casting oracle: textured room + moving rigid primitives.

Generates RGB-D frames, exact poses, exact per-object masks and 3D bounds for
parametric scenes.  Entirely independent of the splat renderer — intersections
are closed-form per primitive, colors are pure albedo (no shading) and pixels
are sampled at their centers (no anti-aliasing), so masks are crisp and a
view-independent-color splat map can in principle reach zero residual.

World convention: y points down (floor is the +y face of the room), matching
the camera's pinhole axes (x right, y down, z forward).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, rotmat_to_quat
from .scene import FrameRGBD, Mask

ROOM_ID = -1
FACE_NAMES = ("x-", "x+", "y-", "y+", "z-", "z+")


@dataclass(frozen=True)
class Checker:
    period: float
    color_a: tuple
    color_b: tuple

    def sample(self, p1, p2, lo1, lo2, ext1, ext2):
        parity = (np.floor(p1 / self.period) + np.floor(p2 / self.period)).astype(np.int64) % 2
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        return np.where(parity[..., None] == 0, a, b)


@dataclass(frozen=True)
class Gradient:
    color_a: tuple
    color_b: tuple

    def sample(self, p1, p2, lo1, lo2, ext1, ext2):
        t = np.clip((p1 - lo1) / ext1, 0.0, 1.0)[..., None]
        a = np.asarray(self.color_a, dtype=np.float64)
        b = np.asarray(self.color_b, dtype=np.float64)
        return (1.0 - t) * a + t * b


@dataclass
class ObjectSpec:
    """A rigid primitive on a piecewise-linear translation track."""

    primitive: str               # "sphere" | "cuboid"
    size: np.ndarray             # sphere: (radius,), cuboid: (3,) half extents
    albedo: np.ndarray           # (3,)
    track: list                  # [(frame_index, (3,) center)], sorted
    appear: int = 0
    disappear: int = -1          # exclusive; -1 = never

    def __post_init__(self):
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.track = sorted(
            [(int(f), np.asarray(p, dtype=np.float64)) for f, p in self.track]
        )
        if self.primitive not in ("sphere", "cuboid"):
            raise ValueError(f"unknown primitive {self.primitive!r}")

    def visible(self, frame: int) -> bool:
        if frame < self.appear:
            return False
        return self.disappear < 0 or frame < self.disappear

    def center(self, frame: int) -> np.ndarray:
        ks = [k for k, _ in self.track]
        if frame <= ks[0]:
            return self.track[0][1]
        if frame >= ks[-1]:
            return self.track[-1][1]
        j = int(np.searchsorted(ks, frame, side="right"))
        (k0, p0), (k1, p1) = self.track[j - 1], self.track[j]
        w = (frame - k0) / (k1 - k0)
        return (1.0 - w) * p0 + w * p1

    def bounds(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        c = self.center(frame)
        half = np.full(3, self.size[0]) if self.primitive == "sphere" else self.size
        return c - half, c + half


@dataclass
class SceneSpec:
    room_min: np.ndarray
    room_max: np.ndarray
    faces: dict                   # face name -> Checker | Gradient
    objects: list                 # list[ObjectSpec]
    camera_track: list            # list[PoseSE3], one per frame
    intrinsics: CameraIntrinsics = None
    noise_depth: float = 0.0
    noise_color: float = 0.0
    seed: int = 0
    fps: float = 10.0

    def __post_init__(self):
        self.room_min = np.asarray(self.room_min, dtype=np.float64)
        self.room_max = np.asarray(self.room_max, dtype=np.float64)
        for T in self.camera_track:
            eye = T.translation
            if np.any(eye <= self.room_min) or np.any(eye >= self.room_max):
                raise ValueError("camera leaves the room")

    @property
    def n_frames(self) -> int:
        return len(self.camera_track)


@dataclass
class GroundTruth:
    frames: list                  # list[FrameRGBD]
    poses: list                   # list[PoseSE3]
    object_masks: list            # per frame: {object_index: Mask}
    object_bounds: list           # per frame: {object_index: (min3, max3)}
    spec: SceneSpec = None


def look_at(eye, target, up_hint=(0.0, -1.0, 0.0)) -> PoseSE3:
    """Camera-to-world pose with +z toward ``target`` (y-down convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up_hint, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    down /= np.linalg.norm(down)
    R = np.stack([right, down, fwd], axis=1)
    if np.linalg.det(R) < 0:
        R[:, 1] = -R[:, 1]
    return PoseSE3(R, eye)


def _ray_room(origins, dirs, room_min, room_max):
    """First intersection with the inside of the room box.

    Returns (t, face_index); t is in units of the ray parameter (z-depth for
    z-normalized camera rays).
    """
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_face = np.full(n, -1, dtype=np.int64)
    for fi, (axis, bound) in enumerate(
        [(0, room_min[0]), (0, room_max[0]), (1, room_min[1]), (1, room_max[1]), (2, room_min[2]), (2, room_max[2])]
    ):
        d = dirs[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (bound - origins[:, axis]) / d
        hit = (np.abs(d) > 1e-15) & (t > 1e-9) & (t < best_t)
        if not hit.any():
            continue
        p = origins[hit] + t[hit, None] * dirs[hit]
        oth = [a for a in range(3) if a != axis]
        inside = (
            (p[:, oth[0]] >= room_min[oth[0]] - 1e-9)
            & (p[:, oth[0]] <= room_max[oth[0]] + 1e-9)
            & (p[:, oth[1]] >= room_min[oth[1]] - 1e-9)
            & (p[:, oth[1]] <= room_max[oth[1]] + 1e-9)
        )
        rows = np.nonzero(hit)[0][inside]
        best_t[rows] = t[hit][inside]
        best_face[rows] = fi
    return best_t, best_face


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center
    a = np.einsum("ni,ni->n", dirs, dirs)
    b = 2.0 * np.einsum("ni,ni->n", dirs, oc)
    c = np.einsum("ni,ni->n", oc, oc) - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(origins.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t[ok] = tt[ok]
    return t


def _ray_aabb(origins, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
    par = np.abs(dirs) < 1e-15
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=1)
    exit_ = tmax.min(axis=1)
    hit = (enter <= exit_) & (exit_ > 1e-9)
    t = np.where(enter > 1e-9, enter, exit_)
    return np.where(hit, t, np.inf)


def generate(spec: SceneSpec) -> GroundTruth:
    """Ray-cast every frame of the scene; deterministic given spec.seed."""
    K = spec.intrinsics
    H, W = K.height, K.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    dirs_cam = np.stack(
        [(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    rng = np.random.default_rng(spec.seed)
    ext = spec.room_max - spec.room_min

    frames, masks_all, bounds_all = [], [], []
    for fi, T in enumerate(spec.camera_track):
        dirs = dirs_cam @ T.rotation.T
        origins = np.broadcast_to(T.translation, dirs.shape)
        t_room, face = _ray_room(origins, dirs, spec.room_min, spec.room_max)
        if np.isinf(t_room).any():
            raise RuntimeError(f"frame {fi}: ray escaped the room")
        best_t = t_room
        best_id = np.full(dirs.shape[0], ROOM_ID, dtype=np.int64)
        for oi, obj in enumerate(spec.objects):
            if not obj.visible(fi):
                continue
            c = obj.center(fi)
            if obj.primitive == "sphere":
                t = _ray_sphere(origins, dirs, c, obj.size[0])
            else:
                t = _ray_aabb(origins, dirs, c - obj.size, c + obj.size)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_id = np.where(closer, oi, best_id)

        color = np.zeros((dirs.shape[0], 3))
        room_px = best_id == ROOM_ID
        pts = origins + best_t[:, None] * dirs
        for fidx in range(6):
            sel = room_px & (face == fidx)
            if not sel.any():
                continue
            axis = fidx // 2
            oth = [a for a in range(3) if a != axis]
            tex = spec.faces[FACE_NAMES[fidx]]
            color[sel] = tex.sample(
                pts[sel, oth[0]], pts[sel, oth[1]],
                spec.room_min[oth[0]], spec.room_min[oth[1]],
                ext[oth[0]], ext[oth[1]],
            )
        for oi, obj in enumerate(spec.objects):
            sel = best_id == oi
            if sel.any():
                color[sel] = obj.albedo

        depth = best_t.reshape(H, W)
        color = color.reshape(H, W, 3)
        if spec.noise_depth > 0:
            depth = depth + rng.normal(scale=spec.noise_depth, size=depth.shape)
            depth = np.maximum(depth, 1e-3)
        if spec.noise_color > 0:
            color = np.clip(color + rng.normal(scale=spec.noise_color, size=color.shape), 0.0, 1.0)

        timestamp = fi / spec.fps
        frames.append(FrameRGBD(color, depth, np.ones((H, W), dtype=bool), timestamp))
        masks = {}
        bounds = {}
        ids_img = best_id.reshape(H, W)
        for oi, obj in enumerate(spec.objects):
            if obj.visible(fi):
                m = ids_img == oi
                if m.any():
                    masks[oi] = Mask(m)
                    bounds[oi] = obj.bounds(fi)
        masks_all.append(masks)
        bounds_all.append(bounds)
    return GroundTruth(frames, list(spec.camera_track), masks_all, bounds_all, spec)


# ---------------------------------------------------------------------------
# canonical demo scenes (used by the CLI --demo flag and the acceptance suite)


def _demo_faces(scale=1.0):
    return {
        "x-": Gradient((0.75, 0.62, 0.50), (0.42, 0.36, 0.30)),
        "x+": Gradient((0.35, 0.48, 0.62), (0.62, 0.72, 0.80)),
        "y-": Checker(0.9 * scale, (0.62, 0.60, 0.58), (0.45, 0.44, 0.43)),
        "y+": Checker(0.7 * scale, (0.55, 0.50, 0.42), (0.38, 0.35, 0.30)),
        "z-": Gradient((0.50, 0.55, 0.45), (0.70, 0.72, 0.62)),
        "z+": Checker(0.55 * scale, (0.78, 0.74, 0.66), (0.30, 0.34, 0.42)),
    }


def demo_static_spec(seed: int = 0, n_frames: int = 50,
                     width: int = 96, height: int = 72) -> SceneSpec:
    """Static textured room (~5 m) with a gently arcing camera, noise-free.

    Walls carry low-frequency checkers for photometric conditioning; grazing
    surfaces (floor/ceiling) get smooth gradients that splats fit cleanly.
    """
    K = CameraIntrinsics(fx=0.875 * width, fy=0.875 * width, cx=width / 2 - 0.5,
                         cy=height / 2 - 0.5, width=width, height=height)
    faces = dict(_demo_faces())
    faces["y-"] = Gradient((0.58, 0.56, 0.52), (0.40, 0.42, 0.46))
    faces["y+"] = Gradient((0.52, 0.47, 0.40), (0.33, 0.31, 0.28))
    faces["z+"] = Checker(0.75, (0.68, 0.65, 0.60), (0.50, 0.52, 0.57))
    faces["x-"] = Gradient((0.72, 0.62, 0.52), (0.45, 0.40, 0.35))
    faces["x+"] = Gradient((0.40, 0.50, 0.62), (0.60, 0.68, 0.75))
    track = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        eye = np.array(
            [0.22 * np.sin(2.4 * s), 0.06 * np.sin(4.0 * s + 0.7), -0.9 + 0.28 * s]
        )
        target = np.array([0.08 * np.sin(1.3 * s), 0.0, 2.49])
        track.append(look_at(eye, target))
    return SceneSpec(
        room_min=(-2.5, -1.5, -2.5),
        room_max=(2.5, 1.5, 2.5),
        faces=faces,
        objects=[],
        camera_track=track,
        intrinsics=K,
        noise_depth=0.0,
        noise_color=0.0,
        seed=seed,
    )


def demo_dynamic_spec(seed: int = 0, n_frames: int = 38,
                      width: int = 64, height: int = 48,
                      noise_depth: float = 0.004, noise_color: float = 0.008,
                      motion_onset: int = 14, motion_end: int = 32) -> SceneSpec:
    """Room with one large cuboid that rests, sweeps across the view, and stops."""
    K = CameraIntrinsics(fx=0.875 * width, fy=0.875 * width, cx=width / 2 - 0.5,
                         cy=height / 2 - 0.5, width=width, height=height)
    track = []
    for i in range(n_frames):
        s = i / max(n_frames - 1, 1)
        # closed loop: the camera wanders but keeps re-visiting its own views,
        # which stops map-anchored drift from accumulating over the run
        eye = np.array(
            [
                0.12 * np.sin(2 * np.pi * s),
                0.04 * np.sin(4 * np.pi * s + 0.4),
                -1.45 + 0.06 * np.sin(2 * np.pi * s + 1.1),
            ]
        )
        target = np.array([0.1, 0.02 * np.sin(1.7 * s), 1.99])
        track.append(look_at(eye, target))
    p0 = np.array([-0.55, 0.05, 0.40])
    p1 = np.array([0.62, -0.08, 0.55])
    mover = ObjectSpec(
        "cuboid",
        [0.32, 0.26, 0.14],
        (0.85, 0.13, 0.10),
        track=[
            (0, p0),
            # at rest until a detection tick, then a brisk 2-frame launch so
            # the first tick after onset sees an unambiguous swept band
            (motion_onset, p0),
            (motion_onset + 2, p0 + np.array([0.27, -0.02, 0.02])),
            (motion_end, p1),
        ],
    )
    return SceneSpec(
        room_min=(-2.0, -1.25, -2.0),
        room_max=(2.0, 1.25, 2.0),
        faces=_demo_faces(0.8),
        objects=[mover],
        camera_track=track,
        intrinsics=K,
        noise_depth=noise_depth,
        noise_color=noise_color,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# plain-text (de)serialization of scene specs


def _fmt_color(c):
    return ",".join(f"{v:g}" for v in np.asarray(c, dtype=float))


def spec_to_text(spec: SceneSpec) -> str:
    K = spec.intrinsics
    lines = [
        "# synthetic scene specification",
        f"seed = {spec.seed}",
        f"fps = {spec.fps:g}",
        f"noise_depth = {spec.noise_depth:g}",
        f"noise_color = {spec.noise_color:g}",
        f"intrinsics = {K.fx:g} {K.fy:g} {K.cx:g} {K.cy:g} {K.width} {K.height}",
        f"room_min = {' '.join(f'{v:g}' for v in spec.room_min)}",
        f"room_max = {' '.join(f'{v:g}' for v in spec.room_max)}",
    ]
    for name in FACE_NAMES:
        tex = spec.faces[name]
        if isinstance(tex, Checker):
            lines.append(f"face {name} = checker {tex.period:g} {_fmt_color(tex.color_a)} {_fmt_color(tex.color_b)}")
        else:
            lines.append(f"face {name} = gradient {_fmt_color(tex.color_a)} {_fmt_color(tex.color_b)}")
    for oi, obj in enumerate(spec.objects):
        size = ",".join(f"{v:g}" for v in obj.size)
        lines.append(
            f"object {oi} = {obj.primitive} {size} {_fmt_color(obj.albedo)} {obj.appear} {obj.disappear}"
        )
        track = " ".join(f"{k}:{','.join(f'{v:g}' for v in p)}" for k, p in obj.track)
        lines.append(f"object {oi} track = {track}")
    for T in spec.camera_track:
        q = T.quat()
        t = T.translation
        lines.append(
            "camera = "
            + " ".join(f"{v:.17g}" for v in (t[0], t[1], t[2], q[0], q[1], q[2], q[3]))
        )
    return "\n".join(lines) + "\n"


def spec_from_text(text: str) -> SceneSpec:
    seed, fps = 0, 10.0
    noise_depth = noise_color = 0.0
    intr = None
    room_min = room_max = None
    faces = {}
    objects = {}
    tracks = {}
    cams = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "seed":
            seed = int(val)
        elif key == "fps":
            fps = float(val)
        elif key == "noise_depth":
            noise_depth = float(val)
        elif key == "noise_color":
            noise_color = float(val)
        elif key == "intrinsics":
            fx, fy, cx, cy, w, h = val.split()
            intr = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
        elif key == "room_min":
            room_min = [float(v) for v in val.split()]
        elif key == "room_max":
            room_max = [float(v) for v in val.split()]
        elif key.startswith("face "):
            name = key.split()[1]
            parts = val.split()
            if parts[0] == "checker":
                faces[name] = Checker(
                    float(parts[1]),
                    tuple(float(v) for v in parts[2].split(",")),
                    tuple(float(v) for v in parts[3].split(",")),
                )
            elif parts[0] == "gradient":
                faces[name] = Gradient(
                    tuple(float(v) for v in parts[1].split(",")),
                    tuple(float(v) for v in parts[2].split(",")),
                )
            else:
                raise ValueError(f"unknown texture {parts[0]!r}")
        elif key.startswith("object ") and key.endswith(" track"):
            oi = int(key.split()[1])
            tracks[oi] = [
                (int(item.split(":")[0]), [float(v) for v in item.split(":")[1].split(",")])
                for item in val.split()
            ]
        elif key.startswith("object "):
            oi = int(key.split()[1])
            parts = val.split()
            objects[oi] = dict(
                primitive=parts[0],
                size=[float(v) for v in parts[1].split(",")],
                albedo=[float(v) for v in parts[2].split(",")],
                appear=int(parts[3]),
                disappear=int(parts[4]),
            )
        elif key == "camera":
            vals = [float(v) for v in val.split()]
            cams.append(PoseSE3.from_quat_trans(np.array(vals[3:7]), np.array(vals[:3])))
        else:
            raise ValueError(f"unknown scene-spec key {key!r}")
    if intr is None or room_min is None or room_max is None:
        raise ValueError("scene spec missing intrinsics or room bounds")
    objs = [
        ObjectSpec(track=tracks.get(oi, [(0, (0, 0, 0))]), **kw)
        for oi, kw in sorted(objects.items())
    ]
    return SceneSpec(
        room_min=room_min,
        room_max=room_max,
        faces=faces,
        objects=objs,
        camera_track=cams,
        intrinsics=intr,
        noise_depth=noise_depth,
        noise_color=noise_color,
        seed=seed,
        fps=fps,
    )
