"""Pipeline configuration: every threshold, weight, learning rate and cadence.

Config files are INI-style ``key = value`` with one section per subsystem.
Unknown keys or out-of-range values are rejected before any frame is touched.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field


@dataclass
class RenderSettings:
    """Rasterizer constants shared by the tiled renderer and the reference path."""

    near_plane: float = 0.05          # meters; gaussians at or behind are culled
    cull_margin: float = 32.0         # px outside the image before mean-based culling
    blur_floor: float = 0.3           # px^2 added to both cov2d diagonal entries
    alpha_clamp: float = 0.99
    alpha_min: float = 1.0 / 255.0    # contributions below this are dropped
    trans_eps: float = 1e-4           # stop compositing once transmittance < this
    tile: int = 16

    def validate(self):
        if self.near_plane <= 0:
            raise ValueError("near_plane must be > 0")
        if not (0 < self.alpha_clamp < 1):
            raise ValueError("alpha_clamp must be in (0,1)")
        if not (0 < self.alpha_min < self.alpha_clamp):
            raise ValueError("alpha_min must be in (0, alpha_clamp)")
        if not (0 <= self.trans_eps < 1):
            raise ValueError("trans_eps must be in [0,1)")
        if self.blur_floor < 0:
            raise ValueError("blur_floor must be >= 0")


@dataclass
class TrackingConfig:
    lambda_track: float = 0.6
    iterations: int = 100
    lr_rotation: float = 0.002
    lr_translation: float = 0.01
    tau_track: float = 0.7
    max_halvings: int = 4             # step-halving attempts when the loss increases
    early_stop_rel: float = 1e-6      # relative loss change considered stagnant
    early_stop_patience: int = 5
    min_inlier_fraction: float = 0.01

    def validate(self):
        if not (0 <= self.lambda_track <= 1):
            raise ValueError("lambda_track must be in [0,1]")
        if self.lr_rotation <= 0 or self.lr_translation <= 0:
            raise ValueError("tracking learning rates must be > 0")
        if not (0 < self.tau_track < 1):
            raise ValueError("tau_track must be in (0,1)")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class MappingConfig:
    tau_map: float = 0.8
    iterations: int = 100
    lambda_ssim: float = 0.2
    lambda_color: float = 1.0
    lambda_depth: float = 1.0
    lambda_reg: float = 1.0
    lr_position: float = 0.001
    lr_position_final: float = 1.6e-6
    lr_position_decay_steps: int = 30000   # exponential decay horizon (optimizer steps)
    lr_color: float = 0.0025
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_rotation: float = 0.001
    densify_opacity: float = 0.8
    prune_opacity: float = 0.3
    densify_grad: float = 2e-4        # accumulated view-space gradient norm trigger
    keyframe_stride: int = 5
    keyframe_sample: int = 4          # past keyframes sampled per mapping step

    def validate(self):
        for name in ("lr_position", "lr_color", "lr_opacity", "lr_scale", "lr_rotation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("tau_map", "densify_opacity", "prune_opacity"):
            v = getattr(self, name)
            if not (0 < v < 1):
                raise ValueError(f"{name} must be in (0,1)")
        if self.iterations < 1 or self.keyframe_stride < 1:
            raise ValueError("iterations and keyframe_stride must be >= 1")
        if not (0 <= self.lambda_ssim <= 1):
            raise ValueError("lambda_ssim must be in [0,1]")


@dataclass
class DetectConfig:
    cadence: int = 5                  # detection every N frames (10 for TUM-style data)
    mult_color: float = 20.0          # threshold = mult * median error (valid range 10-30)
    mult_depth: float = 20.0
    floor_color: float = 0.05         # absolute threshold floors for the zero-median case
    floor_depth: float = 0.02         # meters
    tau_cover: float = 0.5            # pixels with rendered opacity below this are ignored
    opening_radius: int = 1           # morphological opening applied to the dynamic mask
    min_component_area: int = 16      # px; smaller inconsistency blobs are ignored
    overlap_match: float = 0.3        # component-in-object containment => same object
    delta_depth: float = 0.05         # region growing: max depth step between neighbors (m)
    delta_color: float = 0.15         # region growing: max color step between neighbors
    max_region_fraction: float = 0.5  # growth beyond this fraction of the image overflows
    border_margin: float = 0.04       # terminate when the center is this close to a border
    area_growth: float = 1.5          # terminate when the mask area grows by more than this
    center_jump: float = 0.2          # terminate on center moves over this x image diagonal

    def validate(self):
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if not (1 <= self.mult_color) or not (1 <= self.mult_depth):
            raise ValueError("inconsistency multipliers must be >= 1")
        if not (0 < self.tau_cover < 1):
            raise ValueError("tau_cover must be in (0,1)")
        if not (0 < self.max_region_fraction <= 1):
            raise ValueError("max_region_fraction must be in (0,1]")
        if self.delta_depth <= 0 or self.delta_color <= 0:
            raise ValueError("region-growing deltas must be > 0")
        if not (0 < self.border_margin < 0.5):
            raise ValueError("border_margin must be in (0, 0.5)")
        if self.area_growth <= 1:
            raise ValueError("area_growth must be > 1")


@dataclass
class DatasetConfig:
    depth_scale: float = 5000.0       # 16-bit PNG units per meter (TUM convention)
    min_depth: float = 0.1
    max_depth: float = 10.0
    association_tol: float = 0.02     # seconds, rgb/depth timestamp association
    fx: float = 525.0                 # fallback intrinsics when the dataset carries none
    fy: float = 525.0
    cx: float = 319.5
    cy: float = 239.5
    width: int = 640
    height: int = 480

    def validate(self):
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be > 0")
        if not (0 <= self.min_depth < self.max_depth):
            raise ValueError("need 0 <= min_depth < max_depth")
        if self.association_tol <= 0:
            raise ValueError("association_tol must be > 0")


@dataclass
class PipelineConfig:
    """Every tunable of the system, grouped by subsystem."""

    seed: int = 0
    pixel_stride: int = 2             # back-projection stride when inserting gaussians
    init_opacity: float = 0.5
    init_scale_factor: float = 0.5    # scale = depth/fx * stride * this
    sep_eps_front: float = 0.02       # dynamic separation band in front of observed depth (m)
    sep_eps_behind: float = 0.2       # and behind (m)
    dynamic_enabled: bool = True
    render: RenderSettings = field(default_factory=RenderSettings)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self) -> "PipelineConfig":
        if self.pixel_stride < 1:
            raise ValueError("pixel_stride must be >= 1")
        if not (0 < self.init_opacity < 1):
            raise ValueError("init_opacity must be in (0,1)")
        if self.sep_eps_front < 0 or self.sep_eps_behind < 0:
            raise ValueError("separation bands must be >= 0")
        self.render.validate()
        self.tracking.validate()
        self.mapping.validate()
        self.detect.validate()
        self.dataset.validate()
        return self


_SECTIONS = {
    "pipeline": None,
    "render": "render",
    "tracking": "tracking",
    "mapping": "mapping",
    "detect": "detect",
    "dataset": "dataset",
}


def _coerce(value: str, target):
    if isinstance(target, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    return value


def load_config(path: str | None = None, text: str | None = None) -> PipelineConfig:
    """Parse an INI config; unknown sections or keys raise ValueError."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    else:
        return cfg.validate()

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        attr = _SECTIONS[section]
        target = cfg if attr is None else getattr(cfg, attr)
        valid = {f.name for f in dataclasses.fields(target) if not dataclasses.is_dataclass(f.type) and f.name not in _SECTIONS.values()}
        # nested dataclass fields are configured through their own sections
        nested = {f.name for f in dataclasses.fields(target) if f.name in ("render", "tracking", "mapping", "detect", "dataset")}
        for key, raw in parser.items(section):
            if key in nested or key not in {f.name for f in dataclasses.fields(target)} - nested:
                raise ValueError(f"unknown config key [{section}] {key}")
            setattr(target, key, _coerce(raw, getattr(target, key)))
        del valid
    return cfg.validate()


def dump_config(cfg: PipelineConfig) -> str:
    """Render the full configuration as INI text (the --dump-config output)."""
    parser = configparser.ConfigParser()
    for section, attr in _SECTIONS.items():
        target = cfg if attr is None else getattr(cfg, attr)
        parser[section] = {}
        for f in dataclasses.fields(target):
            if f.name in ("render", "tracking", "mapping", "detect", "dataset"):
                continue
            parser[section][f.name] = repr(getattr(target, f.name))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
