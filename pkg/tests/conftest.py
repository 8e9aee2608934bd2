import numpy as np
import pytest

from dynosplat.config import RenderSettings
from dynosplat.geometry import CameraIntrinsics, PoseSE3, se3_exp
from dynosplat.scene import GaussianMap


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_map(rng, n, depth_range=(1.0, 3.0), spread=0.8, opacity_range=(0.2, 0.9),
               scale_range=(0.02, 0.12)) -> GaussianMap:
    """Random gaussians in front of an identity camera, away from clamp edges."""
    gmap = GaussianMap()
    means = np.stack(
        [
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(*depth_range, n),
        ],
        axis=1,
    )
    gmap.add(
        means,
        random_unit_quats(rng, n),
        rng.uniform(*scale_range, (n, 3)),
        rng.uniform(*opacity_range, n),
        rng.uniform(0.05, 0.95, (n, 3)),
    )
    return gmap


def random_pose(rng, rot_scale=0.1, trans_scale=0.1) -> PoseSE3:
    delta = np.concatenate(
        [rng.normal(scale=rot_scale, size=3), rng.normal(scale=trans_scale, size=3)]
    )
    return se3_exp(delta)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def cam64():
    return CameraIntrinsics(fx=70.0, fy=70.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture
def cam_small():
    return CameraIntrinsics(fx=30.0, fy=28.0, cx=12.0, cy=11.5, width=24, height=24)


@pytest.fixture
def smooth_settings():
    """Thresholds tightened so the forward map is smooth at finite-difference scale."""
    return RenderSettings(alpha_min=1e-12, trans_eps=1e-12)
