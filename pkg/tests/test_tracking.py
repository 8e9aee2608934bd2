import numpy as np
import pytest

from conftest import random_map
from dynosplat.config import PipelineConfig, TrackingConfig
from dynosplat.geometry import CameraIntrinsics, PoseSE3, perturb_pose, se3_exp, se3_log
from dynosplat.render import render
from dynosplat.scene import FrameRGBD, Mask, backproject
from dynosplat.tracking import (
    TrackingDegenerateError,
    constant_velocity_init,
    optimize_pose,
    tracking_mask,
)


class TestConstantVelocity:
    def test_zero_velocity(self, rng):
        T = se3_exp(rng.normal(scale=0.3, size=6))
        pred = constant_velocity_init(T, T)
        np.testing.assert_allclose(pred.matrix(), T.matrix(), atol=1e-12)

    def test_linear_extrapolation(self):
        prev2 = PoseSE3.identity()
        prev = PoseSE3(np.eye(3), np.array([0.0, 0.0, 0.1]))
        pred = constant_velocity_init(prev, prev2)
        np.testing.assert_allclose(pred.translation, [0.0, 0.0, 0.2], atol=1e-12)

    def test_rotation_extrapolation(self):
        # 0 deg then 5 deg about z predicts 10 deg, composed numerically
        w5 = np.array([0.0, 0.0, np.deg2rad(5.0), 0, 0, 0])
        prev2 = PoseSE3.identity()
        prev = se3_exp(w5)
        pred = constant_velocity_init(prev, prev2)
        expected = se3_exp(2 * w5)
        np.testing.assert_allclose(pred.matrix(), expected.matrix(), atol=1e-9)


class TestTrackingMask:
    def test_full_when_unmasked_and_opaque(self):
        m = tracking_mask(Mask.none((4, 6)), np.ones((4, 6)), 0.7)
        assert m.bits.all()

    def test_complement_of_dynamic(self):
        m_d = Mask.none((4, 6))
        m_d.bits[:, :3] = True
        m = tracking_mask(m_d, np.ones((4, 6)), 0.7)
        assert not m.bits[:, :3].any() and m.bits[:, 3:].all()

    def test_threshold_is_strict(self):
        m = tracking_mask(Mask.none((3, 3)), np.full((3, 3), 0.7), 0.7)
        assert m.empty()


def scene_and_frame(rng, cam):
    """A textured wall map and a frame rendered from it (zero model error)."""
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    ii = np.indices((H, W)).sum(axis=0)
    color[:, :, 0] = 0.25 + 0.5 * ((ii // 4) % 2)
    color[:, :, 1] = 0.3 + 0.4 * ((ii // 7) % 2)
    color[:, :, 2] = 0.5
    depth = 2.0 + 0.3 * np.sin(np.linspace(0, 3, W))[None, :].repeat(H, axis=0)
    frame = FrameRGBD(color, depth, np.ones((H, W), bool), 0.0)
    gmap = backproject(frame, cam, PoseSE3.identity(), Mask.full((H, W)), stride=1,
                       init_opacity=0.95)
    return gmap


@pytest.fixture
def wall(rng):
    cam = CameraIntrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)
    gmap = scene_and_frame(rng, cam)
    return cam, gmap


def rendered_frame(gmap, pose, cam, cfg):
    out = render(gmap, pose, cam, cfg.render)
    return FrameRGBD(out.color, out.depth, out.opacity > 0.5, 0.0)


class TestOptimizePose:
    def test_fixed_point(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        T = se3_exp(np.array([0.01, -0.02, 0.005, 0.02, 0.01, -0.03]))
        frame = rendered_frame(gmap, T, cam, cfg)
        res = optimize_pose(gmap, frame, Mask.none(frame.shape), T, cfg.tracking, cam, cfg.render)
        err = se3_log(res.pose.compose(T.inverse()))
        assert np.linalg.norm(err) < 1e-9
        assert res.final_loss < 1e-12

    def test_recovers_perturbed_pose(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        T = se3_exp(np.array([0.005, -0.01, 0.002, 0.01, -0.02, 0.015]))
        frame = rendered_frame(gmap, T, cam, cfg)
        delta = np.concatenate(
            [np.deg2rad(1.0) * np.array([0.5, -0.4, 0.45]), 0.01 * np.array([0.55, 0.6, -0.58])]
        )
        init = perturb_pose(T, delta)
        res = optimize_pose(gmap, frame, Mask.none(frame.shape), init, cfg.tracking, cam, cfg.render)
        err = se3_log(res.pose.compose(T.inverse()))
        assert np.linalg.norm(err[3:]) < 1e-3       # 1 mm
        assert np.rad2deg(np.linalg.norm(err[:3])) < 0.1

    def test_masked_pixels_contribute_nothing(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        cfg.tracking.iterations = 3
        T = PoseSE3.identity()
        frame = rendered_frame(gmap, T, cam, cfg)
        m_d = Mask.none(frame.shape)
        m_d.bits[:, :20] = True
        init = perturb_pose(T, np.array([0.002, 0, 0, 0.005, 0, 0]))
        base = optimize_pose(gmap, frame, m_d, init, cfg.tracking, cam, cfg.render)
        # corrupt the masked pixels arbitrarily: identical result
        corrupted = frame.color.copy()
        corrupted[:, :20] = 0.123
        cdepth = frame.depth.copy()
        cdepth[:, :20] = 9.0
        frame2 = FrameRGBD(corrupted, cdepth, frame.valid_mask, 0.0)
        res2 = optimize_pose(gmap, frame2, m_d, init, cfg.tracking, cam, cfg.render)
        np.testing.assert_allclose(res2.pose.matrix(), base.pose.matrix(), atol=0)
        assert res2.final_loss == base.final_loss

    def test_dynamic_mask_improves_pose_under_outliers(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        T = se3_exp(np.array([0.002, -0.004, 0.001, 0.008, -0.006, 0.01]))
        frame = rendered_frame(gmap, T, cam, cfg)
        # moving object occupying ~20% of pixels: closer depth, alien color
        color = frame.color.copy()
        depth = frame.depth.copy()
        obj = np.zeros(frame.shape, bool)
        obj[14:34, 22:44] = True
        color[obj] = [0.9, 0.05, 0.05]
        depth[obj] = 0.9
        poisoned = FrameRGBD(color, depth, frame.valid_mask, 0.0)
        init = perturb_pose(T, np.array([0.004, -0.003, 0.002, 0.008, 0.006, -0.007]))
        with_mask = optimize_pose(gmap, poisoned, Mask(obj), init, cfg.tracking, cam, cfg.render)
        without = optimize_pose(gmap, poisoned, Mask.none(frame.shape), init, cfg.tracking, cam, cfg.render)
        err_m = np.linalg.norm(se3_log(with_mask.pose.compose(T.inverse())))
        err_w = np.linalg.norm(se3_log(without.pose.compose(T.inverse())))
        assert err_m < err_w

    def test_monotone_loss_trend(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        T = PoseSE3.identity()
        frame = rendered_frame(gmap, T, cam, cfg)
        init = perturb_pose(T, np.array([0.01, 0.005, -0.008, 0.02, -0.015, 0.01]))
        # run twice with different iteration caps: the longer run never ends worse
        cfg.tracking.iterations = 1
        first = optimize_pose(gmap, frame, Mask.none(frame.shape), init, cfg.tracking, cam, cfg.render)
        cfg.tracking.iterations = 100
        last = optimize_pose(gmap, frame, Mask.none(frame.shape), init, cfg.tracking, cam, cfg.render)
        assert last.final_loss <= first.final_loss

    def test_degenerate_mask_raises(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        frame = rendered_frame(gmap, PoseSE3.identity(), cam, cfg)
        m_d = Mask.full(frame.shape)  # everything dynamic
        with pytest.raises(TrackingDegenerateError, match="degenerate"):
            optimize_pose(gmap, frame, m_d, PoseSE3.identity(), cfg.tracking, cam, cfg.render)

    def test_determinism(self, wall):
        cam, gmap = wall
        cfg = PipelineConfig()
        T = PoseSE3.identity()
        frame = rendered_frame(gmap, T, cam, cfg)
        init = perturb_pose(T, np.array([0.003, 0.001, -0.002, 0.01, -0.01, 0.005]))
        a = optimize_pose(gmap, frame, Mask.none(frame.shape), init, cfg.tracking, cam, cfg.render)
        b = optimize_pose(gmap, frame, Mask.none(frame.shape), init, cfg.tracking, cam, cfg.render)
        assert np.array_equal(a.pose.matrix(), b.pose.matrix())
        assert a.final_loss == b.final_loss


def test_tracking_config_validation():
    cfg = TrackingConfig(lambda_track=1.5)
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = TrackingConfig(tau_track=0.0)
    with pytest.raises(ValueError):
        cfg.validate()
