import numpy as np
import pytest

from conftest import random_map
from dynosplat.config import MappingConfig, PipelineConfig
from dynosplat.geometry import CameraIntrinsics, PoseSE3
from dynosplat.mapping import (
    DynamicModelSnapshot,
    Keyframe,
    dynamic_mapping_step,
    init_dynamic_model,
    insertion_mask,
    scale_regularization,
    scale_regularization_grad,
    separate_dynamic,
    ssim,
    ssim_with_grad,
    static_mapping_step,
)
from dynosplat.metrics import psnr
from dynosplat.render import render
from dynosplat.scene import FrameRGBD, GaussianMap, Mask, backproject

IDQ = np.array([0.0, 0.0, 0.0, 1.0])


class TestSSIM:
    def test_identical_images(self, rng):
        a = rng.uniform(size=(32, 32, 3))
        assert ssim(a, a, Mask.full((32, 32))) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images(self):
        a = np.full((20, 20, 3), 0.3)
        assert ssim(a, a.copy(), Mask.full((20, 20))) == pytest.approx(1.0)

    def test_inverted_image_scores_low(self, rng):
        a = rng.uniform(size=(32, 32, 3))
        assert ssim(a, 1.0 - a, Mask.full((32, 32))) < 0.2

    def test_empty_mask_raises(self, rng):
        a = rng.uniform(size=(8, 8, 3))
        with pytest.raises(ValueError, match="empty"):
            ssim(a, a, Mask.none((8, 8)))

    def test_matches_skimage_on_interior(self, rng):
        from skimage.metrics import structural_similarity

        a = rng.uniform(size=(48, 48))
        b = np.clip(a + rng.normal(scale=0.08, size=a.shape), 0, 1)
        # skimage's mean crops the filter radius; compare on the same interior
        interior = Mask.none((48, 48))
        interior.bits[5:-5, 5:-5] = True
        ours = ssim(a, b, interior)
        theirs = structural_similarity(
            a, b, win_size=11, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0,
        )
        assert ours == pytest.approx(theirs, abs=1e-10)

    def test_gradient_matches_finite_differences(self, rng):
        a = rng.uniform(0.2, 0.8, size=(16, 16, 3))
        b = rng.uniform(0.2, 0.8, size=(16, 16, 3))
        m = Mask.none((16, 16))
        m.bits[3:13, 2:14] = True
        val, grad = ssim_with_grad(a, b, m)
        h = 1e-6
        for (y, x, c) in [(5, 5, 0), (8, 10, 1), (3, 2, 2), (12, 13, 0), (0, 0, 1)]:
            a[y, x, c] += h
            vp = ssim(a, b, m)
            a[y, x, c] -= 2 * h
            vm = ssim(a, b, m)
            a[y, x, c] += h
            fd = (vp - vm) / (2 * h)
            assert grad[y, x, c] == pytest.approx(fd, abs=1e-6)


class TestScaleRegularization:
    def test_isotropic_is_zero(self):
        gmap = GaussianMap()
        gmap.add(np.zeros((3, 3)), IDQ, np.full((3, 3), 0.2), 0.5, np.full((3, 3), 0.5))
        assert scale_regularization(gmap) == 0.0

    def test_hand_evaluated_case(self):
        gmap = GaussianMap()
        gmap.add(np.zeros(3), IDQ, np.array([1.0, 1.0, 4.0]), 0.5, np.full(3, 0.5))
        # mean scale 2: |1-2| + |1-2| + |4-2| = 4, averaged over 3 components
        assert scale_regularization(gmap) == pytest.approx(4.0 / 3.0)

    def test_empty_map_is_zero(self):
        assert scale_regularization(GaussianMap()) == 0.0

    def test_gradient_matches_fd(self, rng):
        gmap = random_map(rng, 6)
        g = scale_regularization_grad(gmap)
        h = 1e-7
        for i in (0, 3):
            for j in range(3):
                orig = gmap.scales[i, j]
                gmap.scales[i, j] = orig + h
                vp = scale_regularization(gmap)
                gmap.scales[i, j] = orig - h
                vm = scale_regularization(gmap)
                gmap.scales[i, j] = orig
                assert g[i, j] == pytest.approx((vp - vm) / (2 * h), abs=1e-6)


class TestInsertionMask:
    def test_fully_mapped_is_empty(self):
        m = insertion_mask(Mask.none((4, 4)), np.ones((4, 4), bool), np.full((4, 4), 0.99), 0.8)
        assert m.empty()

    def test_low_opacity_region_selected(self):
        op = np.full((4, 4), 0.99)
        op[1:3, 1:3] = 0.1
        m = insertion_mask(Mask.none((4, 4)), np.ones((4, 4), bool), op, 0.8)
        expected = np.zeros((4, 4), bool)
        expected[1:3, 1:3] = True
        assert (m.bits == expected).all()

    def test_dynamic_pixels_never_inserted(self):
        m_d = Mask.full((4, 4))
        m = insertion_mask(m_d, np.ones((4, 4), bool), np.zeros((4, 4)), 0.8)
        assert m.empty()

    def test_threshold_is_strict(self):
        m = insertion_mask(Mask.none((2, 2)), np.ones((2, 2), bool), np.full((2, 2), 0.8), 0.8)
        assert m.empty()


def wall_frame(cam, depth=2.0):
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    ii = np.indices((H, W)).sum(axis=0)
    color[:, :, 0] = 0.3 + 0.4 * ((ii // 5) % 2)
    color[:, :, 1] = 0.5
    color[:, :, 2] = 0.6 - 0.2 * ((ii // 3) % 2)
    d = np.full((H, W), depth)
    return FrameRGBD(color, d, np.ones((H, W), bool), 0.0)


@pytest.fixture
def cam48():
    return CameraIntrinsics(fx=50.0, fy=50.0, cx=23.5, cy=17.5, width=48, height=36)


class TestSeparateDynamic:
    def test_extracts_exactly_the_masked_surface(self, cam48):
        frame = wall_frame(cam48)
        # object pixels: nearer depth block
        frame.depth[10:20, 15:30] = 1.2
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape), stride=1)
        n_before = len(gmap)
        mask = Mask.none(frame.shape)
        mask.bits[10:20, 15:30] = True
        extracted = separate_dynamic(gmap, mask, frame, PoseSE3.identity(), cam48)
        assert len(extracted) == 10 * 15
        assert len(gmap) == n_before - 10 * 15
        # all extracted gaussians sit on the object surface depth band
        np.testing.assert_allclose(extracted.means[:, 2], 1.2, atol=1e-9)

    def test_unmapped_object_extracts_nothing(self, cam48):
        frame = wall_frame(cam48)
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape), stride=1)
        # mask over wall pixels, but pretend the object is much nearer than anything mapped
        obj_frame = wall_frame(cam48)
        obj_frame.depth[5:10, 5:10] = 0.5
        mask = Mask.none(frame.shape)
        mask.bits[5:10, 5:10] = True
        extracted = separate_dynamic(gmap, mask, obj_frame, PoseSE3.identity(), cam48)
        assert len(extracted) == 0

    def test_full_image_mask_extracts_visible_surface(self, cam48):
        frame = wall_frame(cam48)
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape), stride=1)
        extracted = separate_dynamic(gmap, Mask.full(frame.shape), frame, PoseSE3.identity(), cam48)
        assert len(gmap) == 0
        assert len(extracted) == 48 * 36

    def test_background_behind_band_survives(self, cam48):
        frame = wall_frame(cam48)
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape), stride=1)
        # observed object 1 m in front of the mapped wall: wall outside the band
        obj_frame = wall_frame(cam48, depth=1.0)
        extracted = separate_dynamic(gmap, Mask.full(frame.shape), obj_frame, PoseSE3.identity(), cam48)
        assert len(extracted) == 0

    def test_empty_mask_rejected(self, cam48):
        frame = wall_frame(cam48)
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape), stride=2)
        with pytest.raises(ValueError, match="empty"):
            separate_dynamic(gmap, Mask.none(frame.shape), frame, PoseSE3.identity(), cam48)


class TestStaticMappingStep:
    def test_fixed_point_no_churn(self, cam48):
        cfg = PipelineConfig()
        frame = wall_frame(cam48)
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape),
                           stride=1, init_opacity=0.95)
        out = render(gmap, PoseSE3.identity(), cam48, cfg.render)
        # observation := the map's own render -> exactly zero residual
        fixed = FrameRGBD(out.color, out.depth, np.ones(frame.shape, bool), 0.0)
        kf = Keyframe(0, fixed, PoseSE3.identity(), Mask.none(frame.shape))
        state_before = (gmap.means.copy(), gmap.opacities.copy(), len(gmap))
        stats = static_mapping_step(gmap, [kf], cfg.mapping, cam48, cfg.render,
                                    np.random.default_rng(0))
        assert stats["inserted"] == 0
        assert stats["split"] == 0 and stats["pruned"] == 0
        assert len(gmap) == state_before[2]
        assert abs(stats["last_loss"] - stats["first_loss"]) < 1e-8
        np.testing.assert_allclose(gmap.means, state_before[0], atol=1e-12)

    def test_low_opacity_gaussian_pruned(self, cam48):
        cfg = PipelineConfig()
        frame = wall_frame(cam48)
        gmap = backproject(frame, cam48, PoseSE3.identity(), Mask.full(frame.shape),
                           stride=1, init_opacity=0.95)
        weak = gmap.add(np.array([0.0, 0.0, 1.5]), IDQ, np.full(3, 0.02), 0.1, np.full(3, 0.5))
        kf = Keyframe(0, frame, PoseSE3.identity(), Mask.none(frame.shape))
        cfg.mapping.iterations = 1
        static_mapping_step(gmap, [kf], cfg.mapping, cam48, cfg.render, np.random.default_rng(0))
        assert weak[0] not in gmap.ids

    def test_insertion_fills_holes(self, cam48):
        cfg = PipelineConfig()
        frame = wall_frame(cam48)
        half = Mask.none(frame.shape)
        half.bits[:, :24] = True
        gmap = backproject(frame, cam48, PoseSE3.identity(), half, stride=1, init_opacity=0.95)
        n0 = len(gmap)
        kf = Keyframe(0, frame, PoseSE3.identity(), Mask.none(frame.shape))
        cfg.mapping.iterations = 5
        stats = static_mapping_step(gmap, [kf], cfg.mapping, cam48, cfg.render,
                                    np.random.default_rng(0), pixel_stride=1)
        assert stats["inserted"] > 0
        assert len(gmap) > n0

    def test_disocclusion_recovery_psnr(self, cam48):
        # background re-observed after an occluder departs: holes refilled and
        # optimized to high fidelity
        cfg = PipelineConfig()
        frame = wall_frame(cam48)
        hole = Mask.none(frame.shape)
        hole.bits[12:24, 18:34] = True
        visible = Mask(~hole.bits)
        gmap = backproject(frame, cam48, PoseSE3.identity(), visible, stride=1, init_opacity=0.95)
        kf = Keyframe(0, frame, PoseSE3.identity(), Mask.none(frame.shape))
        for _ in range(3):
            static_mapping_step(gmap, [kf], cfg.mapping, cam48, cfg.render,
                                np.random.default_rng(0), pixel_stride=1)
        out = render(gmap, PoseSE3.identity(), cam48, cfg.render)
        assert psnr(out.color, frame.color, hole) >= 30.0
        assert np.abs(out.depth - frame.depth)[hole.bits].mean() < 0.01

    def test_requires_a_keyframe(self, cam48):
        cfg = PipelineConfig()
        with pytest.raises(ValueError, match="keyframe"):
            static_mapping_step(GaussianMap(), [], cfg.mapping, cam48, cfg.render,
                                np.random.default_rng(0))


class TestDynamicModel:
    def object_frame(self, cam):
        frame = wall_frame(cam)
        frame.color[10:20, 15:30] = [0.15, 0.2, 0.1]
        frame.depth[10:20, 15:30] = 1.2
        mask = Mask.none(frame.shape)
        mask.bits[10:20, 15:30] = True
        return frame, mask

    def test_init_respects_stride_and_bounds(self, cam48):
        frame, mask = self.object_frame(cam48)
        snap = init_dynamic_model(frame, mask, PoseSE3.identity(), cam48, t=3, pixel_stride=2)
        # ~150/4 gaussians on the stride-2 grid, all on the object surface
        assert 30 <= len(snap.gaussians) <= 50
        np.testing.assert_allclose(snap.gaussians.means[:, 2], 1.2, atol=1e-9)
        assert snap.t == 3

    def test_snapshot_backprojects_into_mask(self, cam48):
        frame, mask = self.object_frame(cam48)
        snap = init_dynamic_model(frame, mask, PoseSE3.identity(), cam48, t=0)
        uv = cam48.project(snap.gaussians.means)
        ui = np.round(uv[:, 0]).astype(int)
        vi = np.round(uv[:, 1]).astype(int)
        assert mask.bits[vi, ui].all()

    def test_invalid_depth_rejected(self, cam48):
        frame, mask = self.object_frame(cam48)
        valid = frame.valid_mask.copy()
        valid[mask.bits] = False
        bad = FrameRGBD(frame.color, frame.depth, valid, 0.0)
        with pytest.raises(ValueError, match="valid object depth"):
            init_dynamic_model(bad, mask, PoseSE3.identity(), cam48, t=0)

    def test_single_pixel_mask(self, cam48):
        frame, _ = self.object_frame(cam48)
        m = Mask.none(frame.shape)
        m.bits[11, 17] = True
        snap = init_dynamic_model(frame, m, PoseSE3.identity(), cam48, t=0)
        assert len(snap.gaussians) == 1

    def test_fixed_point_when_render_matches(self, cam48):
        cfg = PipelineConfig()
        frame, mask = self.object_frame(cam48)
        snap = init_dynamic_model(frame, mask, PoseSE3.identity(), cam48, t=0,
                                  pixel_stride=1, init_opacity=0.95)
        out = render(snap.gaussians, PoseSE3.identity(), cam48, cfg.render)
        fixed = FrameRGBD(out.color, out.depth, np.ones(frame.shape, bool), 0.0)
        stats = dynamic_mapping_step(snap, fixed, mask, PoseSE3.identity(),
                                     cfg.mapping, cam48, cfg.render)
        assert abs(stats["last_loss"] - stats["first_loss"]) < 1e-6

    def test_zeroed_colors_recover(self, cam48):
        # dark object: the configured color learning rate can recover its
        # albedo from black within one optimization step
        cfg = PipelineConfig()
        frame, mask = self.object_frame(cam48)
        snap = init_dynamic_model(frame, mask, PoseSE3.identity(), cam48, t=0, pixel_stride=1)
        snap.gaussians.colors[:] = 0.0
        dynamic_mapping_step(snap, frame, mask, PoseSE3.identity(), cfg.mapping, cam48, cfg.render)
        out = render(snap.gaussians, PoseSE3.identity(), cam48, cfg.render)
        interior = Mask.none(frame.shape)
        interior.bits[11:19, 16:29] = True
        assert psnr(out.color, frame.color, interior) >= 28.0

    def test_pixels_outside_mask_contribute_nothing(self, cam48):
        cfg = PipelineConfig()
        cfg.mapping.iterations = 4
        frame, mask = self.object_frame(cam48)
        snap_a = init_dynamic_model(frame, mask, PoseSE3.identity(), cam48, t=0)
        snap_b = DynamicModelSnapshot(0, snap_a.gaussians.copy(), mask)
        corrupted = frame.color.copy()
        corrupted[~mask.bits] = 0.987
        frame_b = FrameRGBD(corrupted, frame.depth, frame.valid_mask, 0.0)
        dynamic_mapping_step(snap_a, frame, mask, PoseSE3.identity(), cfg.mapping, cam48, cfg.render)
        dynamic_mapping_step(snap_b, frame_b, mask, PoseSE3.identity(), cfg.mapping, cam48, cfg.render)
        np.testing.assert_allclose(snap_a.gaussians.means, snap_b.gaussians.means, atol=0)
        np.testing.assert_allclose(snap_a.gaussians.colors, snap_b.gaussians.colors, atol=0)


def test_mapping_config_validation():
    cfg = MappingConfig(prune_opacity=0.0)
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = MappingConfig(lr_color=-1)
    with pytest.raises(ValueError):
        cfg.validate()
