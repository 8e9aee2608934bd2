import numpy as np
import pytest

from dynosplat.geometry import CameraIntrinsics, PoseSE3
from dynosplat.synthetic import (
    Checker,
    Gradient,
    ObjectSpec,
    SceneSpec,
    demo_dynamic_spec,
    demo_static_spec,
    generate,
    look_at,
    spec_from_text,
    spec_to_text,
)


def plain_room_spec(n_frames=2, objects=(), noise_depth=0.0, seed=0, eye=(0.0, 0.0, -2.0)):
    K = CameraIntrinsics(fx=40.0, fy=40.0, cx=23.5, cy=17.5, width=48, height=36)
    track = [look_at(eye, (0.0, 0.0, 2.0)) for _ in range(n_frames)]
    faces = {
        name: Gradient((0.6, 0.6, 0.6), (0.4, 0.4, 0.4)) for name in
        ("x-", "x+", "y-", "y+", "z-", "z+")
    }
    return SceneSpec(
        room_min=(-2.0, -1.5, -2.5),
        room_max=(2.0, 1.5, 2.0),
        faces=faces,
        objects=list(objects),
        camera_track=track,
        intrinsics=K,
        noise_depth=noise_depth,
        seed=seed,
    )


class TestRayCasting:
    def test_facing_wall_depth_is_exact(self):
        # camera at z=-2 staring at the wall at z=+2: z-depth of the flat
        # fronto-parallel wall is exactly 4 m on every wall pixel
        spec = plain_room_spec()
        gt = generate(spec)
        d = gt.frames[0].depth
        K = spec.intrinsics
        assert abs(d[17, 23] - 4.0) < 1e-9
        # the facing wall covers pixels whose rays satisfy |x|,|y| < wall extent
        uu, vv = np.meshgrid(np.arange(K.width), np.arange(K.height))
        x = (uu - K.cx) / K.fx * 4.0
        y = (vv - K.cy) / K.fy * 4.0
        facing = (np.abs(x) < 2.0 - 1e-6) & (np.abs(y) < 1.5 - 1e-6)
        assert np.abs(d[facing] - 4.0).max() < 1e-9
        assert (d[~facing] < 4.0 - 1e-9).all()

class TestSphereDepth:
    def test_center_pixel(self):
        K = CameraIntrinsics(fx=40.0, fy=40.0, cx=24.0, cy=18.0, width=48, height=36)
        track = [PoseSE3.identity()]
        faces = {n: Gradient((0.5,) * 3, (0.5,) * 3) for n in ("x-", "x+", "y-", "y+", "z-", "z+")}
        obj = ObjectSpec("sphere", [0.2], (1.0, 0.0, 0.0), [(0, (0.0, 0.0, 1.0))])
        spec = SceneSpec(
            room_min=(-2, -1.5, -0.5), room_max=(2, 1.5, 3.0), faces=faces,
            objects=[obj], camera_track=track, intrinsics=K,
        )
        gt = generate(spec)
        assert abs(gt.frames[0].depth[18, 24] - 0.8) < 1e-9
        assert gt.object_masks[0][0].bits[18, 24]
        np.testing.assert_allclose(gt.frames[0].color[18, 24], [1.0, 0.0, 0.0], atol=1e-12)


def test_mask_matches_first_hits_and_albedo():
    obj = ObjectSpec("cuboid", [0.3, 0.25, 0.2], (0.9, 0.1, 0.2), [(0, (0.0, 0.0, 0.0))])
    spec = plain_room_spec(objects=[obj])
    gt = generate(spec)
    m = gt.object_masks[0][0].bits
    colors = gt.frames[0].color
    assert m.any()
    # mask pixels carry exactly the object's albedo, others never do
    albedo = np.array([0.9, 0.1, 0.2])
    np.testing.assert_allclose(colors[m], np.broadcast_to(albedo, colors[m].shape), atol=1e-12)
    assert not np.isclose(colors[~m], albedo).all(axis=-1).any()


def test_moving_cuboid_mask_grows_on_approach():
    # object approaches the camera: mask area is monotone (non-strict under
    # pixel quantization) and tracks the analytic projected face size
    obj = ObjectSpec(
        "cuboid", [0.2, 0.2, 0.2], (0.8, 0.2, 0.2),
        [(0, (0.0, 0.0, 1.0)), (5, (0.0, 0.0, -0.5))],
    )
    spec = plain_room_spec(n_frames=6, objects=[obj])
    gt = generate(spec)
    areas = [gt.object_masks[i][0].area() for i in range(6)]
    assert all(a <= b for a, b in zip(areas, areas[1:]))
    assert areas[-1] > 2 * areas[0]
    fx = spec.intrinsics.fx
    for i, area in enumerate(areas):
        dist = 3.0 - 1.5 * i / 5 - 0.2  # camera at z=-2 to the front face
        expected = (2 * 0.2 * fx / dist) ** 2
        assert area == pytest.approx(expected, rel=0.35)


def test_appear_disappear_window():
    obj = ObjectSpec("sphere", [0.3], (0.2, 0.8, 0.2), [(0, (0.0, 0.0, 0.0))],
                     appear=2, disappear=4)
    spec = plain_room_spec(n_frames=6, objects=[obj])
    gt = generate(spec)
    present = [0 in gt.object_masks[i] for i in range(6)]
    assert present == [False, False, True, True, False, False]


def test_determinism_bitwise():
    spec_a = demo_dynamic_spec(seed=3, n_frames=4)
    spec_b = demo_dynamic_spec(seed=3, n_frames=4)
    ga, gb = generate(spec_a), generate(spec_b)
    for fa, fb in zip(ga.frames, gb.frames):
        assert np.array_equal(fa.color, fb.color)
        assert np.array_equal(fa.depth, fb.depth)


def test_noise_is_zero_mean():
    spec = plain_room_spec(n_frames=12, noise_depth=0.01, seed=5)
    gt = generate(spec)
    clean = generate(plain_room_spec(n_frames=12, noise_depth=0.0))
    diffs = np.concatenate(
        [(a.depth - b.depth).ravel() for a, b in zip(gt.frames, clean.frames)]
    )
    n = diffs.size
    assert n > 1e4
    assert abs(diffs.mean()) < 3 * 0.01 / np.sqrt(n)


def test_exact_depth_without_noise():
    spec = plain_room_spec()
    a = generate(spec)
    assert np.isfinite(a.frames[0].depth).all()
    assert (a.frames[0].depth > 0).all()


def test_camera_outside_room_rejected():
    with pytest.raises(ValueError, match="room"):
        plain_room_spec(eye=(0.0, 0.0, -5.0))


def test_spec_text_roundtrip():
    spec = demo_dynamic_spec(seed=9, n_frames=3)
    spec2 = spec_from_text(spec_to_text(spec))
    ga, gb = generate(spec), generate(spec2)
    for fa, fb in zip(ga.frames, gb.frames):
        assert np.abs(fa.depth - fb.depth).max() < 1e-9
        assert np.abs(fa.color - fb.color).max() < 1e-9
    assert spec2.seed == spec.seed
    assert len(spec2.objects) == len(spec.objects)


def test_demo_specs_generate():
    for spec in (demo_static_spec(n_frames=2), demo_dynamic_spec(n_frames=2)):
        gt = generate(spec)
        assert len(gt.frames) == 2
        assert gt.frames[0].color.min() >= 0 and gt.frames[0].color.max() <= 1
