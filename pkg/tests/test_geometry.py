import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dynosplat.geometry import (
    CameraIntrinsics,
    PoseSE3,
    perturb_pose,
    quat_mul,
    quat_to_rotmat,
    quats_to_rotmats,
    rotmat_to_quat,
    se3_exp,
    se3_log,
)

unit_floats = st.floats(-1.0, 1.0, allow_nan=False)


@given(st.tuples(unit_floats, unit_floats, unit_floats, unit_floats))
@settings(max_examples=60, deadline=None)
def test_quat_to_rotmat_matches_scipy(q):
    q = np.asarray(q)
    if np.linalg.norm(q) < 1e-3:
        return
    ours = quat_to_rotmat(q)
    theirs = Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
    np.testing.assert_allclose(ours, theirs, atol=1e-12)


def test_quat_roundtrip(rng):
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q2 = rotmat_to_quat(quat_to_rotmat(q))
        # same rotation up to sign
        assert min(np.abs(q - q2).max(), np.abs(q + q2).max()) < 1e-9


def test_quats_to_rotmats_vectorized(rng):
    qs = rng.normal(size=(20, 4))
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    batch = quats_to_rotmats(qs)
    for i, q in enumerate(qs):
        np.testing.assert_allclose(batch[i], quat_to_rotmat(q), atol=1e-13)


def test_quat_mul_matches_scipy(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    ours = quat_to_rotmat(quat_mul(a, b))
    theirs = (Rotation.from_quat(a) * Rotation.from_quat(b)).as_matrix()
    np.testing.assert_allclose(ours, theirs, atol=1e-12)


def test_pose_validation_rejects_garbage():
    with pytest.raises(ValueError):
        PoseSE3(np.ones((3, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        PoseSE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_compose_inverse(rng):
    for _ in range(20):
        T1 = se3_exp(rng.normal(scale=0.5, size=6))
        T2 = se3_exp(rng.normal(scale=0.5, size=6))
        M = T1.compose(T2).matrix()
        np.testing.assert_allclose(M, T1.matrix() @ T2.matrix(), atol=1e-12)
        I = T1.compose(T1.inverse()).matrix()
        np.testing.assert_allclose(I, np.eye(4), atol=1e-12)


def test_se3_exp_log_roundtrip(rng):
    for _ in range(30):
        d = rng.normal(scale=0.8, size=6)
        np.testing.assert_allclose(se3_log(se3_exp(d)), d, atol=1e-9)


def test_perturb_pose_is_left_multiplicative(rng):
    T = se3_exp(rng.normal(scale=0.3, size=6))
    d = rng.normal(scale=0.1, size=6)
    expected = se3_exp(d).matrix() @ T.matrix()
    np.testing.assert_allclose(perturb_pose(T, d).matrix(), expected, atol=1e-12)


def test_world_to_camera_inverts_apply(rng):
    T = se3_exp(rng.normal(scale=0.4, size=6))
    pts = rng.normal(size=(10, 3))
    W, t = T.world_to_camera()
    back = T.apply(pts @ W.T + t)
    np.testing.assert_allclose(back, pts, atol=1e-12)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=1, cx=5, cy=5, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=20, cy=5, width=10, height=10)


def test_project_backproject_roundtrip(rng, cam64):
    u = rng.uniform(0, 63, 40)
    v = rng.uniform(0, 63, 40)
    d = rng.uniform(0.5, 5.0, 40)
    pts = cam64.backproject_pixels(u, v, d)
    uv = cam64.project(pts)
    np.testing.assert_allclose(uv[:, 0], u, atol=1e-9)
    np.testing.assert_allclose(uv[:, 1], v, atol=1e-9)
    np.testing.assert_allclose(pts[:, 2], d, atol=1e-12)
