from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from lowoverlap.errors import BehindCamera, InvalidPose, NonPositiveDepth
from lowoverlap.geometry import (
    CameraIntrinsics,
    CameraPose,
    backproject,
    camera_to_world,
    nadir_rotation,
    pixel_rays,
    project,
    project_points,
    tie_point_depth,
    world_to_camera,
)

FLIP_X = np.diag([1.0, -1.0, -1.0])
K_BIG = CameraIntrinsics(1000.0, 1000.0, 3000.0, 2000.0, 6000, 4000)

finite = st.floats(-1e3, 1e3, allow_nan=False)
quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)


def pose_from(q, t):
    return CameraPose(Rotation.from_quat(q).as_matrix(), np.asarray(t, dtype=float))


class TestIntrinsics:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 5.0, 1.0, 4, 4)
        with pytest.raises(ValueError):
            CameraIntrinsics(1.0, 1.0, 1.0, 1.0, 0, 4)

    def test_in_bounds_uses_pixel_centers(self):
        k = CameraIntrinsics(10.0, 10.0, 2.0, 1.5, 5, 4)
        uv = np.array([[0, 0], [4, 3], [4.0001, 0], [-1e-9, 0], [2, 3.5]])
        assert k.in_bounds(uv).tolist() == [True, True, False, False, False]

    def test_scaled_keeps_corner_alignment(self):
        k = CameraIntrinsics(100.0, 100.0, 49.5, 29.5, 100, 60)
        half = k.scaled(50, 30)
        # pixel (99, 59) maps to (49, 29)
        assert half.fx == pytest.approx(100.0 * 49 / 99)
        assert half.cx == pytest.approx(49.5 * 49 / 99)


class TestPose:
    def test_rejects_non_rotation(self):
        with pytest.raises(InvalidPose):
            CameraPose(np.diag([1.0, 1.0, 1.0 + 1e-5]), np.zeros(3))
        with pytest.raises(InvalidPose):
            CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_accepts_small_rounding(self):
        CameraPose(np.eye(3) + 1e-9, np.zeros(3))

    def test_quaternion_round_trip(self):
        q = np.array([0.3, -0.2, 0.9, 0.1])
        q /= np.linalg.norm(q)
        pose = CameraPose.from_quaternion(q, [1.0, 2.0, 3.0])
        assert np.allclose(pose.quaternion, q, atol=1e-12)
        assert np.allclose(CameraPose.from_quaternion(-q, [1, 2, 3]).rotation, pose.rotation)

    def test_center_and_axis(self):
        pose = CameraPose.from_center(FLIP_X, [10.0, 20.0, 200.0])
        assert np.allclose(pose.center, [10, 20, 200])
        assert np.allclose(pose.optical_axis, [0, 0, -1])

    def test_nadir_rotation_looks_down(self):
        for yaw in (0.0, 37.0, 180.0):
            r = nadir_rotation(yaw)
            assert np.allclose(r.T @ [0, 0, 1], [0, 0, -1])
            assert np.linalg.det(r) == pytest.approx(1.0)


class TestTransforms:
    def test_identity_cases(self):
        ident = CameraPose.identity()
        assert np.allclose(world_to_camera(ident, [3, -1, 50]), [3, -1, 50])
        shifted = CameraPose(np.eye(3), [0, 0, -10])
        assert np.allclose(world_to_camera(shifted, [0, 0, 210]), [0, 0, 200])
        assert np.allclose(camera_to_world(ident, [1, 2, 3]), [1, 2, 3])

    def test_flip_about_x(self):
        pose = CameraPose(FLIP_X, [0, 0, 200])
        assert np.allclose(world_to_camera(pose, [5, 2, 0]), [5, -2, 200])
        assert np.allclose(camera_to_world(pose, [5, -2, 200]), [5, 2, 0])
        assert tie_point_depth(pose, [5, 2, 0]) == pytest.approx(200.0)

    def test_nadir_depth_below(self):
        pose = CameraPose.from_center(nadir_rotation(12.0), [40, -7, 200])
        assert tie_point_depth(pose, [40, -7, 0]) == pytest.approx(200.0)

    @given(quats, st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
    def test_round_trip(self, q, t, p):
        pose = pose_from(q, t)
        back = camera_to_world(pose, world_to_camera(pose, p))
        assert np.allclose(back, p, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(p).max(), np.abs(t).max()))

    def test_round_trip_many(self, rng):
        r = Rotation.random(1000, random_state=1).as_matrix()
        t = rng.uniform(-500, 500, (1000, 3))
        p = rng.uniform(-500, 500, (1000, 3))
        worst = 0.0
        for i in range(1000):
            pose = CameraPose(r[i], t[i])
            back = camera_to_world(pose, world_to_camera(pose, p[i]))
            worst = max(worst, np.abs(back - p[i]).max() / np.abs(p[i]).max())
        assert worst < 1e-9


class TestProjection:
    def test_principal_point(self):
        for z in (0.5, 10.0, 1e4):
            assert np.allclose(project(K_BIG, [0, 0, z]), [3000, 2000])

    def test_hand_example(self):
        assert np.allclose(project(K_BIG, [10, -5, 200]), [3050, 1975])
        assert np.allclose(backproject(K_BIG, [3050, 1975], 200), [10, -5, 200])
        assert np.allclose(backproject(K_BIG, [3000, 2000], 100), [0, 0, 100])

    def test_behind_camera(self):
        with pytest.raises(BehindCamera):
            project(K_BIG, [0, 0, 0])
        with pytest.raises(BehindCamera):
            project(K_BIG, [[1, 1, 5], [0, 0, -1]])

    def test_project_points_flags_instead_of_raising(self):
        uv, front = project_points(K_BIG, [[0, 0, 5], [0, 0, -5]])
        assert front.tolist() == [True, False]
        assert np.isnan(uv[1]).all()

    def test_nonpositive_depth(self):
        with pytest.raises(NonPositiveDepth):
            backproject(K_BIG, [1, 1], -1.0)
        with pytest.raises(NonPositiveDepth):
            backproject(K_BIG, [1, 1], 0.0)

    @given(
        st.floats(50, 5000), st.floats(50, 5000),
        st.integers(2, 8000), st.integers(2, 6000),
        st.floats(0.01, 0.99), st.floats(0.01, 0.99),
        st.floats(0, 1), st.floats(0, 1), st.floats(1, 1000),
    )
    def test_backproject_round_trip(self, fx, fy, w, h, cxf, cyf, uf, vf, depth):
        k = CameraIntrinsics(fx, fy, cxf * w, cyf * h, w, h)
        px = np.array([uf * (w - 1), vf * (h - 1)])
        assert np.abs(project(k, backproject(k, px, depth)) - px).max() < 1e-9

    def test_pixel_rays_scale_by_camera_depth(self):
        k = CameraIntrinsics(400.0, 400.0, 159.5, 119.5, 320, 240)
        pose = CameraPose.from_center(nadir_rotation(30.0), [1, 2, 200])
        px = np.array([[0.0, 0.0], [319, 239], [100.25, 7.5]])
        origin, dirs = pixel_rays(k, pose, px)
        assert np.allclose(origin, pose.center)
        cam = world_to_camera(pose, origin + 150.0 * dirs)
        assert np.allclose(cam[:, 2], 150.0)
        assert np.allclose(project(k, cam), px)
