import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereo_vo.geometry import (GeometryError, PROJ_BEHIND, PROJ_OK,
                                PROJ_OUT_OF_IMAGE, PinholeIntrinsics, Se3,
                                StereoRig, backproject, project, project_batch,
                                rotation_angle, se3_exp, se3_log, so3_exp)

INTR = PinholeIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_twists(n, scale_t=2.0, scale_r=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([rng.uniform(-scale_t, scale_t, (n, 3)),
                           rng.uniform(-scale_r, scale_r, (n, 3))], axis=1)


def rodrigues_reference(axis_angle):
    """Independent Rodrigues-formula oracle."""
    theta = np.linalg.norm(axis_angle)
    if theta == 0:
        return np.eye(3)
    k = np.asarray(axis_angle) / theta
    km = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * km + (1 - math.cos(theta)) * (km @ km)


class TestSe3Exp:
    def test_zero_twist_is_identity(self):
        t = se3_exp(np.zeros(6))
        assert np.allclose(t.rotation, np.eye(3))
        assert np.allclose(t.translation, 0.0)

    def test_quarter_turn_about_z(self):
        t = se3_exp(np.array([0, 0, 0, 0, 0, math.pi / 2]))
        expected = rodrigues_reference([0, 0, math.pi / 2])
        assert np.allclose(t.rotation, expected, atol=1e-12)
        assert np.allclose(t.translation, 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_rotation_matches_rodrigues(self, seed):
        rng = np.random.default_rng(seed)
        omega = rng.uniform(-2, 2, 3)
        t = se3_exp(np.concatenate([np.zeros(3), omega]))
        assert np.allclose(t.rotation, rodrigues_reference(omega), atol=1e-12)

    def test_exp_log_round_trip_100_random(self):
        for tw in random_twists(100):
            t = se3_exp(tw)
            assert np.allclose(se3_log(t), tw, atol=1e-10)

    def test_small_angle_branch(self):
        tw = np.array([0.3, -0.2, 0.1, 1e-10, -2e-10, 5e-11])
        t = se3_exp(tw)
        assert np.allclose(se3_log(t), tw, atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(GeometryError):
            se3_exp(np.array([np.nan, 0, 0, 0, 0, 0]))


class TestSe3Log:
    def test_identity_gives_zero(self):
        assert np.allclose(se3_log(Se3.identity()), 0.0)

    def test_quarter_turn_recovers_omega(self):
        t = Se3(rodrigues_reference([0, 0, math.pi / 2]), np.zeros(3))
        tw = se3_log(t)
        assert np.allclose(tw[3:], [0, 0, math.pi / 2], atol=1e-12)

    def test_translation_only(self):
        t = Se3(np.eye(3), np.array([1.0, -2.0, 3.0]))
        tw = se3_log(t)
        assert np.allclose(tw[:3], [1.0, -2.0, 3.0])
        assert np.allclose(tw[3:], 0.0)

    def test_angle_near_pi_rejected(self):
        t = Se3(rodrigues_reference([0, 0, math.pi - 1e-9]), np.zeros(3))
        with pytest.raises(GeometryError):
            se3_log(t)


class TestGroupLaws:
    def test_rotation_orthonormality(self):
        for tw in random_twists(100, seed=1):
            t = se3_exp(tw)
            assert np.allclose(t.rotation.T @ t.rotation, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-9

    def test_compose_inverse_is_identity(self):
        for tw in random_twists(100, seed=2):
            t = se3_exp(tw)
            r = t @ t.inverse()
            assert np.allclose(r.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(r.translation, 0.0, atol=1e-9)

    def test_associativity(self):
        tws = random_twists(300, seed=3)
        for i in range(0, 300, 3):
            a, b, c = (se3_exp(tws[i + k]) for k in range(3))
            left = (a @ b) @ c
            right = a @ (b @ c)
            assert np.allclose(left.matrix(), right.matrix(), atol=1e-9)

    def test_inverse_of_product(self):
        tws = random_twists(200, seed=4)
        for i in range(0, 200, 2):
            a, b = se3_exp(tws[i]), se3_exp(tws[i + 1])
            lhs = (a @ b).inverse()
            rhs = b.inverse() @ a.inverse()
            assert np.allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_apply_matches_matrix(self, seed):
        rng = np.random.default_rng(seed)
        t = se3_exp(rng.uniform(-1, 1, 6))
        p = rng.uniform(-5, 5, 3)
        hom = t.matrix() @ np.append(p, 1.0)
        assert np.allclose(t.apply(p), hom[:3], atol=1e-12)


class TestProjection:
    def test_identity_projects_to_itself(self):
        for uv in ([100.0, 200.0], [320.0, 240.0], [50.5, 400.25]):
            p, status = project(np.array(uv), 0.37, Se3.identity(), INTR)
            assert status == PROJ_OK
            assert np.allclose(p, uv, atol=1e-12)

    def test_hand_derived_lateral_shift(self):
        # camera moved +0.1 m along x: points shift by -0.1 in camera coords
        t = Se3(np.eye(3), np.array([-0.1, 0.0, 0.0]))
        p, status = project(np.array([INTR.cx, INTR.cy]), 0.5, t, INTR)
        assert status == PROJ_OK
        assert np.allclose(p, [INTR.cx - 25.0, INTR.cy], atol=1e-12)

    def test_behind_camera_flagged(self):
        t = Se3(np.eye(3), np.array([0.0, 0.0, -3.0]))
        _, status = project(np.array([INTR.cx, INTR.cy]), 1.0, t, INTR)
        assert status == PROJ_BEHIND

    def test_out_of_image_flagged(self):
        t = Se3(np.eye(3), np.array([5.0, 0.0, 0.0]))
        _, status = project(np.array([INTR.cx, INTR.cy]), 1.0, t, INTR)
        assert status == PROJ_OUT_OF_IMAGE

    def test_batch_agrees_with_scalar(self):
        rng = np.random.default_rng(5)
        uv = rng.uniform(50, 500, (50, 2))
        d = rng.uniform(0.05, 1.0, 50)
        t = se3_exp(np.array([0.1, -0.05, 0.2, 0.01, -0.02, 0.015]))
        uv_b, _, ok = project_batch(uv, d, t, INTR)
        for i in range(50):
            p, status = project(uv[i], d[i], t, INTR)
            assert ok[i] == (status == PROJ_OK)
            if ok[i]:
                assert np.allclose(uv_b[i], p, atol=1e-12)


class TestBackprojection:
    def test_principal_point_unit_depth(self):
        x = backproject(np.array([INTR.cx, INTR.cy]), 1.0, INTR)
        assert np.allclose(x, [0.0, 0.0, 1.0])

    def test_hand_derived_offset(self):
        x = backproject(np.array([INTR.cx + INTR.fx, INTR.cy]), 2.0, INTR)
        assert np.allclose(x, [0.5, 0.0, 0.5])

    def test_round_trip_1000_random(self):
        rng = np.random.default_rng(6)
        uv = rng.uniform(3, 600, (1000, 2))
        uv[:, 1] = np.clip(uv[:, 1], 3, 450)
        d = rng.uniform(0.02, 2.0, 1000)
        back = np.array([backproject(uv[i], d[i], INTR) for i in range(1000)])
        proj, _, ok = project_batch(uv, d, Se3.identity(), INTR)
        assert np.all(ok)
        assert np.allclose(proj, uv, atol=1e-9)

    def test_nonpositive_inverse_depth_rejected(self):
        with pytest.raises(GeometryError):
            backproject(np.array([100.0, 100.0]), 0.0, INTR)


class TestStereoRig:
    def test_translation_only_affects_x(self):
        rig = StereoRig(0.54)
        p = np.array([1.0, 2.0, 3.0])
        q = rig.left_to_right().apply(p)
        assert np.allclose(q, [1.0 - 0.54, 2.0, 3.0])

    def test_disparity_identity(self):
        rig = StereoRig(0.5)
        rng = np.random.default_rng(7)
        for _ in range(100):
            uv = np.array([rng.uniform(200, 600), rng.uniform(50, 430)])
            d = rng.uniform(0.02, 0.5)
            p, status = project(uv, d, rig.left_to_right(), INTR)
            assert status == PROJ_OK
            expected = uv - np.array([INTR.fx * rig.baseline * d, 0.0])
            assert np.allclose(p, expected, atol=1e-10)

    def test_positive_baseline_required(self):
        with pytest.raises(GeometryError):
            StereoRig(-0.1)


class TestIntrinsics:
    def test_validation(self):
        with pytest.raises(GeometryError):
            PinholeIntrinsics(fx=-1, fy=1, cx=10, cy=10, width=100, height=100)
        with pytest.raises(GeometryError):
            PinholeIntrinsics(fx=10, fy=10, cx=200, cy=10, width=100, height=100)

    def test_scaling_preserves_rays(self):
        s = INTR.scaled(2)
        # the normalized ray of corresponding pixel positions is unchanged
        x0 = (100.0 - INTR.cx) / INTR.fx
        x2 = (((100.0 + 0.5) / 4 - 0.5) - s.cx) / s.fx
        assert abs(x0 - x2) < 1e-12


def test_rotation_angle():
    assert rotation_angle(np.eye(3)) == 0.0
    r = so3_exp(np.array([0.0, 0.3, 0.0]))
    assert abs(rotation_angle(r) - 0.3) < 1e-12
