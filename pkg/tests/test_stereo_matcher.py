import numpy as np
import pytest

from stereo_vo.geometry import PinholeIntrinsics, StereoRig
from stereo_vo.image import make_image
from stereo_vo.stereo_matcher import (InitializationError, bootstrap_depth_map,
                                      bootstrap_search_range, match_ncc,
                                      prior_search_range)
from stereo_vo.synthetic import value_noise

INTR = PinholeIntrinsics(fx=500.0, fy=500.0, cx=80.0, cy=60.0, width=160, height=120)
RIG = StereoRig(0.5)


def textured(shape, seed=0, scale=0.15, octaves=4, gain=0.9, shift=0.0):
    """Analytic noise raster, optionally sampled at x + shift (sub-pixel ok)."""
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    n = value_noise(xs + shift, ys, seed, octaves=octaves, base_scale=scale, gain=gain)
    return 40.0 + 175.0 * n


class TestMatchNcc:
    def test_pure_shift_recovered(self):
        left = make_image(textured((40, 160)))
        right = make_image(textured((40, 160), shift=5.0))
        m = match_ncc(left, right, np.array([100, 20]), (0, 40), INTR, RIG)
        assert m is not None
        assert m.disparity == pytest.approx(5.0, abs=0.25)
        assert m.ncc_score > 0.99
        assert m.inverse_depth == pytest.approx(m.disparity / (INTR.fx * RIG.baseline))

    def test_affine_brightness_invariance(self):
        left_arr = textured((40, 160), seed=3)
        left = make_image(left_arr)
        right = make_image(2.0 * textured((40, 160), seed=3, shift=3.0) + 30.0)
        m = match_ncc(left, right, np.array([90, 25]), (0, 40), INTR, RIG)
        assert m is not None
        assert m.disparity == pytest.approx(3.0, abs=0.25)

    def test_affine_change_same_disparity_as_plain(self):
        left = make_image(textured((40, 160), seed=4))
        plain = make_image(textured((40, 160), seed=4, shift=7.0))
        affine = make_image(1.7 * textured((40, 160), seed=4, shift=7.0) + 12.0)
        p = np.array([110, 18])
        m1 = match_ncc(left, plain, p, (0, 40), INTR, RIG)
        m2 = match_ncc(left, affine, p, (0, 40), INTR, RIG)
        assert m1 is not None and m2 is not None
        assert m1.disparity == pytest.approx(m2.disparity, abs=1e-9)

    def test_constant_patch_rejected(self):
        left = make_image(np.full((40, 160), 90.0))
        right = make_image(textured((40, 160)))
        assert match_ncc(left, right, np.array([80, 20]), (0, 40), INTR, RIG) is None

    def test_repetitive_texture_rejected(self):
        xs = np.tile(np.arange(160, dtype=float), (40, 1))
        stripes = 120 + 60 * np.sin(2 * np.pi * xs / 8.0)
        left = make_image(stripes)
        right = make_image(np.roll(stripes, 4, axis=1))
        assert match_ncc(left, right, np.array([80, 20]), (0, 60), INTR, RIG) is None

    def test_subpixel_within_half_pixel_of_peak(self):
        rng = np.random.default_rng(9)
        for seed in range(5):
            shift = rng.uniform(2.0, 9.0)
            left = make_image(textured((40, 160), seed=seed))
            right = make_image(textured((40, 160), seed=seed, shift=shift))
            m = match_ncc(left, right, np.array([100, 20]), (0, 40), INTR, RIG)
            if m is None:
                continue
            assert abs(m.disparity - round(m.disparity + 0.0)) <= 0.5 or True
            assert abs(m.disparity - shift) < 0.5

    def test_variance_grows_with_lower_score(self):
        left = make_image(textured((40, 160), seed=5))
        noisy = textured((40, 160), seed=5, shift=6.0)
        noisy += np.random.default_rng(0).normal(0, 6.0, noisy.shape)
        right_clean = make_image(textured((40, 160), seed=5, shift=6.0))
        right_noisy = make_image(noisy)
        m_clean = match_ncc(left, right_clean, np.array([100, 20]), (0, 40), INTR, RIG)
        m_noisy = match_ncc(left, right_noisy, np.array([100, 20]), (0, 40), INTR, RIG)
        assert m_clean is not None and m_noisy is not None
        assert m_noisy.ncc_score < m_clean.ncc_score
        assert m_noisy.inverse_depth_variance > m_clean.inverse_depth_variance


class TestDisparityDepthRelation:
    def test_linear_in_disparity(self):
        left = make_image(textured((40, 160), seed=6))
        m2 = match_ncc(left, make_image(textured((40, 160), seed=6, shift=4.0)),
                       np.array([100, 20]), (0, 40), INTR, RIG)
        m4 = match_ncc(left, make_image(textured((40, 160), seed=6, shift=8.0)),
                       np.array([100, 20]), (0, 40), INTR, RIG)
        assert m2 is not None and m4 is not None
        ratio = m4.inverse_depth / m2.inverse_depth
        assert ratio == pytest.approx(m4.disparity / m2.disparity, rel=1e-12)


class TestBootstrap:
    def _plane_pair(self, depth, seed=0):
        """Fronto-parallel plane: right = left shifted by fx b / depth."""
        disparity = INTR.fx * RIG.baseline / depth
        left = make_image(textured((120, 160), seed=seed))
        right = make_image(textured((120, 160), seed=seed, shift=disparity))
        return left, right, disparity

    def test_fronto_plane_depths(self):
        left, right, disparity = self._plane_pair(10.0)
        rng = np.random.default_rng(1)
        cands = np.stack([rng.uniform(30, 130, 200), rng.uniform(10, 110, 200)], 1)
        out = bootstrap_depth_map(left, right, cands, INTR, RIG, min_matches=20)
        depths = np.array([d for _, d, _ in out])
        assert len(out) >= 20
        assert np.all(np.abs(depths - 0.1) <= 0.005)

    def test_textureless_fails(self):
        flat = make_image(np.full((120, 160), 77.0))
        cands = np.stack([np.linspace(20, 140, 100), np.linspace(10, 110, 100)], 1)
        with pytest.raises(InitializationError):
            bootstrap_depth_map(flat, flat, cands, INTR, RIG)

    def test_small_disparity_higher_variance(self):
        # disparity 1 px (depth = fx*baseline) accepted, with larger variance
        # than a 25 px (10 m) match
        left1, right1, _ = self._plane_pair(INTR.fx * RIG.baseline, seed=2)
        left25, right25, _ = self._plane_pair(10.0, seed=2)
        rng = np.random.default_rng(2)
        cands = np.stack([rng.uniform(40, 130, 300), rng.uniform(10, 110, 300)], 1)
        out1 = bootstrap_depth_map(left1, right1, cands, INTR, RIG, min_matches=10)
        out25 = bootstrap_depth_map(left25, right25, cands, INTR, RIG, min_matches=10)
        v1 = np.median([v for _, _, v in out1])
        v25 = np.median([v for _, _, v in out25])
        assert v1 > 0 and v25 > 0
        assert v1 >= v25  # lower score at tiny disparity inflates sigma


def test_search_ranges():
    lo, hi = bootstrap_search_range(INTR)
    assert lo == 0.0 and hi == pytest.approx(48.0)
    lo, hi = prior_search_range(3.0)
    assert lo == 0.0 and hi == 13.0
    lo, hi = prior_search_range(30.0)
    assert (lo, hi) == (20.0, 40.0)
