import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereo_vo.image import (ImageError, build_pyramid, gradient_weight,
                             make_image, sample_bilinear, sample_bilinear_batch)


class TestMakeImage:
    def test_gradients_central_difference(self):
        arr = np.arange(20, dtype=float).reshape(4, 5)
        img = make_image(arr)
        assert np.allclose(img.gx[:, 1:-1], 1.0)
        assert np.allclose(img.gy[1:-1, :], 5.0)

    def test_border_gradients_one_sided(self):
        arr = np.arange(20, dtype=float).reshape(4, 5)
        img = make_image(arr)
        assert np.allclose(img.gx[:, 0], 1.0)
        assert np.allclose(img.gx[:, -1], 1.0)
        assert np.allclose(img.gy[0, :], 5.0)
        assert np.allclose(img.gy[-1, :], 5.0)

    def test_too_small_rejected(self):
        with pytest.raises(ImageError):
            make_image(np.zeros((1, 5)))


class TestPyramid:
    def test_constant_image_stays_constant(self):
        img = make_image(np.full((32, 32), 100.0))
        pyr = build_pyramid(img, 4)
        for level in pyr.levels:
            assert np.allclose(level.intensities, 100.0)
            assert np.allclose(level.gx, 0.0)
            assert np.allclose(level.gy, 0.0)

    def test_4x4_means(self):
        arr = np.arange(16, dtype=float).reshape(4, 4)
        pyr = build_pyramid(make_image(arr), 2)
        # hand-computed means of each 2x2 quad
        expected = np.array([[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
                             [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]])
        assert np.allclose(pyr[1].intensities, expected)

    def test_single_level_is_input(self):
        arr = np.random.default_rng(0).uniform(0, 255, (8, 8))
        img = make_image(arr)
        pyr = build_pyramid(img, 1)
        assert len(pyr) == 1
        assert pyr[0] is img

    def test_dims_floor_halved(self):
        img = make_image(np.zeros((31, 45)))
        pyr = build_pyramid(img, 3)
        assert (pyr[1].height, pyr[1].width) == (15, 22)
        assert (pyr[2].height, pyr[2].width) == (7, 11)

    def test_mass_conservation_even_dims(self):
        arr = np.random.default_rng(1).uniform(0, 255, (32, 48))
        pyr = build_pyramid(make_image(arr), 3)
        for lvl in range(1, 3):
            assert np.isclose(pyr[lvl].intensities.sum(),
                              pyr[lvl - 1].intensities.sum() / 4.0)

    def test_too_small_for_levels(self):
        with pytest.raises(ImageError):
            build_pyramid(make_image(np.zeros((8, 8))), 5)


class TestBilinear:
    def test_integer_coordinates_exact(self):
        arr = np.random.default_rng(2).uniform(0, 255, (10, 12))
        img = make_image(arr)
        for y in range(1, 8):
            for x in range(1, 10):
                i, gx, gy = sample_bilinear(img, float(x), float(y))
                assert i == arr[y, x]
                assert gx == img.gx[y, x]
                assert gy == img.gy[y, x]

    def test_midpoint_of_2x2(self):
        img = make_image(np.array([[0.0, 0.0], [10.0, 10.0]]))
        i, _, _ = sample_bilinear(img, 0.5, 0.5)
        assert i == pytest.approx(5.0)

    def test_linear_ramp_gradient(self):
        x = np.arange(16, dtype=float)
        img = make_image(np.tile(3.0 * x, (8, 1)))
        for xs in np.linspace(1.0, 13.9, 20):
            i, gx, gy = sample_bilinear(img, xs, 3.3)
            assert gx == pytest.approx(3.0, abs=1e-12)
            assert gy == pytest.approx(0.0, abs=1e-12)
            assert i == pytest.approx(3.0 * xs, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 100),
           st.floats(0.0, 13.9), st.floats(0.0, 8.9))
    def test_exact_on_affine_images(self, alpha, beta, gamma, x, y):
        xs, ys = np.meshgrid(np.arange(15, dtype=float), np.arange(10, dtype=float))
        img = make_image(alpha * xs + beta * ys + gamma)
        i, _, _ = sample_bilinear(img, x, y)
        assert i == pytest.approx(alpha * x + beta * y + gamma, abs=1e-9 * (1 + abs(i)))

    def test_out_of_range_raises(self):
        img = make_image(np.zeros((5, 5)))
        with pytest.raises(ImageError):
            sample_bilinear(img, 4.0, 2.0)
        with pytest.raises(ImageError):
            sample_bilinear(img, -0.1, 2.0)

    def test_batch_masks_instead_of_raising(self):
        img = make_image(np.random.default_rng(3).uniform(0, 255, (6, 6)))
        xy = np.array([[2.5, 2.5], [5.5, 2.0], [-1.0, 1.0]])
        vals, gx, gy, ok = sample_bilinear_batch(img, xy)
        assert ok.tolist() == [True, False, False]
        i, gxs, gys = sample_bilinear(img, 2.5, 2.5)
        assert vals[0] == pytest.approx(i)
        assert gx[0] == pytest.approx(gxs)
        assert gy[0] == pytest.approx(gys)


class TestGradientWeight:
    def test_zero_gradient_weight_one(self):
        assert gradient_weight(0.0, 0.0, 50.0) == 1.0

    def test_norm_equal_c_gives_half(self):
        assert gradient_weight(50.0, 0.0, 50.0) == pytest.approx(0.5)
        assert gradient_weight(30.0, 40.0, 50.0) == pytest.approx(0.5)

    def test_monotone_decreasing(self):
        mags = np.linspace(0, 200, 50)
        w = gradient_weight(mags, 0.0, 50.0)
        assert np.all(np.diff(w) < 0)

    def test_nonpositive_constant_rejected(self):
        with pytest.raises(ImageError):
            gradient_weight(1.0, 1.0, 0.0)
