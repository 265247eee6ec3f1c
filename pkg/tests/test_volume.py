import math

import numpy as np
import pytest

from modsynth.errors import DimensionMismatchError, ParameterError
from modsynth.volume import (
    Grid,
    PreprocessParams,
    Volume,
    gaussian_kernel_1d,
    gaussian_smooth,
    percentile,
    percentile_clip,
    preprocess,
    rescale_intensity,
    sample_points,
    sample_trilinear,
)

from conftest import dense_gaussian_oracle, random_volume, trilinear_oracle


def vol_from_values(values, dims, spacing=(1.0, 1.0, 1.0)):
    return Volume.from_flat(np.asarray(values, dtype=float), Grid(dims, spacing))


class TestGridVolume:
    def test_grid_validation(self):
        with pytest.raises(ParameterError):
            Grid((0, 4, 4), (1, 1, 1))
        with pytest.raises(ParameterError):
            Grid((4, 4, 4), (1, -1, 1))
        with pytest.raises(ParameterError):
            Grid((4, 4, 4), (1, 1, 0))
        with pytest.raises(ParameterError):
            Grid((4, 4, 4), (1, 1, 1), (0, float("nan"), 0))

    def test_volume_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            Volume(np.zeros((2, 2, 2)), Grid((2, 2, 3), (1, 1, 1)))

    def test_volume_rejects_nonfinite(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ParameterError):
            Volume(data, Grid((2, 2, 2), (1, 1, 1)))

    def test_flat_roundtrip_is_x_fastest(self):
        flat = np.arange(24.0)
        v = Volume.from_flat(flat, Grid((2, 3, 4), (1, 1, 1)))
        # index (1,0,0) is the second flat element; (0,1,0) comes after a full x run
        assert v.data[1, 0, 0] == 1.0
        assert v.data[0, 1, 0] == 2.0
        assert v.data[0, 0, 1] == 6.0
        np.testing.assert_array_equal(v.to_flat(), flat)

    def test_extent(self):
        g = Grid((512, 512, 42), (0.43, 0.43, 5.0))
        assert g.dims == (512, 512, 42)
        assert g.spacing == (0.43, 0.43, 5.0)
        np.testing.assert_allclose(g.extent_um, (511 * 0.43, 511 * 0.43, 41 * 5.0))

    def test_world_points_order(self):
        g = Grid((2, 2, 2), (2.0, 3.0, 4.0), (10.0, 20.0, 30.0))
        pts = g.world_points()
        np.testing.assert_array_equal(pts[0], [10, 20, 30])
        np.testing.assert_array_equal(pts[1], [12, 20, 30])  # x moves first
        np.testing.assert_array_equal(pts[2], [10, 23, 30])
        np.testing.assert_array_equal(pts[4], [10, 20, 34])


class TestPercentile:
    def test_one_to_hundred_q99(self):
        v = vol_from_values(np.arange(1, 101), (100, 1, 1))
        assert percentile(v, 99) == 99.0

    def test_constant(self):
        v = vol_from_values(np.full(60, 7.25), (60, 1, 1))
        for q in (0, 1, 50, 99, 100):
            assert percentile(v, q) == 7.25

    def test_single_element(self):
        v = vol_from_values([5.0], (1, 1, 1))
        assert percentile(v, 50) == 5.0

    def test_q_zero_is_minimum(self):
        v = vol_from_values([3.0, 9.0, -1.0, 4.0], (4, 1, 1))
        assert percentile(v, 0) == -1.0

    def test_matches_sort_oracle(self, rng):
        data = rng.normal(size=500)
        v = vol_from_values(data, (500, 1, 1))
        s = np.sort(data)
        for q in (0.5, 10, 25, 50, 75, 99, 100):
            rank = min(max(math.ceil(q / 100 * 500) - 1, 0), 499)
            assert percentile(v, q) == s[rank]


class TestPercentileClip:
    def test_clips_top_values(self):
        v = vol_from_values(np.arange(1, 101), (100, 1, 1))
        out = percentile_clip(v, 99)
        flat = out.to_flat()
        assert flat[98] == 99.0 and flat[99] == 99.0
        np.testing.assert_array_equal(flat[:98], np.arange(1, 99))

    def test_constant_unchanged(self):
        v = vol_from_values(np.full(27, 3.0), (3, 3, 3))
        np.testing.assert_array_equal(percentile_clip(v, 50).data, v.data)

    def test_q100_unchanged(self, rng):
        v = random_volume(rng)
        np.testing.assert_array_equal(percentile_clip(v, 100).data, v.data)

    def test_idempotent(self, rng):
        v = random_volume(rng)
        once = percentile_clip(v, 90)
        np.testing.assert_array_equal(percentile_clip(once, 90).data, once.data)


class TestGaussianSmooth:
    def test_constant_preserved(self):
        v = vol_from_values(np.full(9 * 9 * 5, 42.0), (9, 9, 5), (0.43, 0.43, 5.0))
        out = gaussian_smooth(v, (1.5, 1.5, 1.5))
        np.testing.assert_allclose(out.data, 42.0, rtol=0, atol=1e-12)

    def test_zero_sigma_identity(self, rng):
        v = random_volume(rng)
        np.testing.assert_array_equal(gaussian_smooth(v, (0, 0, 0)).data, v.data)

    def test_negative_sigma_rejected(self, rng):
        with pytest.raises(ParameterError):
            gaussian_smooth(random_volume(rng), (1, -1, 1))

    def test_subject_spacing_kernel_radii(self):
        # sigma 1.5 um at spacing (0.43, 0.43, 5.0) -> voxel sigmas
        # (3.488..., 3.488..., 0.3); z radius = ceil(0.9) = 1
        sz = 1.5 / 5.0
        assert gaussian_kernel_1d(sz).size == 3
        sx = 1.5 / 0.43
        assert gaussian_kernel_1d(sx).size == 2 * math.ceil(3 * sx) + 1

    def test_impulse_matches_dense_oracle(self, rng):
        data = np.zeros((9, 9, 5))
        data[4, 4, 2] = 1.0
        v = Volume(data, Grid((9, 9, 5), (0.43, 0.43, 5.0)))
        out = gaussian_smooth(v, (1.5, 1.5, 1.5))
        expect = dense_gaussian_oracle(data, (1.5 / 0.43, 1.5 / 0.43, 1.5 / 5.0))
        np.testing.assert_allclose(out.data, expect, rtol=0, atol=1e-13)

    def test_random_matches_dense_oracle(self, rng):
        v = random_volume(rng, dims=(7, 6, 5), spacing=(1.0, 2.0, 0.5))
        out = gaussian_smooth(v, (1.2, 1.2, 1.2))
        expect = dense_gaussian_oracle(v.data, (1.2, 0.6, 2.4))
        np.testing.assert_allclose(out.data, expect, rtol=1e-12, atol=1e-10)

    def test_center_impulse_response_2d(self):
        data = np.zeros((21, 21, 1))
        data[10, 10, 0] = 1.0
        v = Volume(data, Grid((21, 21, 1), (1, 1, 1)))
        out = gaussian_smooth(v, (2.0, 2.0, 0.0))
        k = gaussian_kernel_1d(2.0)
        center = k[k.size // 2]
        assert out.data[10, 10, 0] == pytest.approx(center * center, rel=1e-12)

    def test_range_bounded(self, rng):
        v = random_volume(rng, dims=(10, 10, 6))
        out = gaussian_smooth(v, (2.0, 2.0, 2.0))
        assert out.data.min() >= v.data.min() - 1e-12
        assert out.data.max() <= v.data.max() + 1e-12


class TestRescale:
    def test_three_values(self):
        v = vol_from_values([0.0, 50.0, 100.0], (3, 1, 1))
        np.testing.assert_array_equal(
            rescale_intensity(v, 0, 255).to_flat(), [0.0, 127.5, 255.0]
        )

    def test_constant_goes_to_lo(self):
        v = vol_from_values(np.full(8, 9.0), (2, 2, 2))
        np.testing.assert_array_equal(rescale_intensity(v, 0, 255).data, 0.0)

    def test_already_spanning_unchanged(self):
        v = vol_from_values([0.0, 64.0, 255.0], (3, 1, 1))
        np.testing.assert_array_equal(rescale_intensity(v, 0, 255).to_flat(), v.to_flat())

    def test_endpoints_exact(self, rng):
        v = random_volume(rng, lo=-17.3, hi=512.9)
        out = rescale_intensity(v, 0, 255)
        assert out.data.min() == 0.0
        assert out.data.max() == 255.0

    def test_bad_range_rejected(self, rng):
        with pytest.raises(ParameterError):
            rescale_intensity(random_volume(rng), 255, 0)


class TestPreprocess:
    def test_output_range(self, rng):
        v = random_volume(rng, dims=(12, 12, 6), spacing=(0.43, 0.43, 5.0))
        out = preprocess(v, PreprocessParams())
        assert out.data.min() == 0.0
        assert out.data.max() == 255.0

    def test_deterministic(self, rng):
        v = random_volume(rng)
        a = preprocess(v, PreprocessParams())
        b = preprocess(v, PreprocessParams())
        np.testing.assert_array_equal(a.data, b.data)

    def test_equals_manual_composition(self, rng):
        v = random_volume(rng, dims=(9, 8, 7), spacing=(0.5, 1.0, 2.0))
        p = PreprocessParams(clip_percentile=95, smooth_sigma_um=(1.0, 1.0, 1.0),
                             out_range=(10.0, 20.0))
        manual = rescale_intensity(
            gaussian_smooth(percentile_clip(v, 95), (1.0, 1.0, 1.0)), 10.0, 20.0
        )
        np.testing.assert_array_equal(preprocess(v, p).data, manual.data)

    def test_param_validation(self):
        with pytest.raises(ParameterError):
            PreprocessParams(clip_percentile=0)
        with pytest.raises(ParameterError):
            PreprocessParams(smooth_sigma_um=(-1, 1, 1))
        with pytest.raises(ParameterError):
            PreprocessParams(out_range=(5, 5))

    def test_geometry_unchanged(self, rng):
        v = random_volume(rng, dims=(6, 5, 4), spacing=(0.7, 1.3, 2.9),
                          origin=(1, 2, 3))
        assert preprocess(v, PreprocessParams()).grid == v.grid


class TestTrilinear:
    def test_lattice_points_exact(self, rng):
        v = random_volume(rng, dims=(5, 6, 4), spacing=(0.43, 0.43, 5.0),
                          origin=(3.0, -2.0, 7.0))
        for i, j, k in [(0, 0, 0), (4, 5, 3), (2, 3, 1)]:
            p = (3.0 + i * 0.43, -2.0 + j * 0.43, 7.0 + k * 5.0)
            assert sample_trilinear(v, p) == v.data[i, j, k]

    def test_all_lattice_points_exact(self, rng):
        v = random_volume(rng, dims=(4, 4, 3), spacing=(1.1, 0.9, 2.7))
        vals, inside = sample_points(v, v.grid.world_points())
        np.testing.assert_array_equal(vals, v.to_flat())
        assert inside.all()

    def test_midpoint(self):
        data = np.zeros((2, 1, 1))
        data[0], data[1] = 10.0, 20.0
        v = Volume(data, Grid((2, 1, 1), (2.0, 1.0, 1.0)))
        assert sample_trilinear(v, (1.0, 0.0, 0.0)) == 15.0

    def test_outside_is_zero(self, rng):
        v = random_volume(rng, lo=5.0, hi=10.0)
        assert sample_trilinear(v, (-0.001, 0, 0)) == 0.0
        assert sample_trilinear(v, (1e9, 1e9, 1e9)) == 0.0
        _, inside = sample_points(v, np.array([[-0.001, 0.0, 0.0]]))
        assert not inside[0]

    def test_matches_oracle_random_points(self, rng):
        v = random_volume(rng, dims=(6, 5, 4), spacing=(0.8, 1.2, 3.0),
                          origin=(-1.0, 0.5, 2.0))
        pts = rng.uniform(-3, 14, size=(200, 3))
        vals, _ = sample_points(v, pts)
        expect = [trilinear_oracle(v, p) for p in pts]
        np.testing.assert_allclose(vals, expect, rtol=0, atol=1e-10)
