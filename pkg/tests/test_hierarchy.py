import math

import numpy as np
import pytest
import torch

from masktok import maskdata
from masktok.hierarchy import (
    LevelSample,
    blur,
    blur_batch,
    draw_level,
    gaussian_kernel,
    gaussian_kernel_1d,
    level_weights,
    make_labels,
    make_labels_batch,
    sample_partial_levels,
    sigma_for_level,
)


class TestSchedule:
    @pytest.mark.parametrize("level,expected", [(1, 48.0), (4, 18.0), (31, 1.125)])
    def test_golden_values(self, level, expected):
        assert sigma_for_level(level) == expected

    def test_strictly_decreasing_and_positive(self):
        sigmas = [sigma_for_level(l) for l in range(1, 32)]
        assert all(s > 0 for s in sigmas)
        assert all(a > b for a, b in zip(sigmas, sigmas[1:]))

    @pytest.mark.parametrize("level", [0, 32, -3])
    def test_out_of_range_rejected(self, level):
        with pytest.raises(ValueError):
            sigma_for_level(level)


class TestKernel:
    @pytest.mark.parametrize("sigma", [0.5, 1.125, 3.0, 18.0, 48.0])
    def test_sums_to_one(self, sigma):
        assert abs(gaussian_kernel(sigma).sum() - 1.0) < 1e-12

    def test_symmetry_under_flips(self):
        k = gaussian_kernel(2.5)
        assert np.array_equal(k, k[::-1, :])
        assert np.array_equal(k, k[:, ::-1])
        assert np.array_equal(k, k.T)

    def test_profile_matches_density(self):
        sigma = 1.125
        k = gaussian_kernel(sigma)
        radius = k.shape[0] // 2
        assert k[radius, radius] == k.max()
        # off-center ratios must follow exp(-r^2 / 2 sigma^2) after normalization
        for dy, dx in [(0, 1), (1, 1), (2, 0), (radius, radius)]:
            expected = math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
            assert k[radius + dy, radius + dx] / k[radius, radius] == pytest.approx(
                expected, abs=1e-12
            )

    def test_window_side_rule(self):
        sigma = 18.0
        assert gaussian_kernel_1d(sigma).size == 2 * math.ceil(3 * sigma) + 1

    def test_window_clipped_to_image(self):
        assert gaussian_kernel_1d(48.0, max_side=256).size == 255
        assert gaussian_kernel_1d(48.0, max_side=255).size == 255

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            gaussian_kernel_1d(0.0)


class TestLevelSampling:
    def test_normalization_constant(self):
        z = level_weights(32).sum()
        assert z == pytest.approx(sum(1.0 / (l + 8) for l in range(1, 32)))
        assert z == pytest.approx(1.5357, abs=5e-5)

    def test_sample_is_three_distinct_in_range(self, rng):
        for _ in range(200):
            sample = sample_partial_levels(rng)
            assert len(sample.partial_levels) == 3
            assert len(set(sample.partial_levels)) == 3
            assert all(1 <= l <= 31 for l in sample.partial_levels)
            assert sample.includes_full
            assert sample.all_levels[-1] == 32

    def test_deterministic_given_seed(self):
        a = sample_partial_levels(np.random.default_rng(11))
        b = sample_partial_levels(np.random.default_rng(11))
        assert a == b

    def test_first_draw_frequency_matches_inverse_power_law(self):
        rng = np.random.default_rng(0)
        n = 20000
        weights = level_weights(32)
        probs = weights / weights.sum()
        draws = np.array([draw_level(rng) for _ in range(n)])
        freq1 = (draws == 1).mean()
        assert abs(freq1 - probs[0]) < 0.01

    def test_invalid_level_sample_rejected(self):
        with pytest.raises(ValueError):
            LevelSample(partial_levels=(1, 1, 2))
        with pytest.raises(ValueError):
            LevelSample(partial_levels=(0, 3, 5))
        with pytest.raises(ValueError):
            LevelSample(partial_levels=(1, 2, 32))


class TestLabels:
    def test_zero_mask_gives_zero_labels(self):
        labels = make_labels(np.zeros((64, 64)), LevelSample((2, 5, 9)))
        assert set(labels) == {2, 5, 9, 32}
        for grid in labels.values():
            assert (grid == 0.0).all()

    def test_ones_mask_conserved_by_reflective_border(self):
        labels = make_labels(np.ones((64, 64)), LevelSample((1, 7, 20)))
        for grid in labels.values():
            assert np.allclose(grid, 1.0, atol=1e-12)

    def test_impulse_response_equals_kernel(self):
        side = 128
        mask = np.zeros((side, side))
        mask[side // 2, side // 2] = 1.0
        level = 6
        out = make_labels(mask, LevelSample((level, 10, 20)))[level]
        kernel = gaussian_kernel(sigma_for_level(level), max_side=side)
        radius = kernel.shape[0] // 2
        lo, hi = side // 2 - radius, side // 2 + radius + 1
        assert np.allclose(out[lo:hi, lo:hi], kernel, atol=1e-15)
        outside = out.copy()
        outside[lo:hi, lo:hi] = 0.0
        assert (outside == 0.0).all()

    def test_full_level_bit_identical(self, rng):
        mask = (rng.random((64, 64)) > 0.5).astype(np.float64)
        labels = make_labels(mask, LevelSample((3, 8, 15)))
        assert (labels[32] == mask).all()

    def test_mass_conserved_for_interior_foreground(self):
        # foreground well away from borders so no mass leaves the grid
        mask = maskdata.ellipse_mask(256, 127.5, 127.5, 20, 20)
        level = 8  # sigma ~ 9.1, 3*sigma ~ 27 < margin
        out = make_labels(mask, LevelSample((level, 20, 30)))[level]
        assert out.sum() == pytest.approx(mask.sum(), rel=1e-6)

    def test_monotone_sharpening_on_disk(self):
        mask = maskdata.ellipse_mask(128, 63.5, 63.5, 24, 24)
        peaks = []
        for level in (1, 4, 10, 20, 31):
            out = blur(mask, sigma_for_level(level))
            peaks.append(out.max())
        assert all(a <= b + 1e-12 for a, b in zip(peaks, peaks[1:]))

    def test_values_stay_in_unit_interval(self, rng):
        mask = (rng.random((64, 64)) > 0.3).astype(np.float64)
        labels = make_labels(mask, LevelSample((1, 2, 3)))
        for grid in labels.values():
            assert grid.min() >= -1e-12 and grid.max() <= 1.0 + 1e-12


class TestBatchedBlur:
    @pytest.mark.parametrize("sigma", [1.125, 3.7, 18.0, 48.0])
    def test_matches_reference_blur(self, sigma, rng):
        masks = rng.random((3, 96, 96))
        fast = blur_batch(torch.as_tensor(masks), sigma).numpy()
        for i in range(3):
            assert np.allclose(fast[i], blur(masks[i], sigma), atol=1e-12)

    def test_batch_labels_match_single(self, rng):
        masks = (rng.random((2, 64, 64)) > 0.5).astype(np.float64)
        levels = LevelSample((2, 9, 17))
        batched = make_labels_batch(torch.as_tensor(masks), levels)
        for i in range(2):
            single = make_labels(masks[i], levels)
            for level, grid in single.items():
                assert np.allclose(batched[level][i].numpy(), grid, atol=1e-12)
