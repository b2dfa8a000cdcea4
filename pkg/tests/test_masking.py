"""Spatial mask type, training-mask sampling, and noise fill."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrefine.errors import ValidationError
from maskrefine.masking import (
    MaskSamplerConfig,
    SpatialMask,
    apply_mask,
    iteration_rng,
    sample_mask_with_details,
    sample_training_mask,
)


def full_brain(side=128):
    return SpatialMask.full((side, side))


class TestSpatialMask:
    def test_area_cached(self):
        mask = SpatialMask.from_bool(np.eye(5, dtype=bool))
        assert mask.area == 5

    def test_rejects_non_binary(self):
        with pytest.raises(ValidationError):
            SpatialMask(np.array([[0, 2], [1, 0]], dtype=np.uint8))

    def test_plane_is_read_only(self):
        mask = SpatialMask.empty((4, 4))
        with pytest.raises(ValueError):
            mask.plane[0, 0] = 1

    def test_subset(self):
        small = SpatialMask.from_bool(np.eye(4, dtype=bool))
        assert small.is_subset_of(SpatialMask.full((4, 4)))
        assert not SpatialMask.full((4, 4)).is_subset_of(small)


class TestSampler:
    def test_point_mass_sigma_gives_single_patch_at_center(self):
        brain = full_brain(32)
        config = MaskSamplerConfig(
            patch_side_lengths=(4,), patch_count=1, sigma_range=(1e-6, 1e-6)
        )
        mask, (cy, cx), _ = sample_mask_with_details(
            brain, config, np.random.default_rng(42)
        )
        expected = np.zeros((32, 32), dtype=bool)
        expected[cy : cy + 4, cx : cx + 4] = True
        assert np.array_equal(mask.bool_plane, expected)

    def test_fixed_seed_is_bit_identical(self):
        brain = full_brain(64)
        config = MaskSamplerConfig(patch_count=200)
        m1 = sample_training_mask(brain, config, np.random.default_rng(5))
        m2 = sample_training_mask(brain, config, np.random.default_rng(5))
        assert m1.same_as(m2)

    def test_empty_brain_rejected(self):
        with pytest.raises(ValidationError):
            sample_training_mask(
                SpatialMask.empty((8, 8)), MaskSamplerConfig(), np.random.default_rng(0)
            )

    def test_masked_fraction_bounds_over_seeds(self):
        # Default config on a full 128x128 brain: dense but never the whole
        # brain. Bounds established empirically before the main build.
        brain = full_brain(128)
        config = MaskSamplerConfig()
        fractions = []
        for seed in range(100):
            mask = sample_training_mask(brain, config, np.random.default_rng(seed))
            fractions.append(mask.area / brain.area)
        assert 0.05 < min(fractions)
        assert max(fractions) < 0.95

    def test_result_subset_of_brain(self):
        rng = np.random.default_rng(17)
        plane = np.zeros((64, 64), dtype=bool)
        plane[10:50, 14:40] = True
        brain = SpatialMask.from_bool(plane)
        for seed in range(5):
            mask = sample_training_mask(
                brain, MaskSamplerConfig(patch_count=300), np.random.default_rng(seed)
            )
            assert mask.is_subset_of(brain)

    def test_centroid_tracks_gaussian_center(self):
        brain = full_brain(128)
        config = MaskSamplerConfig()
        distances, sigmas = [], []
        for seed in range(40):
            mask, (cy, cx), sigma = sample_mask_with_details(
                brain, config, np.random.default_rng(1000 + seed)
            )
            ys, xs = np.nonzero(mask.plane)
            distances.append(np.hypot(ys.mean() - cy, xs.mean() - cx))
            sigmas.append(sigma)
        assert np.mean(distances) < 2 * np.mean(sigmas)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            MaskSamplerConfig(patch_side_lengths=())
        with pytest.raises(ValidationError):
            MaskSamplerConfig(patch_count=0)
        with pytest.raises(ValidationError):
            MaskSamplerConfig(sigma_range=(0.0, 4.0))


class TestApplyMask:
    def test_zero_mask_is_identity_bits(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 16))
        out = apply_mask(x, SpatialMask.empty((16, 16)), np.random.default_rng(1))
        assert np.array_equal(out, x)

    def test_full_mask_shares_no_pixels(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 16))
        out = apply_mask(x, SpatialMask.full((16, 16)), np.random.default_rng(1))
        assert np.all(out != x)

    def test_checkerboard_on_constant(self):
        x = np.full((32, 32), 5.0)
        board = SpatialMask.from_bool(np.indices((32, 32)).sum(axis=0) % 2 == 0)
        out = apply_mask(x, board, np.random.default_rng(3))
        assert np.all(out[board.plane == 0] == 5.0)
        n = board.area
        noise_mean = out[board.bool_plane].mean()
        # noise is N(0,1): sample mean within 3/sqrt(n) of 0
        assert abs(noise_mean) < 3.0 / np.sqrt(n)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            apply_mask(np.zeros((4, 4)), SpatialMask.empty((5, 5)), np.random.default_rng(0))

    def test_identical_seed_identical_fill(self):
        x = np.zeros((8, 8))
        mask = SpatialMask.from_bool(np.tri(8, dtype=bool))
        a = apply_mask(x, mask, np.random.default_rng(9))
        b = apply_mask(x, mask, np.random.default_rng(9))
        assert np.array_equal(a, b)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 9999), mask_seed=st.integers(0, 9999))
    def test_unmasked_pixels_never_change(self, seed, mask_seed):
        x = np.random.default_rng(seed).standard_normal((12, 12))
        mask = SpatialMask.from_bool(
            np.random.default_rng(mask_seed).random((12, 12)) < 0.4
        )
        out = apply_mask(x, mask, np.random.default_rng(seed + 1))
        outside = mask.plane == 0
        assert np.array_equal(out[outside], x[outside])


class TestIterationRng:
    def test_keyed_streams_are_stable(self):
        a = iteration_rng(7, 3).standard_normal(5)
        b = iteration_rng(7, 3).standard_normal(5)
        c = iteration_rng(7, 4).standard_normal(5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
