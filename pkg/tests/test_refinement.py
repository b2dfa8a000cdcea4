"""Mask-shrinking algebra: error maps, threshold shrinks, percentile cut,
termination arithmetic, and final segmentation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskrefine.errors import ValidationError
from maskrefine.masking import SpatialMask
from maskrefine.refinement import (
    IterationState,
    RefinementConfig,
    error_map,
    final_segmentation,
    has_converged,
    initial_shrink,
    shrink_mask,
)


class TestErrorMap:
    def test_equal_planes_zero(self):
        x = np.random.default_rng(0).standard_normal((8, 8))
        mask = SpatialMask.full((8, 8))
        assert np.array_equal(error_map(x, x, mask), np.zeros((8, 8)))

    def test_single_pixel(self):
        orig = np.zeros((4, 4))
        recon = np.zeros((4, 4))
        recon[1, 2] = 2.0
        plane = np.zeros((4, 4), dtype=bool)
        plane[1, 2] = True
        err = error_map(recon, orig, SpatialMask.from_bool(plane))
        expected = np.zeros((4, 4))
        expected[1, 2] = 2.0
        assert np.array_equal(err, expected)

    def test_random_case_matches_hand_oracle(self):
        rng = np.random.default_rng(1)
        orig = rng.standard_normal((4, 4))
        recon = rng.standard_normal((4, 4))
        mask_plane = rng.random((4, 4)) < 0.5
        err = error_map(recon, orig, SpatialMask.from_bool(mask_plane))
        for i in range(4):
            for j in range(4):
                expected = abs(recon[i, j] - orig[i, j]) if mask_plane[i, j] else 0.0
                assert err[i, j] == pytest.approx(expected, abs=1e-15)

    def test_zero_outside_mask(self):
        rng = np.random.default_rng(2)
        err = error_map(
            rng.standard_normal((6, 6)),
            rng.standard_normal((6, 6)),
            SpatialMask.from_bool(np.tri(6, dtype=bool)),
        )
        assert np.all(err[np.tri(6, dtype=bool) == 0] == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            error_map(np.zeros((3, 3)), np.zeros((3, 3)), SpatialMask.full((4, 4)))


class TestShrinkMask:
    def test_all_below_tau_empties(self):
        mask = SpatialMask.full((4, 4))
        assert shrink_mask(mask, np.full((4, 4), 0.1), 0.5).is_empty

    def test_all_at_or_above_tau_unchanged(self):
        mask = SpatialMask.full((4, 4))
        out = shrink_mask(mask, np.full((4, 4), 0.5), 0.5)
        assert out.same_as(mask)

    def test_ten_pixel_enumeration(self):
        plane = np.zeros((2, 5), dtype=bool)
        plane[:] = True
        errors = np.arange(0.1, 1.05, 0.1).reshape(2, 5)
        out = shrink_mask(SpatialMask.from_bool(plane), errors, 0.55)
        assert out.area == 5
        assert np.array_equal(out.plane.ravel(), (errors.ravel() >= 0.55).astype(np.uint8))

    def test_nonpositive_tau_rejected(self):
        with pytest.raises(ValidationError):
            shrink_mask(SpatialMask.full((2, 2)), np.zeros((2, 2)), 0.0)

    def test_enumeration_oracle_1000_random_cases(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            mask_plane = rng.random((8, 8)) < rng.uniform(0.2, 1.0)
            errors = rng.random((8, 8)) * mask_plane
            tau = rng.uniform(0.05, 0.95)
            out = shrink_mask(SpatialMask.from_bool(mask_plane), errors, tau)
            for i in range(8):
                for j in range(8):
                    keep = mask_plane[i, j] and errors[i, j] >= tau
                    assert out.plane[i, j] == int(keep)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), t1=st.floats(0.01, 1.0), t2=st.floats(0.01, 1.0))
    def test_tau_monotonicity(self, seed, t1, t2):
        lo, hi = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        mask = SpatialMask.from_bool(rng.random((8, 8)) < 0.7)
        errors = rng.random((8, 8)) * mask.plane
        assert shrink_mask(mask, errors, hi).is_subset_of(shrink_mask(mask, errors, lo))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_result_subset_of_input(self, seed):
        rng = np.random.default_rng(seed)
        mask = SpatialMask.from_bool(rng.random((8, 8)) < 0.6)
        errors = rng.random((8, 8)) * mask.plane
        assert shrink_mask(mask, errors, 0.4).is_subset_of(mask)


class TestInitialShrink:
    def test_uniform_errors_keep_full_brain(self):
        brain = SpatialMask.full((10, 10))
        out = initial_shrink(np.full((10, 10), 0.7), brain, 40.0)
        assert out.same_as(brain)

    def test_distinct_errors_keep_exact_fraction(self):
        rng = np.random.default_rng(4)
        values = rng.permutation(100).astype(float).reshape(10, 10)
        brain = SpatialMask.full((10, 10))
        out = initial_shrink(values, brain, 40.0)
        assert out.area == 60
        # sort-based oracle: the kept pixels are exactly the top 60
        kept_values = values[out.bool_plane]
        assert set(kept_values) == set(np.sort(values.ravel())[40:])

    def test_percentile_zero_keeps_brain(self):
        rng = np.random.default_rng(5)
        brain = SpatialMask.from_bool(rng.random((8, 8)) < 0.8)
        e1 = rng.random((8, 8)) * brain.plane
        assert initial_shrink(e1, brain, 0.0).same_as(brain)

    def test_empty_brain_rejected(self):
        with pytest.raises(ValidationError):
            initial_shrink(np.zeros((4, 4)), SpatialMask.empty((4, 4)), 40.0)


class TestHasConverged:
    def test_no_shrink_converges(self):
        m = SpatialMask.from_bool(np.ones((40, 25), dtype=bool))  # area 1000
        assert has_converged(m, m, 10_000, 0.01) is True

    def test_two_percent_shrink_does_not(self):
        prev = SpatialMask.from_bool(np.ones((40, 25), dtype=bool))
        next_plane = np.ones((40, 25), dtype=bool)
        next_plane.ravel()[:200] = False  # 1000 -> 800
        assert has_converged(prev, SpatialMask.from_bool(next_plane), 10_000, 0.01) is False

    def test_small_mask_to_empty_converges(self):
        prev_plane = np.zeros((100, 100), dtype=bool)
        prev_plane.ravel()[:50] = True
        prev = SpatialMask.from_bool(prev_plane)
        nxt = SpatialMask.empty((100, 100))
        assert has_converged(prev, nxt, 10_000, 0.01) is True


class TestFinalSegmentation:
    def _state(self, mask_plane, err):
        mask = SpatialMask.from_bool(mask_plane)
        return IterationState(
            index=2,
            mask=mask,
            masked_input=np.zeros(mask.shape),
            reconstruction=np.zeros(mask.shape),
            error_map=err * mask.plane,
        )

    def test_all_below_tau_empty(self):
        state = self._state(np.ones((4, 4), dtype=bool), np.full((4, 4), 0.1))
        assert final_segmentation([state], 0.5).is_empty

    def test_all_at_or_above_tau_keeps_mask(self):
        plane = np.tri(4, dtype=bool)
        state = self._state(plane, np.full((4, 4), 0.9))
        assert final_segmentation([state], 0.5).same_as(SpatialMask.from_bool(plane))

    def test_mixed_3x3_enumeration(self):
        plane = np.array(
            [[True, True, False], [False, True, True], [True, False, True]]
        )
        err = np.array([[0.9, 0.2, 0.0], [0.0, 0.55, 0.54], [0.1, 0.0, 0.8]])
        seg = final_segmentation([self._state(plane, err)], 0.55)
        for i in range(3):
            for j in range(3):
                assert seg.plane[i, j] == int(plane[i, j] and err[i, j] >= 0.55)


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValidationError):
            RefinementConfig(tau=0.0)
        with pytest.raises(ValidationError):
            RefinementConfig(tau=0.3, first_shrink_percentile=100.0)
        with pytest.raises(ValidationError):
            RefinementConfig(tau=0.3, termination_fraction=0.0)
        with pytest.raises(ValidationError):
            RefinementConfig(tau=0.3, max_iterations=0)


@pytest.fixture(scope="module")
def loop_setup(trained_main, trained_init, validation_slices, small_sampler_config):
    from maskrefine.calibration import calibrate_tau
    from tests.conftest import SMALL_RADIUS

    main_model, _ = trained_main
    init_model, _ = trained_init
    calib = calibrate_tau(validation_slices, main_model, 80.0, small_sampler_config, seed=1)
    config = RefinementConfig(tau=calib.tau, radius=SMALL_RADIUS)
    return main_model, init_model, config


class TestRunRefinement:
    def test_lesion_phantoms_segmented(self, loop_setup, lesion_set):
        from maskrefine.metrics import dice
        from maskrefine.refinement import run_refinement

        main_model, init_model, config = loop_setup
        slices, gts = lesion_set
        scores = []
        for slc, gt in zip(slices, gts):
            trace = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, config, seed=3)
            scores.append(dice(trace.final_segmentation, gt))
        assert np.mean(scores) > 0.5

    def test_trace_structure_and_invariants(self, loop_setup, lesion_set):
        from maskrefine.refinement import run_refinement

        main_model, init_model, config = loop_setup
        slc = lesion_set[0][0]
        trace = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, config, seed=3)

        assert trace.states[0].index == 1
        assert trace.states[0].mask.same_as(slc.brain_mask)
        for state in trace.states:
            # error restricted to mask
            assert np.all(state.error_map[state.mask.plane == 0] == 0)
            # unmasked pixels of the corrupted input are bit-exact copies
            outside = state.mask.plane == 0
            if state.index >= 2:
                assert np.array_equal(state.masked_input[outside], slc.pixels[outside])
        # monotonic from iteration 2 on
        for prev, nxt in zip(trace.states[1:], trace.states[2:]):
            assert nxt.mask.is_subset_of(prev.mask)
        # segmentation containment
        assert trace.final_segmentation.is_subset_of(trace.states[-1].mask)
        assert trace.final_segmentation.is_subset_of(slc.brain_mask)
        assert trace.termination_reason in ("converged", "empty_mask", "max_iterations")

    def test_max_iterations_one_gives_two_states(self, loop_setup, lesion_set):
        from maskrefine.refinement import run_refinement

        main_model, init_model, config = loop_setup
        slc = lesion_set[0][0]
        capped = RefinementConfig(
            tau=config.tau,
            first_shrink_percentile=config.first_shrink_percentile,
            termination_fraction=1e-9,  # never converge by shrink criterion
            max_iterations=1,
            radius=config.radius,
        )
        trace = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, capped, seed=3)
        assert [s.index for s in trace.states] == [1, 2]
        assert trace.termination_reason == "max_iterations"

    def test_termination_bound(self, loop_setup, lesion_set):
        from maskrefine.refinement import run_refinement

        main_model, init_model, config = loop_setup
        slc = lesion_set[0][1]
        trace = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, config, seed=3)
        bound = int(np.ceil(1 / config.termination_fraction)) + 1
        assert len(trace.states) <= bound + 1  # +1 for the special first iteration
        areas = trace.mask_areas[1:]
        assert all(a >= b for a, b in zip(areas, areas[1:]))

    def test_deterministic_replay(self, loop_setup, lesion_set):
        from maskrefine.refinement import run_refinement

        main_model, init_model, config = loop_setup
        slc = lesion_set[0][2]
        a = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, config, seed=9)
        b = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, config, seed=9)
        assert a.final_segmentation.same_as(b.final_segmentation)
        assert len(a.states) == len(b.states)
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.masked_input, sb.masked_input)
            assert np.array_equal(sa.reconstruction, sb.reconstruction)

    def test_radius_mismatch_rejected(self, loop_setup, lesion_set):
        from maskrefine.refinement import run_refinement

        main_model, init_model, config = loop_setup
        slc = lesion_set[0][0]
        wrong = RefinementConfig(tau=config.tau, radius=config.radius + 1)
        with pytest.raises(ValidationError, match="radius"):
            run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, wrong, seed=0)

    def test_export_trace(self, loop_setup, lesion_set, tmp_path):
        import json

        from maskrefine.refinement import export_trace, run_refinement

        main_model, init_model, config = loop_setup
        slc = lesion_set[0][0]
        trace = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, config, seed=3)
        manifest_path = export_trace(trace, tmp_path / "trace")
        manifest = json.loads(manifest_path.read_text())
        assert manifest["iterations"] == len(trace.states)
        assert manifest["mask_areas"] == trace.mask_areas
        assert manifest["termination_reason"] == trace.termination_reason
        for state in trace.states:
            assert (tmp_path / "trace" / f"mask_{state.index:03d}.png").exists()
            assert (tmp_path / "trace" / f"error_{state.index:03d}.png").exists()
        assert (tmp_path / "trace" / "segmentation.png").exists()

    def test_single_step_segment(self, loop_setup, lesion_set, validation_slices):
        from maskrefine.calibration import _single_step_tau
        from maskrefine.metrics import dice
        from maskrefine.refinement import single_step_segment

        _, init_model, config = loop_setup
        tau = _single_step_tau(validation_slices, init_model, config.radius, 80.0)
        slices, gts = lesion_set
        scores = [
            dice(single_step_segment(init_model, s.pixels, s.brain_mask, tau, config.radius), g)
            for s, g in zip(slices, gts)
        ]
        assert np.mean(scores) > 0.2  # coarse but clearly better than chance
