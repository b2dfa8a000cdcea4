"""Threshold calibration and sensitivity sweeps."""

import numpy as np
import pytest

from maskrefine.calibration import (
    CalibrationResult,
    calibrate_tau,
    collect_masked_errors,
    sensitivity_sweep_radius,
    sensitivity_sweep_tau,
)
from maskrefine.errors import ValidationError
from maskrefine.refinement import RefinementConfig
from tests.conftest import SMALL_RADIUS


class TestPercentileConvention:
    def test_pool_1_to_100_at_80(self):
        # linear interpolation between order statistics: 80.2
        pool = np.arange(1.0, 101.0)
        tau = float(np.percentile(pool, 80.0))
        assert 80.0 <= tau <= 81.0
        assert tau == pytest.approx(80.2)

    def test_percentile_100_is_max(self, trained_main, validation_slices, small_sampler_config):
        model, _ = trained_main
        result = calibrate_tau(validation_slices, model, 100.0, small_sampler_config, seed=2)
        pool, _ = collect_masked_errors(validation_slices, model, small_sampler_config, seed=2)
        assert result.tau == pytest.approx(float(pool.max()))


class TestCalibrateTau:
    def test_deterministic(self, trained_main, validation_slices, small_sampler_config):
        model, _ = trained_main
        a = calibrate_tau(validation_slices[:2], model, 80.0, small_sampler_config, seed=3)
        b = calibrate_tau(validation_slices[:2], model, 80.0, small_sampler_config, seed=3)
        assert abs(a.tau - b.tau) < 1e-9

    def test_monotone_in_percentile(self, trained_main, validation_slices, small_sampler_config):
        model, _ = trained_main
        taus = [
            calibrate_tau(validation_slices, model, p, small_sampler_config, seed=1).tau
            for p in (60.0, 70.0, 80.0, 90.0)
        ]
        assert taus == sorted(taus)

    def test_empty_pool_rejected(self, trained_main, small_sampler_config):
        model, _ = trained_main
        with pytest.raises(ValidationError):
            calibrate_tau([], model, 80.0, small_sampler_config)

    def test_no_labels_in_signature(self):
        # calibration must not be able to see ground truth
        import inspect

        params = inspect.signature(calibrate_tau).parameters
        assert not any("gt" in n or "label" in n or "truth" in n for n in params)

    def test_result_round_trip_and_curve(self, trained_main, validation_slices, small_sampler_config):
        model, _ = trained_main
        result = calibrate_tau(validation_slices, model, 80.0, small_sampler_config, seed=4)
        assert result.sample_count > 0
        assert len(result.per_image) == len(validation_slices)
        assert result.tau_for_percentile(80.0) == pytest.approx(result.tau, rel=1e-6)
        restored = CalibrationResult.from_dict(result.to_dict())
        assert restored.tau == result.tau
        assert restored.tau_for_percentile(65.0) == result.tau_for_percentile(65.0)


class TestSweeps:
    def test_tau_sweep_single_and_empty(self, trained_main, trained_init, lesion_set, validation_slices, small_sampler_config):
        main_model, _ = trained_main
        init_model, _ = trained_init
        pool, _ = collect_masked_errors(validation_slices, main_model, small_sampler_config, seed=1)
        config = RefinementConfig(tau=float(np.percentile(pool, 80.0)), radius=SMALL_RADIUS)
        eval_set = list(zip(*lesion_set))[:3]

        rows = sensitivity_sweep_tau(eval_set, main_model, init_model, [80.0], config, pool, seed=5)
        assert len(rows) == 1
        assert rows[0]["percentile"] == 80.0
        assert 0.0 <= rows[0]["mean_dice"] <= 1.0

        assert sensitivity_sweep_tau(eval_set, main_model, init_model, [], config, pool) == []

    def test_radius_sweep_rows(self, healthy_slices, validation_slices, lesion_set, small_train_config):
        import dataclasses

        tiny = dataclasses.replace(small_train_config, epochs=2, base_channels=8)
        eval_set = list(zip(*lesion_set))[:2]
        rows = sensitivity_sweep_radius(
            healthy_slices[:24], validation_slices[:4], eval_set, [6.0], tiny, 80.0
        )
        assert len(rows) == 1
        assert rows[0]["radius"] == 6.0
        assert rows[0]["tau"] > 0

        assert (
            sensitivity_sweep_radius(
                healthy_slices[:24], validation_slices[:4], eval_set, [], tiny, 80.0
            )
            == []
        )
