"""Threshold calibration from healthy validation slices, and the
tau/radius sensitivity sweeps.

The shrink threshold is a percentile of reconstruction errors collected
under training-style random masks on healthy data only; no evaluation
labels ever reach the calibration path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import Slice
from .errors import ValidationError
from .frequency import structural_guide
from .masking import MaskSamplerConfig, SpatialMask, apply_mask, sample_training_mask
from .metrics import dice
from .models import (
    KIND_MAIN,
    ReconstructionModel,
    TrainConfig,
    reconstruct,
    reconstruct_init,
    train_init,
)
from .refinement import (
    RefinementConfig,
    error_map,
    run_refinement,
    shrink_mask,
    single_step_segment,
)

DEFAULT_CALIBRATION_PERCENTILE = 80.0
# Preset matching lower-contrast lesions (stroke-style data).
LOW_CONTRAST_CALIBRATION_PERCENTILE = 70.0


@dataclass
class CalibrationResult:
    tau: float
    source_percentile: float
    sample_count: int
    per_image: list[tuple[str, float]] = field(default_factory=list)
    # Pool percentiles 0..100 in steps of 0.5; lets a service translate a
    # requested percentile into tau without re-running calibration.
    percentile_curve: list[tuple[float, float]] = field(default_factory=list)

    def tau_for_percentile(self, percentile: float) -> float:
        if not self.percentile_curve:
            raise ValidationError("calibration result has no percentile curve")
        ps = np.array([p for p, _ in self.percentile_curve])
        ts = np.array([t for _, t in self.percentile_curve])
        if not ps[0] <= percentile <= ps[-1]:
            raise ValidationError(f"percentile {percentile} outside curve range")
        return float(np.interp(percentile, ps, ts))

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "source_percentile": self.source_percentile,
            "sample_count": self.sample_count,
            "per_image": [
                {"image_id": image_id, "value": value} for image_id, value in self.per_image
            ],
            "percentile_curve": [[p, t] for p, t in self.percentile_curve],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CalibrationResult":
        return cls(
            tau=payload["tau"],
            source_percentile=payload["source_percentile"],
            sample_count=payload["sample_count"],
            per_image=[(r["image_id"], r["value"]) for r in payload["per_image"]],
            percentile_curve=[tuple(row) for row in payload["percentile_curve"]],
        )


def collect_masked_errors(
    slices: list[Slice],
    main_model: ReconstructionModel,
    sampler_config: MaskSamplerConfig,
    seed: int = 0,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Per slice: apply a training-style random mask, reconstruct, and
    collect the error values under the mask. Returns the pooled vector and
    the per-slice vectors."""
    per_slice = []
    radius = main_model.radius
    for i, slc in enumerate(slices):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        mask = sample_training_mask(slc.brain_mask, sampler_config, rng)
        corrupted = apply_mask(slc.pixels, mask, rng)
        guide = (
            structural_guide(slc.pixels, radius) if main_model.kind == KIND_MAIN else None
        )
        recon = reconstruct(main_model, corrupted, guide)
        err = error_map(recon, slc.pixels, mask)
        per_slice.append(err[mask.bool_plane])
    pooled = np.concatenate(per_slice) if per_slice else np.array([])
    return pooled, per_slice


def calibrate_tau(
    healthy_validation: list[Slice],
    main_model: ReconstructionModel,
    percentile: float = DEFAULT_CALIBRATION_PERCENTILE,
    sampler_config: MaskSamplerConfig | None = None,
    seed: int = 0,
) -> CalibrationResult:
    """tau = the requested percentile of masked reconstruction errors pooled
    across healthy validation slices (linear interpolation between order
    statistics)."""
    if not 0 < percentile <= 100:
        raise ValidationError(f"percentile must be in (0,100], got {percentile}")
    sampler_config = sampler_config or MaskSamplerConfig()
    pooled, per_slice = collect_masked_errors(
        healthy_validation, main_model, sampler_config, seed
    )
    if pooled.size == 0:
        raise ValidationError("empty calibration pool")
    tau = float(np.percentile(pooled, percentile))
    if tau <= 0:
        raise ValidationError(f"calibrated tau {tau} is not positive")
    grid = np.arange(0.0, 100.5, 0.5)
    curve = [(float(p), float(np.percentile(pooled, p))) for p in grid]
    per_image = [
        (slc.subject_id, float(np.percentile(errors, percentile)))
        for slc, errors in zip(healthy_validation, per_slice)
    ]
    return CalibrationResult(
        tau=tau,
        source_percentile=percentile,
        sample_count=int(pooled.size),
        per_image=per_image,
        percentile_curve=curve,
    )


def sensitivity_sweep_tau(
    eval_set: list[tuple[Slice, SpatialMask]],
    main_model: ReconstructionModel,
    init_model: ReconstructionModel,
    percentiles: list[float],
    config: RefinementConfig,
    calibration_pool: np.ndarray,
    seed: int = 0,
) -> list[dict]:
    """Mean Dice of the full pipeline for each calibration percentile."""
    rows = []
    for percentile in percentiles:
        tau = float(np.percentile(calibration_pool, percentile))
        cfg = RefinementConfig(
            tau=tau,
            first_shrink_percentile=config.first_shrink_percentile,
            termination_fraction=config.termination_fraction,
            max_iterations=config.max_iterations,
            radius=config.radius,
        )
        scores = []
        for slc, gt in eval_set:
            trace = run_refinement(slc.pixels, slc.brain_mask, main_model, init_model, cfg, seed)
            scores.append(dice(trace.final_segmentation, gt))
        rows.append(
            {
                "percentile": float(percentile),
                "tau": tau,
                "mean_dice": float(np.mean(scores)) if scores else None,
            }
        )
    return rows


def _single_step_tau(
    validation: list[Slice],
    init_model: ReconstructionModel,
    radius: float,
    percentile: float,
) -> float:
    """Percentile of init-model reconstruction errors over healthy brains;
    the single-step path has no spatial mask, so the pool is the whole brain."""
    values = []
    for slc in validation:
        guide = structural_guide(slc.pixels, radius)
        recon = reconstruct_init(init_model, guide)
        err = error_map(recon, slc.pixels, slc.brain_mask)
        values.append(err[slc.brain_mask.bool_plane])
    pooled = np.concatenate(values)
    return float(np.percentile(pooled, percentile))


def sensitivity_sweep_radius(
    healthy_train: list[Slice],
    healthy_validation: list[Slice],
    eval_set: list[tuple[Slice, SpatialMask]],
    radii: list[float],
    train_config: TrainConfig,
    percentile: float = DEFAULT_CALIBRATION_PERCENTILE,
) -> list[dict]:
    """Mean Dice of the single-step (guide-only) prediction per guide radius.

    Trains one init model per radius under the given budget.
    """
    rows = []
    for radius in radii:
        cfg = dataclasses.replace(train_config, radius=float(radius))
        model, _ = train_init(healthy_train, cfg)
        tau = _single_step_tau(healthy_validation, model, radius, percentile)
        scores = []
        for slc, gt in eval_set:
            seg = single_step_segment(model, slc.pixels, slc.brain_mask, tau, radius)
            scores.append(dice(seg, gt))
        rows.append(
            {
                "radius": float(radius),
                "tau": tau,
                "mean_dice": float(np.mean(scores)) if scores else None,
            }
        )
    return rows
