"""Iterative inference: start from a full-brain mask, reconstruct, and
repeatedly unmask pixels whose reconstruction error says they are
confidently normal, until the mask stops shrinking.

Iteration 1 is special: the whole brain is hidden, so the init model
reconstructs from the high-frequency guide alone and the second mask is
cut at a fixed percentile of that first error map. Later iterations use
the main model and the absolute threshold tau.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .frequency import DEFAULT_HIGH_PASS_RADIUS, structural_guide
from .masking import SpatialMask, iteration_rng
from .models import ReconstructionModel, reconstruct, reconstruct_init

TERMINATED_CONVERGED = "converged"
TERMINATED_EMPTY = "empty_mask"
TERMINATED_MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class RefinementConfig:
    tau: float = 0.3
    first_shrink_percentile: float = 40.0
    termination_fraction: float = 0.01
    max_iterations: int = 50
    radius: float = DEFAULT_HIGH_PASS_RADIUS

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"tau must be > 0, got {self.tau}")
        if not 0 < self.first_shrink_percentile < 100:
            raise ValidationError(
                f"first_shrink_percentile must be in (0,100), got {self.first_shrink_percentile}"
            )
        if not 0 < self.termination_fraction < 1:
            raise ValidationError(
                f"termination_fraction must be in (0,1), got {self.termination_fraction}"
            )
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if self.radius < 0:
            raise ValidationError("radius must be >= 0")


@dataclass
class IterationState:
    """Record of one refinement iteration.

    ``error_map`` is zero outside ``mask``; ``masked_input`` is kept so
    unmasked-pixel fidelity can be audited and rendered.
    """

    index: int
    mask: SpatialMask
    masked_input: np.ndarray
    reconstruction: np.ndarray
    error_map: np.ndarray


@dataclass
class RefinementTrace:
    states: list[IterationState]
    termination_reason: str
    final_segmentation: SpatialMask
    config: RefinementConfig
    seed: int = 0

    def __post_init__(self):
        if not self.states:
            raise ValidationError("a trace must contain at least one iteration")

    @property
    def mask_areas(self) -> list[int]:
        return [s.mask.area for s in self.states]


def error_map(reconstruction: np.ndarray, original: np.ndarray, mask: SpatialMask) -> np.ndarray:
    """Per-pixel |reconstruction - original|, restricted to the mask."""
    recon = np.asarray(reconstruction, dtype=np.float64)
    orig = np.asarray(original, dtype=np.float64)
    if recon.shape != orig.shape or recon.shape != mask.shape:
        raise ValidationError(
            f"shapes differ: reconstruction {recon.shape}, original {orig.shape}, mask {mask.shape}"
        )
    return np.abs(recon - orig) * mask.plane


def shrink_mask(mask: SpatialMask, err: np.ndarray, tau: float) -> SpatialMask:
    """Keep only masked pixels whose error is >= tau."""
    if tau <= 0:
        raise ValidationError(f"tau must be > 0, got {tau}")
    if err.shape != mask.shape:
        raise ValidationError(f"error map shape {err.shape} does not match mask {mask.shape}")
    return SpatialMask.from_bool(mask.bool_plane & (np.asarray(err) >= tau))


def initial_shrink(e1: np.ndarray, brain_mask: SpatialMask, percentile: float) -> SpatialMask:
    """Second-iteration mask: keep brain pixels at or above the given
    percentile of the first error map, unmasking roughly that percent of
    the brain in one cut."""
    if brain_mask.is_empty:
        raise ValidationError("empty brain mask")
    e1 = np.asarray(e1, dtype=np.float64)
    if e1.shape != brain_mask.shape:
        raise ValidationError(f"error map shape {e1.shape} does not match brain {brain_mask.shape}")
    threshold = np.percentile(e1[brain_mask.bool_plane], percentile)
    return SpatialMask.from_bool(brain_mask.bool_plane & (e1 >= threshold))


def has_converged(prev: SpatialMask, new: SpatialMask, brain_area: int, fraction: float) -> bool:
    """True when the mask shrank by less than ``fraction`` of the brain area."""
    return (prev.area - new.area) < fraction * brain_area


def final_segmentation(trace_states: list[IterationState], tau: float) -> SpatialMask:
    """One further threshold pass over the terminal error map, so the
    segmentation comes from the last reconstruction rather than the mask."""
    if not trace_states:
        raise ValidationError("empty trace")
    last = trace_states[-1]
    return SpatialMask.from_bool(last.mask.bool_plane & (last.error_map >= tau))


def _check_radius(model: ReconstructionModel, config: RefinementConfig, role: str) -> None:
    if model.radius is not None and model.radius != config.radius:
        raise ValidationError(
            f"{role} model was trained with guide radius {model.radius}, "
            f"config asks for {config.radius}"
        )


def run_iteration_1(
    pixels: np.ndarray,
    brain_mask: SpatialMask,
    init_model: ReconstructionModel,
    guide: np.ndarray,
) -> IterationState:
    recon = reconstruct_init(init_model, guide)
    err = error_map(recon, pixels, brain_mask)
    # The whole brain is hidden at t=1: the "masked input" is the guide's
    # information only; keep the zeroed plane for rendering.
    hidden = np.where(brain_mask.bool_plane, 0.0, pixels)
    return IterationState(
        index=1, mask=brain_mask, masked_input=hidden, reconstruction=recon, error_map=err
    )


def run_main_iteration(
    index: int,
    pixels: np.ndarray,
    mask: SpatialMask,
    main_model: ReconstructionModel,
    guide: np.ndarray | None,
    seed: int,
) -> IterationState:
    rng = iteration_rng(seed, index)
    noise = rng.standard_normal(pixels.shape)
    corrupted = np.where(mask.bool_plane, noise, pixels)
    recon = reconstruct(main_model, corrupted, guide)
    err = error_map(recon, pixels, mask)
    return IterationState(
        index=index, mask=mask, masked_input=corrupted, reconstruction=recon, error_map=err
    )


def next_mask(state: IterationState, brain_mask: SpatialMask, config: RefinementConfig) -> SpatialMask:
    """Mask for the iteration after ``state``: percentile cut after the
    special first iteration, tau threshold afterwards."""
    if state.index == 1:
        return initial_shrink(state.error_map, brain_mask, config.first_shrink_percentile)
    return shrink_mask(state.mask, state.error_map, config.tau)


def run_refinement(
    pixels: np.ndarray,
    brain_mask: SpatialMask,
    main_model: ReconstructionModel,
    init_model: ReconstructionModel,
    config: RefinementConfig,
    seed: int = 0,
) -> RefinementTrace:
    """Full inference loop over one slice.

    Noise is keyed by (seed, iteration index) so identical seeds replay
    bit-identically, including after a rollback.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape != brain_mask.shape:
        raise ValidationError(f"slice shape {pixels.shape} does not match brain {brain_mask.shape}")
    if brain_mask.is_empty:
        raise ValidationError("empty brain mask")
    _check_radius(main_model, config, "main")
    _check_radius(init_model, config, "init")

    guide = structural_guide(pixels, config.radius)
    main_guide = guide if main_model.kind == "main" else None

    states = [run_iteration_1(pixels, brain_mask, init_model, guide)]
    reason = TERMINATED_MAX_ITERATIONS
    mask = next_mask(states[0], brain_mask, config)
    main_iterations = 0
    while main_iterations < config.max_iterations:
        if mask.is_empty:
            reason = TERMINATED_EMPTY
            break
        state = run_main_iteration(
            len(states) + 1, pixels, mask, main_model, main_guide, seed
        )
        states.append(state)
        main_iterations += 1
        new_mask = next_mask(state, brain_mask, config)
        if has_converged(mask, new_mask, brain_mask.area, config.termination_fraction):
            reason = TERMINATED_CONVERGED
            break
        if new_mask.is_empty:
            reason = TERMINATED_EMPTY
            break
        mask = new_mask

    return RefinementTrace(
        states=states,
        termination_reason=reason,
        final_segmentation=final_segmentation(states, config.tau),
        config=config,
        seed=seed,
    )


def single_step_segment(
    init_model: ReconstructionModel,
    pixels: np.ndarray,
    brain_mask: SpatialMask,
    tau: float,
    radius: float,
) -> SpatialMask:
    """Ablation path: one reconstruction from the guide alone, thresholded.

    No spatial masking and no iteration; used by the radius sweep and the
    iterative-refinement ablation.
    """
    guide = structural_guide(pixels, radius)
    recon = reconstruct_init(init_model, guide)
    err = error_map(recon, pixels, brain_mask)
    return shrink_mask(brain_mask, err, tau)


def export_trace(trace: RefinementTrace, directory: str | Path) -> Path:
    """Write per-iteration mask and error-map images plus a manifest."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    error_ceiling = max(float(s.error_map.max()) for s in trace.states) or 1.0
    for state in trace.states:
        Image.fromarray(state.mask.plane * 255).save(directory / f"mask_{state.index:03d}.png")
        scaled = np.clip(state.error_map / error_ceiling * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(scaled).save(directory / f"error_{state.index:03d}.png")
    Image.fromarray(trace.final_segmentation.plane * 255).save(directory / "segmentation.png")
    manifest = {
        "termination_reason": trace.termination_reason,
        "iterations": len(trace.states),
        "mask_areas": trace.mask_areas,
        "final_segmentation_area": trace.final_segmentation.area,
        "seed": trace.seed,
        "error_scale": error_ceiling,
        "config": {
            "tau": trace.config.tau,
            "first_shrink_percentile": trace.config.first_shrink_percentile,
            "termination_fraction": trace.config.termination_fraction,
            "max_iterations": trace.config.max_iterations,
            "radius": trace.config.radius,
        },
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
