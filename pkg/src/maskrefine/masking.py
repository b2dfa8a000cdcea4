"""Binary spatial masks, random training-mask synthesis, and noise fill.

Training masks are unions of square patches whose positions are drawn
from an isotropic Gaussian centered at a random brain pixel, so each
mask is a dense blob that does not cover the whole brain. The same
noise-fill operation corrupts masked pixels at training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(eq=False)
class SpatialMask:
    """Binary H x W plane; 1 = masked/hidden, 0 = visible.

    The plane is stored read-only so the cached ``area`` stays honest.
    """

    plane: np.ndarray
    area: int = field(init=False)

    def __post_init__(self):
        plane = np.ascontiguousarray(self.plane)
        if plane.ndim != 2:
            raise ValidationError(f"mask plane must be 2D, got shape {plane.shape}")
        if plane.dtype != np.uint8:
            values = np.unique(plane)
            if not np.all(np.isin(values, (0, 1))):
                raise ValidationError("mask values must be exactly 0 or 1")
            plane = plane.astype(np.uint8)
        elif plane.size and plane.max() > 1:
            raise ValidationError("mask values must be exactly 0 or 1")
        plane.flags.writeable = False
        self.plane = plane
        self.area = int(plane.sum())

    @classmethod
    def from_bool(cls, plane: np.ndarray) -> "SpatialMask":
        return cls(np.asarray(plane, dtype=bool).astype(np.uint8))

    @classmethod
    def full(cls, shape: tuple[int, int]) -> "SpatialMask":
        return cls(np.ones(shape, dtype=np.uint8))

    @classmethod
    def empty(cls, shape: tuple[int, int]) -> "SpatialMask":
        return cls(np.zeros(shape, dtype=np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.plane.shape

    @property
    def bool_plane(self) -> np.ndarray:
        return self.plane.astype(bool)

    @property
    def is_empty(self) -> bool:
        return self.area == 0

    def intersect(self, other: "SpatialMask") -> "SpatialMask":
        return SpatialMask(self.plane & other.plane)

    def is_subset_of(self, other: "SpatialMask") -> bool:
        return bool(np.all(other.plane[self.plane == 1] == 1))

    def same_as(self, other: "SpatialMask") -> bool:
        return self.shape == other.shape and bool(np.all(self.plane == other.plane))


@dataclass(frozen=True)
class MaskSamplerConfig:
    """Parameters of the random training-mask sampler.

    ``sigma_range`` is in pixels; when None it defaults to
    (H/16, H/4) of the image the sampler is applied to.
    """

    patch_side_lengths: tuple[int, ...] = (4, 8, 16)
    patch_count: int = 1000
    sigma_range: tuple[float, float] | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not self.patch_side_lengths:
            raise ValidationError("patch_side_lengths must be nonempty")
        if any(side < 1 for side in self.patch_side_lengths):
            raise ValidationError("patch side lengths must be >= 1")
        if self.patch_count < 1:
            raise ValidationError("patch_count must be >= 1")
        if self.sigma_range is not None:
            low, high = self.sigma_range
            if low <= 0 or high < low:
                raise ValidationError(f"invalid sigma_range {self.sigma_range}")

    def resolved_sigma_range(self, height: int) -> tuple[float, float]:
        if self.sigma_range is not None:
            return self.sigma_range
        return height / 16.0, height / 4.0


def sample_mask_with_details(
    brain_mask: SpatialMask, config: MaskSamplerConfig, rng: np.random.Generator
) -> tuple[SpatialMask, tuple[int, int], float]:
    """Sample one training mask, also returning the Gaussian center and sigma.

    Patch top-left positions are drawn over the full image grid with
    probability proportional to the Gaussian density; patches are clipped
    at the borders and the union is intersected with the brain mask.
    """
    if brain_mask.is_empty:
        raise ValidationError("cannot sample a training mask from an empty brain mask")
    height, width = brain_mask.shape

    brain_pixels = np.argwhere(brain_mask.plane == 1)
    cy, cx = brain_pixels[rng.integers(len(brain_pixels))]
    sigma = rng.uniform(*config.resolved_sigma_range(height))

    yy, xx = np.ogrid[:height, :width]
    log_density = -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2)
    density = np.exp(log_density).ravel()
    density /= density.sum()

    sides = rng.choice(np.asarray(config.patch_side_lengths), size=config.patch_count)
    positions = rng.choice(height * width, size=config.patch_count, p=density)

    canvas = np.zeros((height, width), dtype=bool)
    for pos, side in zip(positions, sides):
        y, x = divmod(int(pos), width)
        canvas[y : y + side, x : x + side] = True

    mask = SpatialMask.from_bool(canvas & brain_mask.bool_plane)
    return mask, (int(cy), int(cx)), float(sigma)


def sample_training_mask(
    brain_mask: SpatialMask, config: MaskSamplerConfig, rng: np.random.Generator
) -> SpatialMask:
    """Random-shaped training mask: union of Gaussian-placed patches,
    restricted to the brain."""
    mask, _, _ = sample_mask_with_details(brain_mask, config, rng)
    return mask


def apply_mask(
    slice_pixels: np.ndarray, mask: SpatialMask, rng: np.random.Generator
) -> np.ndarray:
    """Replace masked pixels with i.i.d. standard Gaussian noise.

    Unmasked pixels are copied bit-identically. The noise plane is drawn
    for the full grid so the fill depends only on the generator state,
    not on the mask shape.
    """
    x = np.asarray(slice_pixels, dtype=np.float64)
    if x.shape != mask.shape:
        raise ValidationError(f"slice shape {x.shape} does not match mask shape {mask.shape}")
    noise = rng.standard_normal(x.shape)
    return np.where(mask.bool_plane, noise, x)


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Generator keyed by (run seed, iteration index).

    Rollback and re-stepping must reproduce the exact noise of a given
    iteration regardless of how many draws happened before it, so each
    iteration gets its own derived stream.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))
