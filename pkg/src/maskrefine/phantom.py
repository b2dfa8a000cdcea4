"""Synthetic brain-slice phantoms for desk-scale training and testing.

A phantom is an elliptical "brain" holding a central nested structure
plus several scattered elliptical blobs at random positions, a smooth
random intensity gradient, and low-amplitude correlated texture noise.
The scattered blobs matter: their positions cannot be guessed from
surrounding context alone, but their boundaries are visible in the
high-frequency guide, which is exactly the regime the reconstruction
models are meant to exploit. Lesion phantoms add one ellipse of offset
intensity whose rasterization is the ground-truth mask.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Slice, normalize_zscore
from .errors import ValidationError
from .masking import SpatialMask


@dataclass(frozen=True)
class PhantomSpec:
    """Generation parameters; every draw is keyed to ``seed``."""

    size: int = 64
    blob_count_range: tuple[int, int] = (4, 8)
    blob_radius_range: tuple[float, float] = (3.0, 9.0)
    blob_contrast_range: tuple[float, float] = (0.7, 1.4)
    central_scale_range: tuple[float, float] = (0.45, 0.6)
    central_contrast_range: tuple[float, float] = (0.3, 0.5)
    gradient_amplitude: float = 0.06
    noise_level: float = 0.065
    noise_smoothness: float = 1.5
    lesion: bool = False
    lesion_offset_range: tuple[float, float] = (2.2, 3.2)
    lesion_radius_range: tuple[float, float] = (4.0, 9.0)
    lesion_edge_width: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValidationError(f"phantom size must be >= 16, got {self.size}")
        if self.lesion_radius_range[1] >= self.size / 4:
            raise ValidationError(
                f"max lesion radius {self.lesion_radius_range[1]} must be < size/4"
            )
        if self.blob_count_range[0] < 0 or self.blob_count_range[1] < self.blob_count_range[0]:
            raise ValidationError(f"invalid blob_count_range {self.blob_count_range}")


def _ellipse_mask(shape, center, semi_axes, angle) -> np.ndarray:
    cy, cx = center
    a, b = semi_axes
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    dy, dx = yy - cy, xx - cx
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Slice, SpatialMask]:
    """Deterministic phantom slice plus its ground-truth lesion mask
    (empty when the lesion toggle is off)."""
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    shape = (size, size)

    brain_center = (size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2))
    brain_axes = (rng.uniform(0.33, 0.42) * size, rng.uniform(0.33, 0.42) * size)
    brain_angle = rng.uniform(0, np.pi)
    brain = _ellipse_mask(shape, brain_center, brain_axes, brain_angle)

    intensity = np.zeros(shape)
    intensity[brain] = 1.0

    # Central nested structure, ventricle-like: darker, centered with jitter.
    central_scale = rng.uniform(*spec.central_scale_range)
    jitter = rng.uniform(-0.04 * size, 0.04 * size, size=2)
    central = _ellipse_mask(
        shape,
        (brain_center[0] + jitter[0], brain_center[1] + jitter[1]),
        (brain_axes[0] * central_scale, brain_axes[1] * central_scale),
        brain_angle + rng.uniform(-0.3, 0.3),
    )
    intensity[central & brain] -= rng.uniform(*spec.central_contrast_range)

    # Scattered blobs at positions that only the guide can reveal.
    interior = ndimage.distance_transform_edt(brain) > 3.0
    candidates = np.argwhere(interior)
    n_blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
    for _ in range(n_blobs):
        by, bx = candidates[rng.integers(len(candidates))]
        radius = rng.uniform(*spec.blob_radius_range)
        ratio = rng.uniform(0.6, 1.4)
        contrast = rng.choice((-1.0, 1.0)) * rng.uniform(*spec.blob_contrast_range)
        blob = _ellipse_mask(
            shape,
            (float(by), float(bx)),
            (radius * ratio, radius / ratio),
            rng.uniform(0, np.pi),
        )
        intensity[blob & brain] += contrast

    gy, gx = rng.uniform(-spec.gradient_amplitude, spec.gradient_amplitude, size=2)
    yy, xx = np.mgrid[:size, :size]
    intensity += gy * (yy - size / 2) / size + gx * (xx - size / 2) / size

    noise = ndimage.gaussian_filter(rng.standard_normal(shape), spec.noise_smoothness)
    noise_std = noise.std()
    if noise_std > 0 and spec.noise_level > 0:
        intensity += noise / noise_std * spec.noise_level

    lesion_mask = np.zeros(shape, dtype=bool)
    if spec.lesion:
        radius = rng.uniform(*spec.lesion_radius_range)
        # Eccentricity that preserves the pi*r^2 area of the rasterized disk.
        ecc = rng.uniform(0.85, 1.15)
        margin = radius + 2.0
        lesion_interior = ndimage.distance_transform_edt(brain) > margin
        lesion_candidates = np.argwhere(lesion_interior)
        if len(lesion_candidates) == 0:
            raise ValidationError(
                f"brain too small to hold a lesion of radius {radius:.1f}"
            )
        ly, lx = lesion_candidates[rng.integers(len(lesion_candidates))]
        lesion_mask = _ellipse_mask(
            shape, (float(ly), float(lx)), (radius * ecc, radius / ecc), rng.uniform(0, np.pi)
        )
        offset = rng.uniform(*spec.lesion_offset_range)
        # Diffuse intensity profile: the offset ramps up over
        # lesion_edge_width pixels of depth inside the ellipse and is exactly
        # zero outside it, so the rasterized ellipse stays the ground truth
        # and the lesion carries only a weak high-frequency signature,
        # unlike the sharp healthy structures.
        depth = ndimage.distance_transform_edt(lesion_mask)
        profile = np.clip(depth / max(spec.lesion_edge_width, 1e-6), 0.0, 1.0)
        intensity += offset * profile

    intensity[~brain] = 0.0
    brain_mask = SpatialMask.from_bool(brain)
    slc = Slice(
        pixels=normalize_zscore(intensity, brain_mask),
        brain_mask=brain_mask,
        subject_id=f"phantom-{spec.seed}",
        index=0,
        modality="phantom",
    )
    return slc, SpatialMask.from_bool(lesion_mask)


def generate_phantom_set(
    spec: PhantomSpec, count: int, seed_offset: int = 0
) -> tuple[list[Slice], list[SpatialMask]]:
    """Generate ``count`` phantoms with consecutive seeds starting at
    ``spec.seed + seed_offset``."""
    slices, lesions = [], []
    for k in range(count):
        slc, lesion = generate_phantom(
            dataclasses.replace(spec, seed=spec.seed + seed_offset + k)
        )
        slices.append(slc)
        lesions.append(lesion)
    return slices, lesions
