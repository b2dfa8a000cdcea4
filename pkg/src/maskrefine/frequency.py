"""Fourier-domain decomposition and high-pass amplitude masking.

The structural guide image is obtained by zeroing all amplitude bins
within a radius of the spectrum center (DC) while keeping every phase
value, then inverting the transform. What survives are edges and fine
outlines; absolute intensity content is gone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_HIGH_PASS_RADIUS = 15.0

# Max tolerated imaginary residue after the inverse transform of
# components that came from a real image.
_IMAG_RESIDUE_TOL = 1e-6


@dataclass(frozen=True)
class FrequencyComponents:
    """Amplitude and phase planes of a center-shifted 2D spectrum.

    The DC bin sits at ``(H // 2, W // 2)``. Phase values lie in
    (-pi, pi].
    """

    amplitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.float64)
        ph = np.asarray(self.phase, dtype=np.float64)
        if amp.ndim != 2 or ph.shape != amp.shape:
            raise ValidationError(
                f"amplitude/phase must be equal-shaped 2D planes, got "
                f"{amp.shape} and {ph.shape}"
            )
        if np.any(amp < 0):
            raise ValidationError("amplitude must be non-negative everywhere")
        if not (np.all(np.isfinite(amp)) and np.all(np.isfinite(ph))):
            raise ValidationError("non-finite values in frequency components")
        amp.flags.writeable = False
        ph.flags.writeable = False
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "phase", ph)

    @property
    def height(self) -> int:
        return self.amplitude.shape[0]

    @property
    def width(self) -> int:
        return self.amplitude.shape[1]

    @property
    def center(self) -> tuple[int, int]:
        """Index of the DC bin in the shifted spectrum."""
        return self.height // 2, self.width // 2


@dataclass(frozen=True)
class HighPassFilter:
    """Hard suppression disk: amplitude bins strictly closer than
    ``radius`` to ``center`` are zeroed. Radius 0 suppresses nothing."""

    radius: float
    center: tuple[int, int]

    def __post_init__(self):
        if self.radius < 0:
            raise ValidationError(f"filter radius must be >= 0, got {self.radius}")

    @classmethod
    def for_components(cls, components: FrequencyComponents, radius: float) -> "HighPassFilter":
        return cls(radius=radius, center=components.center)


def decompose(slice_pixels: np.ndarray) -> FrequencyComponents:
    """2D DFT of a real slice, split into amplitude and phase.

    The spectrum is center-shifted so the DC term sits at
    ``(H // 2, W // 2)``.
    """
    x = np.asarray(slice_pixels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValidationError(f"expected a 2D plane of at least 2x2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("slice contains non-finite values")
    spectrum = np.fft.fftshift(np.fft.fft2(x))
    amplitude = np.abs(spectrum)
    phase = np.angle(spectrum)
    # np.angle can emit exactly -pi (arctan2 of a negative-zero imaginary
    # part); fold it onto +pi so phase stays within (-pi, pi].
    phase = np.where(phase == -np.pi, np.pi, phase)
    return FrequencyComponents(amplitude=amplitude, phase=phase)


def apply_high_pass(
    components: FrequencyComponents, hp_filter: HighPassFilter
) -> FrequencyComponents:
    """Zero every amplitude bin with Euclidean distance < radius from the
    spectrum center; phase is passed through untouched."""
    if hp_filter.center != components.center:
        raise ValidationError(
            f"filter center {hp_filter.center} does not match the spectrum "
            f"center {components.center} of a {components.height}x{components.width} plane"
        )
    cy, cx = hp_filter.center
    yy, xx = np.ogrid[: components.height, : components.width]
    dist = np.hypot(yy - cy, xx - cx)
    amplitude = np.where(dist < hp_filter.radius, 0.0, components.amplitude)
    return FrequencyComponents(amplitude=amplitude, phase=components.phase.copy())


def recompose(components: FrequencyComponents) -> np.ndarray:
    """Inverse transform of amplitude * exp(j * phase) back to image space.

    Components derived from real images give a negligible imaginary residue,
    which is discarded; a residue >= 1e-6 means the spectrum was not
    conjugate-symmetric and is treated as an internal error.
    """
    spectrum = components.amplitude * np.exp(1j * components.phase)
    image = np.fft.ifft2(np.fft.ifftshift(spectrum))
    residue = np.max(np.abs(image.imag))
    if residue >= _IMAG_RESIDUE_TOL:
        raise ValidationError(
            f"imaginary residue {residue:.3e} after inverse transform; "
            "components do not describe a real image"
        )
    return np.ascontiguousarray(image.real)


def structural_guide(slice_pixels: np.ndarray, radius: float = DEFAULT_HIGH_PASS_RADIUS) -> np.ndarray:
    """High-frequency guide image: decompose, suppress low-frequency
    amplitude inside ``radius``, recompose."""
    components = decompose(slice_pixels)
    filtered = apply_high_pass(components, HighPassFilter.for_components(components, radius))
    return recompose(filtered)
