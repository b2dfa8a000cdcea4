"""Segmentation and reconstruction metrics.

Dice/sensitivity/precision with explicit empty-set conventions, a
windowed SSIM restricted to windows that never touch the anomaly, lesion
size stratification, and the per-image best-iteration oracle used for
the human-in-the-loop upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.signal import convolve2d

from .errors import ValidationError
from .masking import SpatialMask

SMALL_LESION_MAX = 200  # strictly below -> S
LARGE_LESION_MIN = 800  # strictly above -> L

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _counts(pred: SpatialMask, gt: SpatialMask) -> tuple[int, int, int]:
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    overlap = int((pred.plane & gt.plane).sum())
    return overlap, pred.area, gt.area


def dice(pred: SpatialMask, gt: SpatialMask) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    overlap, p, g = _counts(pred, gt)
    if p + g == 0:
        return 1.0
    return 2.0 * overlap / (p + g)


def sensitivity(pred: SpatialMask, gt: SpatialMask) -> float | None:
    """|P∩G| / |G|; None when the ground truth is empty."""
    overlap, _, g = _counts(pred, gt)
    if g == 0:
        return None
    return overlap / g


def precision(pred: SpatialMask, gt: SpatialMask) -> float | None:
    """|P∩G| / |P|; None when the prediction is empty."""
    overlap, p, _ = _counts(pred, gt)
    if p == 0:
        return None
    return overlap / p


def stratify_size(gt_mask: SpatialMask) -> str:
    """Lesion size stratum: S (<200 px), L (>800 px), else M."""
    if gt_mask.area < SMALL_LESION_MAX:
        return "S"
    if gt_mask.area > LARGE_LESION_MIN:
        return "L"
    return "M"


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = size // 2
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim_excluding_anomaly(
    original: np.ndarray,
    reconstruction: np.ndarray,
    anomaly_mask: SpatialMask,
    brain_mask: SpatialMask,
) -> float:
    """Mean windowed SSIM over brain pixels whose window neither leaves the
    image nor touches the anomaly mask.

    Dynamic range is taken from the original slice's brain intensities.
    """
    x = np.asarray(original, dtype=np.float64)
    y = np.asarray(reconstruction, dtype=np.float64)
    if not (x.shape == y.shape == anomaly_mask.shape == brain_mask.shape):
        raise ValidationError("all SSIM inputs must share one shape")
    if brain_mask.is_empty:
        raise ValidationError("empty brain mask")

    brain_values = x[brain_mask.bool_plane]
    data_range = float(brain_values.max() - brain_values.min())
    if data_range == 0:
        data_range = 1.0
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    window = _gaussian_window()
    mu_x = convolve2d(x, window, mode="valid")
    mu_y = convolve2d(y, window, mode="valid")
    var_x = convolve2d(x * x, window, mode="valid") - mu_x * mu_x
    var_y = convolve2d(y * y, window, mode="valid") - mu_y * mu_y
    cov = convolve2d(x * y, window, mode="valid") - mu_x * mu_y

    ssim_map = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )

    half = SSIM_WINDOW // 2
    # A window "touches" the anomaly when any anomaly pixel lies within it:
    # dilation by the window footprint, evaluated at window centers.
    touched = ndimage.binary_dilation(
        anomaly_mask.bool_plane, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW), dtype=bool)
    )
    qualifying = brain_mask.bool_plane[half:-half, half:-half] & ~touched[half:-half, half:-half]
    if not qualifying.any():
        raise ValidationError("no brain window avoids the anomaly mask")
    return float(ssim_map[qualifying].mean())


def best_iteration_oracle(trace, gt: SpatialMask, tau_schedule) -> tuple[int, float, SpatialMask]:
    """Evaluation-only upper bound: scan every recorded iteration and every
    threshold in the schedule, return the argmax-Dice segmentation.

    Ties keep the earliest (iteration, threshold) pair.
    """
    taus = list(tau_schedule)
    if not trace.states or not taus:
        raise ValidationError("need a nonempty trace and threshold schedule")
    best: tuple[int, float, SpatialMask] | None = None
    for state in trace.states:
        for tau in taus:
            seg = SpatialMask.from_bool(
                state.mask.bool_plane & (state.error_map >= tau)
            )
            score = dice(seg, gt)
            if best is None or score > best[1]:
                best = (state.index, score, seg)
    return best


@dataclass
class ImageMetrics:
    """Per-image row of a metrics report."""

    image_id: str
    dice: float
    sensitivity: float | None
    precision: float | None
    stratum: str
    ssim: float | None = None


@dataclass
class MetricsReport:
    """Aggregated segmentation metrics, rates in percent."""

    per_image: list[ImageMetrics] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return 100.0 * float(np.mean([m.dice for m in self.per_image]))

    @property
    def mean_sensitivity(self) -> float | None:
        vals = [m.sensitivity for m in self.per_image if m.sensitivity is not None]
        return 100.0 * float(np.mean(vals)) if vals else None

    @property
    def mean_precision(self) -> float | None:
        vals = [m.precision for m in self.per_image if m.precision is not None]
        return 100.0 * float(np.mean(vals)) if vals else None

    @property
    def mean_ssim(self) -> float | None:
        vals = [m.ssim for m in self.per_image if m.ssim is not None]
        return float(np.mean(vals)) if vals else None

    def stratified_dice(self) -> dict[str, tuple[float | None, int]]:
        out: dict[str, tuple[float | None, int]] = {}
        for stratum in ("S", "M", "L"):
            vals = [m.dice for m in self.per_image if m.stratum == stratum]
            out[stratum] = (100.0 * float(np.mean(vals)) if vals else None, len(vals))
        return out

    def to_dict(self) -> dict:
        strata = self.stratified_dice()
        return {
            "mean": {
                "dice": self.mean_dice,
                "sensitivity": self.mean_sensitivity,
                "precision": self.mean_precision,
                "ssim": self.mean_ssim,
            },
            "stratified_dice": {
                k: {"dice": v[0], "count": v[1]} for k, v in strata.items()
            },
            "per_image": [
                {
                    "image_id": m.image_id,
                    "dice": m.dice,
                    "sensitivity": m.sensitivity,
                    "precision": m.precision,
                    "stratum": m.stratum,
                    "ssim": m.ssim,
                }
                for m in self.per_image
            ],
        }

    def to_text(self) -> str:
        def fmt(v, scale=1.0):
            return "  n/a" if v is None else f"{v * scale:5.1f}"

        strata = self.stratified_dice()
        lines = [
            "metric      value",
            f"DSC         {fmt(self.mean_dice)}",
            f"Sens.       {fmt(self.mean_sensitivity)}",
            f"Prec.       {fmt(self.mean_precision)}",
            f"SSIM        {'  n/a' if self.mean_ssim is None else f'{self.mean_ssim:0.3f}'}",
        ]
        for stratum in ("S", "M", "L"):
            value, count = strata[stratum]
            lines.append(f"DS_{stratum} (n={count:3d}) {fmt(value)}")
        return "\n".join(lines)


def evaluate_segmentations(
    predictions: list[SpatialMask],
    ground_truths: list[SpatialMask],
    image_ids: list[str] | None = None,
    ssims: list[float | None] | None = None,
) -> MetricsReport:
    if len(predictions) != len(ground_truths):
        raise ValidationError("predictions and ground truths differ in length")
    report = MetricsReport()
    for i, (pred, gt) in enumerate(zip(predictions, ground_truths)):
        report.per_image.append(
            ImageMetrics(
                image_id=image_ids[i] if image_ids else str(i),
                dice=dice(pred, gt),
                sensitivity=sensitivity(pred, gt),
                precision=precision(pred, gt),
                stratum=stratify_size(gt),
                ssim=ssims[i] if ssims else None,
            )
        )
    return report
