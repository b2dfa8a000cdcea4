"""Slice model, intensity normalization, brain-mask derivation, and
volume-to-slice extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .masking import SpatialMask
from .nifti import Volume, load_volume

__all__ = [
    "Slice",
    "Volume",
    "derive_brain_mask",
    "extract_slices",
    "load_volume",
    "normalize_zscore",
]

# Acceptable z-score drift for a slice to count as normalized.
NORMALIZED_MEAN_RANGE = (-0.5, 0.5)
NORMALIZED_STD_RANGE = (0.5, 1.5)


@dataclass
class Slice:
    """One normalized 2D image with its brain mask and provenance."""

    pixels: np.ndarray
    brain_mask: SpatialMask
    subject_id: str = ""
    index: int = 0
    modality: str = ""

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValidationError(f"slice pixels must be 2D, got shape {pixels.shape}")
        if pixels.shape != self.brain_mask.shape:
            raise ValidationError(
                f"pixel shape {pixels.shape} does not match brain mask {self.brain_mask.shape}"
            )
        if self.brain_mask.is_empty:
            raise ValidationError("retained slices must have a nonempty brain mask")
        pixels.flags.writeable = False
        self.pixels = pixels

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def brain_values(self) -> np.ndarray:
        return self.pixels[self.brain_mask.plane == 1]

    def is_normalized(self) -> bool:
        values = self.brain_values()
        mean, std = float(values.mean()), float(values.std())
        return (
            NORMALIZED_MEAN_RANGE[0] <= mean <= NORMALIZED_MEAN_RANGE[1]
            and NORMALIZED_STD_RANGE[0] <= std <= NORMALIZED_STD_RANGE[1]
        )


def normalize_zscore(pixels: np.ndarray, brain_mask: SpatialMask) -> np.ndarray:
    """Standardize intensities to mean 0 / std 1 over brain pixels;
    background is set to 0."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.shape != brain_mask.shape:
        raise ValidationError(f"pixel shape {x.shape} does not match mask {brain_mask.shape}")
    if brain_mask.is_empty:
        raise ValidationError("cannot normalize with an empty brain mask")
    inside = brain_mask.bool_plane
    values = x[inside]
    std = values.std()
    if std == 0:
        raise ValidationError("zero intensity variance over the brain mask")
    out = np.zeros_like(x)
    out[inside] = (values - values.mean()) / std
    return out


def derive_brain_mask(pixels: np.ndarray) -> SpatialMask:
    """Brain support of a skull-stripped slice: nonzero pixels, reduced to
    the largest connected component, holes filled. May be empty."""
    x = np.asarray(pixels)
    nonzero = x != 0
    if not nonzero.any():
        return SpatialMask.from_bool(nonzero)
    labels, count = ndimage.label(nonzero)
    if count > 1:
        sizes = ndimage.sum_labels(nonzero, labels, index=np.arange(1, count + 1))
        nonzero = labels == (int(np.argmax(sizes)) + 1)
    filled = ndimage.binary_fill_holes(nonzero)
    return SpatialMask.from_bool(filled)


def extract_slices(
    volume: Volume,
    axis: int = 2,
    min_brain_fraction: float = 0.05,
    subject_id: str = "",
    modality: str = "",
) -> list[Slice]:
    """Cut a volume into normalized 2D slices along ``axis``, keeping those
    whose brain mask covers at least ``min_brain_fraction`` of the plane."""
    voxels = np.asarray(volume.voxels, dtype=np.float64)
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    slices: list[Slice] = []
    for i in range(voxels.shape[axis]):
        plane = np.take(voxels, i, axis=axis)
        brain = derive_brain_mask(plane)
        if brain.area < min_brain_fraction * plane.size or brain.is_empty:
            continue
        if plane[brain.bool_plane].std() == 0:
            continue
        slices.append(
            Slice(
                pixels=normalize_zscore(plane, brain),
                brain_mask=brain,
                subject_id=subject_id or "volume",
                index=i,
                modality=modality,
            )
        )
    return slices


def save_slice_dataset(directory: str | Path, slices, lesion_masks=None) -> Path:
    """Persist slices (and optional ground-truth lesion masks) as one .npz
    per slice plus a manifest.json."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, slc in enumerate(slices):
        name = f"slice_{i:05d}.npz"
        payload = {
            "pixels": slc.pixels.astype(np.float32),
            "brain_mask": slc.brain_mask.plane,
        }
        if lesion_masks is not None:
            payload["lesion_mask"] = lesion_masks[i].plane
        np.savez_compressed(directory / name, **payload)
        entries.append(
            {
                "file": name,
                "subject_id": slc.subject_id,
                "index": slc.index,
                "modality": slc.modality,
                "brain_area": slc.brain_mask.area,
                "lesion_area": int(lesion_masks[i].area) if lesion_masks is not None else None,
            }
        )
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"slices": entries}, indent=2))
    return manifest


def load_slice_dataset(directory: str | Path):
    """Load a dataset written by save_slice_dataset.

    Returns (slices, lesion_masks); lesion_masks is None when the dataset
    was saved without ground truth.
    """
    import json

    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    slices, lesions = [], []
    has_lesions = False
    for entry in manifest["slices"]:
        with np.load(directory / entry["file"]) as npz:
            brain = SpatialMask(npz["brain_mask"])
            slices.append(
                Slice(
                    pixels=npz["pixels"].astype(np.float64),
                    brain_mask=brain,
                    subject_id=entry.get("subject_id", ""),
                    index=entry.get("index", 0),
                    modality=entry.get("modality", ""),
                )
            )
            if "lesion_mask" in npz:
                has_lesions = True
                lesions.append(SpatialMask(npz["lesion_mask"]))
            else:
                lesions.append(SpatialMask.empty(brain.shape))
    return slices, (lesions if has_lesions else None)
