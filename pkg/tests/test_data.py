"""Volume IO, slice extraction, normalization, brain masks, phantoms."""

import gzip

import numpy as np
import pytest

from maskrefine.data import (
    Slice,
    derive_brain_mask,
    extract_slices,
    load_slice_dataset,
    load_volume,
    normalize_zscore,
    save_slice_dataset,
)
from maskrefine.errors import ValidationError
from maskrefine.masking import SpatialMask
from maskrefine.nifti import write_volume
from maskrefine.phantom import PhantomSpec, generate_phantom, generate_phantom_set


def synthetic_volume(shape=(24, 24, 6), seed=0):
    rng = np.random.default_rng(seed)
    vox = np.zeros(shape)
    for k in range(shape[2]):
        yy, xx = np.mgrid[: shape[0], : shape[1]]
        disk = (yy - shape[0] / 2) ** 2 + (xx - shape[1] / 2) ** 2 <= (shape[0] / 3) ** 2
        vox[:, :, k][disk] = 1.0 + rng.standard_normal(disk.sum()) * 0.2
    return vox


class TestNifti:
    def test_round_trip(self, tmp_path):
        vox = synthetic_volume().astype(np.float32)
        path = tmp_path / "vol.nii.gz"
        write_volume(path, vox)
        loaded = load_volume(path)
        np.testing.assert_allclose(loaded.voxels, vox, rtol=1e-6)
        assert loaded.shape == vox.shape

    def test_uncompressed_round_trip(self, tmp_path):
        vox = synthetic_volume().astype(np.float32)
        path = tmp_path / "vol.nii"
        write_volume(path, vox)
        np.testing.assert_allclose(load_volume(path).voxels, vox, rtol=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_volume(tmp_path / "nope.nii")

    def test_truncated_file(self, tmp_path):
        vox = synthetic_volume().astype(np.float32)
        path = tmp_path / "vol.nii"
        write_volume(path, vox)
        raw = path.read_bytes()
        (tmp_path / "cut.nii").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ValidationError, match="truncated|corrupt"):
            load_volume(tmp_path / "cut.nii")

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "bad.nii.gz"
        path.write_bytes(gzip.compress(b"x" * 400))
        with pytest.raises(ValidationError):
            load_volume(path)

    def test_2d_file_rejected(self, tmp_path):
        # Hand-build a header claiming dim[0] = 2.
        vox = synthetic_volume().astype(np.float32)
        path = tmp_path / "vol.nii"
        write_volume(path, vox)
        raw = bytearray(path.read_bytes())
        import struct

        struct.pack_into("<8h", raw, 40, 2, 24, 24, 1, 1, 1, 1, 1)
        (tmp_path / "flat.nii").write_bytes(bytes(raw))
        with pytest.raises(ValidationError, match="dimensionality"):
            load_volume(tmp_path / "flat.nii")

    def test_header_preserved_for_export(self, tmp_path):
        vox = synthetic_volume().astype(np.float32)
        src = tmp_path / "src.nii"
        write_volume(src, vox)
        loaded = load_volume(src)
        out = tmp_path / "seg.nii.gz"
        write_volume(out, (vox > 0.5).astype(np.uint8), header=loaded.header)
        seg = load_volume(out)
        assert seg.voxels.dtype == np.uint8
        np.testing.assert_array_equal(seg.voxels, (vox > 0.5).astype(np.uint8))


class TestNormalize:
    def test_hand_case(self):
        brain = SpatialMask.from_bool(np.array([[True, True, True]]))
        pixels = np.array([[1.0, 2.0, 3.0]])
        out = normalize_zscore(pixels, brain)
        # mean 2, population std sqrt(2/3): (x-2)/std
        std = np.sqrt(2.0 / 3.0)
        np.testing.assert_allclose(out, (pixels - 2.0) / std)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        plane = rng.standard_normal((16, 16)) + 3
        brain = SpatialMask.from_bool(np.ones((16, 16), dtype=bool))
        once = normalize_zscore(plane, brain)
        twice = normalize_zscore(once, brain)
        assert np.max(np.abs(once - twice)) < 1e-6

    def test_constant_brain_rejected(self):
        brain = SpatialMask.full((4, 4))
        with pytest.raises(ValidationError, match="variance"):
            normalize_zscore(np.ones((4, 4)), brain)

    def test_background_zeroed(self):
        plane = np.arange(16.0).reshape(4, 4)
        brain = SpatialMask.from_bool(plane > 5)
        out = normalize_zscore(plane, brain)
        assert np.all(out[plane <= 5] == 0)
        assert abs(out[brain.bool_plane].mean()) < 1e-9
        assert abs(out[brain.bool_plane].std() - 1) < 1e-9


class TestBrainMask:
    def test_all_zero_is_empty(self):
        assert derive_brain_mask(np.zeros((8, 8))).is_empty

    def test_solid_disk(self):
        yy, xx = np.mgrid[:16, :16]
        disk = (yy - 8) ** 2 + (xx - 8) ** 2 <= 25
        plane = np.where(disk, 2.0, 0.0)
        assert np.array_equal(derive_brain_mask(plane).bool_plane, disk)

    def test_hole_filled_and_largest_component(self):
        yy, xx = np.mgrid[:24, :24]
        disk = (yy - 12) ** 2 + (xx - 12) ** 2 <= 49
        plane = np.where(disk, 1.0, 0.0)
        plane[12, 12] = 0.0  # interior hole
        plane[0, 0] = 3.0  # small spurious component
        mask = derive_brain_mask(plane)
        assert mask.bool_plane[12, 12]
        assert not mask.bool_plane[0, 0]
        assert np.array_equal(mask.bool_plane, disk)


class TestExtractSlices:
    def test_all_zero_volume_empty(self, tmp_path):
        path = tmp_path / "zero.nii"
        write_volume(path, np.zeros((16, 16, 4), dtype=np.float32))
        assert extract_slices(load_volume(path)) == []

    def test_threshold_zero_keeps_all_nonempty(self):
        vox = synthetic_volume()
        from maskrefine.nifti import Volume

        vol = Volume(voxels=vox, affine=np.eye(4), header=b"\x00" * 348)
        slices = extract_slices(vol, min_brain_fraction=0.0)
        assert len(slices) == vox.shape[2]
        for slc in slices:
            assert slc.is_normalized()

    def test_empty_slice_dropped(self):
        vox = synthetic_volume(shape=(24, 24, 3))
        vox[:, :, 1] = 0.0
        from maskrefine.nifti import Volume

        vol = Volume(voxels=vox, affine=np.eye(4), header=b"\x00" * 348)
        slices = extract_slices(vol, min_brain_fraction=0.0)
        assert len(slices) == 2
        assert [s.index for s in slices] == [0, 2]

    def test_count_monotone_in_fraction(self):
        vox = synthetic_volume()
        from maskrefine.nifti import Volume

        vol = Volume(voxels=vox, affine=np.eye(4), header=b"\x00" * 348)
        counts = [
            len(extract_slices(vol, min_brain_fraction=f)) for f in (0.0, 0.1, 0.3, 0.9)
        ]
        assert counts == sorted(counts, reverse=True)


class TestPhantom:
    def test_healthy_has_empty_lesion_mask(self):
        slc, lesion = generate_phantom(PhantomSpec(lesion=False, seed=3))
        assert lesion.is_empty
        assert slc.is_normalized()

    def test_deterministic_per_seed(self):
        a, la = generate_phantom(PhantomSpec(lesion=True, seed=11))
        b, lb = generate_phantom(PhantomSpec(lesion=True, seed=11))
        assert np.array_equal(a.pixels, b.pixels)
        assert la.same_as(lb)
        c, _ = generate_phantom(PhantomSpec(lesion=True, seed=12))
        assert not np.array_equal(a.pixels, c.pixels)

    def test_lesion_radius_5_area_bounds(self):
        # pi * 5^2 ~ 78.5; rasterization keeps it within [60, 100]
        for seed in range(10):
            _, lesion = generate_phantom(
                PhantomSpec(lesion=True, lesion_radius_range=(5.0, 5.0), seed=seed)
            )
            assert 60 <= lesion.area <= 100

    def test_lesion_inside_brain(self):
        for seed in range(5):
            slc, lesion = generate_phantom(PhantomSpec(lesion=True, seed=seed))
            assert lesion.is_subset_of(slc.brain_mask)
            assert lesion.area > 0

    def test_radius_bound_validated(self):
        with pytest.raises(ValidationError):
            PhantomSpec(size=32, lesion_radius_range=(2.0, 8.0))

    def test_dataset_round_trip(self, tmp_path):
        slices, lesions = generate_phantom_set(PhantomSpec(lesion=True, seed=0), 3)
        save_slice_dataset(tmp_path / "ds", slices, lesions)
        loaded, loaded_lesions = load_slice_dataset(tmp_path / "ds")
        assert len(loaded) == 3
        assert loaded_lesions is not None
        for a, b in zip(lesions, loaded_lesions):
            assert a.same_as(b)
        for a, b in zip(slices, loaded):
            np.testing.assert_allclose(a.pixels, b.pixels, atol=1e-6)


class TestSliceType:
    def test_rejects_empty_brain(self):
        with pytest.raises(ValidationError):
            Slice(pixels=np.zeros((4, 4)), brain_mask=SpatialMask.empty((4, 4)))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            Slice(pixels=np.zeros((4, 4)), brain_mask=SpatialMask.full((5, 5)))
