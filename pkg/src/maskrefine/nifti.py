"""Minimal single-file NIfTI-1 reader/writer.

Covers what the pipeline needs: 3D volumes (or 4D with size-1 tail),
the common scalar dtypes, scl slope/intercept, and header retention so
segmentations can be exported in the source geometry. Written against
the NIfTI-1 field layout; no external imaging library is required.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Volume:
    """Voxel array plus the affine and raw header it was read with."""

    voxels: np.ndarray
    affine: np.ndarray
    header: bytes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.voxels.shape


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_volume(path: str | Path) -> Volume:
    """Read a .nii / .nii.gz file into a Volume.

    Raises ValidationError for missing/corrupt files and for anything
    that is not a 3D scalar volume.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"no such file: {path}")
    try:
        raw = _read_bytes(path)
    except (OSError, gzip.BadGzipFile) as exc:
        raise ValidationError(f"unreadable file {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise ValidationError(f"corrupt NIfTI file {path}: shorter than the header")

    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise ValidationError(f"corrupt NIfTI file {path}: bad sizeof_hdr")

    magic = raw[344:348]
    if magic == _MAGIC_PAIR:
        raise ValidationError(f"{path}: two-file NIfTI pairs are not supported")
    if magic != _MAGIC_SINGLE:
        raise ValidationError(f"corrupt NIfTI file {path}: bad magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise ValidationError(f"corrupt NIfTI file {path}: dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    # Tolerate 4D/5D files that are really 3D with trailing singleton axes.
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3:
        raise ValidationError(
            f"unsupported dimensionality in {path}: expected a 3D volume, got shape {shape}"
        )

    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _DTYPES:
        raise ValidationError(f"unsupported NIfTI datatype code {datatype} in {path}")
    dtype = _DTYPES[datatype].newbyteorder(endian)

    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    offset = int(round(vox_offset))

    n_bytes = int(np.prod(shape)) * dtype.itemsize
    data = raw[offset : offset + n_bytes]
    if len(data) < n_bytes:
        raise ValidationError(f"corrupt NIfTI file {path}: truncated voxel data")
    voxels = np.frombuffer(data, dtype=dtype).reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        voxels = voxels.astype(np.float64) * (scl_slope or 1.0) + scl_inter
    else:
        voxels = np.asarray(voxels)

    affine = _affine_from_header(raw, endian, pixdim)
    return Volume(voxels=voxels, affine=affine, header=raw[:HEADER_SIZE])


def _affine_from_header(raw: bytes, endian: str, pixdim) -> np.ndarray:
    (sform_code,) = struct.unpack_from(endian + "h", raw, 254)
    affine = np.eye(4)
    if sform_code > 0:
        for row, off in enumerate((280, 296, 312)):
            affine[row, :] = struct.unpack_from(endian + "4f", raw, off)
    else:
        affine[0, 0] = pixdim[1] or 1.0
        affine[1, 1] = pixdim[2] or 1.0
        affine[2, 2] = pixdim[3] or 1.0
    return affine


def _default_header(shape: tuple[int, ...], dtype: np.dtype) -> bytes:
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [3, *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, _DTYPE_CODES[dtype])
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = _MAGIC_SINGLE
    return bytes(header)


def write_volume(
    path: str | Path, voxels: np.ndarray, header: bytes | None = None
) -> None:
    """Write a 3D array as single-file NIfTI-1, gzipped when the path ends
    in .gz. When a source header is given its geometry fields are kept and
    only dims/datatype/offset are patched."""
    path = Path(path)
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValidationError(f"expected a 3D array to write, got shape {voxels.shape}")
    dtype = voxels.dtype
    if dtype not in _DTYPE_CODES:
        voxels = voxels.astype(np.float32)
        dtype = voxels.dtype

    if header is None:
        hdr = bytearray(_default_header(voxels.shape, dtype))
    else:
        if len(header) != HEADER_SIZE:
            raise ValidationError("source header must be exactly 348 bytes")
        hdr = bytearray(header)
        dim = [3, *voxels.shape] + [1] * (7 - voxels.ndim)
        struct.pack_into("<8h", hdr, 40, *dim)
        struct.pack_into("<h", hdr, 70, _DTYPE_CODES[dtype])
        struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
        struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
        struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
        hdr[344:348] = _MAGIC_SINGLE

    payload = bytes(hdr) + b"\x00\x00\x00\x00" + voxels.tobytes(order="F")
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(payload))
    else:
        path.write_bytes(payload)
