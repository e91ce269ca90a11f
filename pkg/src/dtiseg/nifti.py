"""Minimal single-file NIfTI-1 reader/writer.

Supported subset: uncompressed .nii, magic "n+1\\0", datatypes uint8 (2),
int16 (4), float32 (16), 3-D or 4-D volumes. Voxel sizes come from
pixdim[1..3]; orientation matrices are ignored. Little-endian files are
written; both byte orders are accepted on read.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UnsupportedError

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16), np.dtype(np.float32): (16, 32)}


@dataclass
class VolumeMeta:
    dims: tuple[int, ...]
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    datatype: np.dtype = np.dtype(np.float32)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        self.datatype = np.dtype(self.datatype)
        if len(self.dims) not in (3, 4):
            raise ValueError(f"dims must have 3 or 4 entries, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if len(self.voxel_size_mm) != 3 or any(v <= 0 for v in self.voxel_size_mm):
            raise ValueError(f"voxel sizes must be 3 positive reals, got {self.voxel_size_mm}")
        if self.datatype not in _CODES:
            raise UnsupportedError(f"unsupported datatype {self.datatype}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))


def write_nifti(path, meta: VolumeMeta, voxels: np.ndarray) -> None:
    """Write a volume as little-endian single-file .nii.

    ``voxels`` is indexed (x, y, z[, c]) and stored x-fastest as NIfTI
    requires.
    """
    voxels = np.asarray(voxels, dtype=meta.datatype)
    if voxels.shape != meta.dims:
        raise ValueError(f"voxel array shape {voxels.shape} != meta dims {meta.dims}")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    ndim = len(meta.dims)
    dim = [ndim] + list(meta.dims) + [1] * (7 - ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    code, bitpix = _CODES[meta.datatype]
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = [1.0] + list(meta.voxel_size_mm) + [1.0] * (7 - 3)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    hdr[344:348] = MAGIC
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(np.asfortranarray(voxels).tobytes(order="F"))


def read_nifti(path) -> tuple[VolumeMeta, np.ndarray]:
    """Read a .nii file; returns (meta, voxels indexed (x, y, z[, c]))."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the 348-byte NIfTI-1 header")
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise FormatError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        order = ">"
    if raw[344:348] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[344:348]!r}, expected {MAGIC!r}")
    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    if datatype not in _DTYPES:
        raise UnsupportedError(f"{path}: unsupported NIfTI datatype code {datatype}")
    ndim = dim[0]
    if ndim not in (3, 4):
        raise UnsupportedError(f"{path}: only 3-D/4-D volumes supported, dim[0]={ndim}")
    dims = tuple(dim[1:1 + ndim])
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {offset} overlaps the header")
    n = int(np.prod(dims))
    payload = raw[offset:offset + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise IOError(f"{path}: truncated payload, expected {n * dtype.itemsize} bytes "
                      f"after offset {offset}, found {len(payload)}")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    voxels = np.ascontiguousarray(voxels, dtype=dtype.newbyteorder("="))
    meta = VolumeMeta(dims=dims, voxel_size_mm=tuple(pixdim[1:4]),
                      datatype=voxels.dtype)
    return meta, voxels
