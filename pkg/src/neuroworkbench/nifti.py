"""Minimal single-file NIfTI-1 reader/writer.

Supported subset: little-endian ``n+1`` files, datatypes uint8 (2), int16 (4)
and float32 (16), sform (``srow_x/y/z``) affines that are axis-aligned, no
gzip. Every header field other than ``dim``, ``pixdim``, ``datatype``,
``bitpix``, ``vox_offset``, ``sform_code`` and the srows is written as zero.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .volume import DTYPES, FormatError, UnsupportedError, VoxelVolume, check_axis_aligned

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

_CODE_TO_DTYPE = {2: "uint8", 4: "int16", 16: "float32"}
_DTYPE_TO_CODE = {v: k for k, v in _CODE_TO_DTYPE.items()}


class NiftiIOError(OSError):
    pass


def encode_volume(volume: VoxelVolume) -> bytes:
    header = bytearray(VOX_OFFSET)
    dtype = volume.dtype
    itemsize = DTYPES[dtype].itemsize
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *volume.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", header, 70, _DTYPE_TO_CODE[dtype], itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<h", header, 254, 1)
    for row in range(3):
        struct.pack_into("<4f", header, 280 + 16 * row, *volume.affine[row])
    header[344:348] = MAGIC
    data = np.ascontiguousarray(volume.data.astype(DTYPES[dtype].newbyteorder("<")).ravel(order="F"))
    return bytes(header) + data.tobytes()


def decode_volume(raw: bytes) -> VoxelVolume:
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(f"sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} (little-endian only)")
    if raw[344:348] != MAGIC:
        raise FormatError(f"bad magic {raw[344:348]!r}")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3 and not (dim[0] > 3 and all(d == 1 for d in dim[4 : dim[0] + 1])):
        raise UnsupportedError(f"only 3D volumes are supported (dim[0]={dim[0]})")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise FormatError(f"invalid dims {dims}")
    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedError(f"unsupported datatype code {code}")
    dtype = DTYPES[_CODE_TO_DTYPE[code]]
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(vox_offset)
    if offset < HEADER_SIZE:
        raise FormatError(f"vox_offset {vox_offset} inside header")
    affine = np.array([struct.unpack_from("<4f", raw, 280 + 16 * r) for r in range(3)], dtype=np.float64)
    check_axis_aligned(affine)
    spacing = np.abs(affine[:, :3]).sum(axis=0)
    if not np.allclose(spacing, pixdim[1:4], rtol=1e-5, atol=1e-6):
        raise UnsupportedError(f"srow spacing {tuple(spacing)} disagrees with pixdim {pixdim[1:4]}")
    count = dims[0] * dims[1] * dims[2]
    expected = count * dtype.itemsize
    body = raw[offset:]
    if len(body) != expected:
        raise FormatError(f"data section is {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype=dtype.newbyteorder("<")).astype(dtype)
    return VoxelVolume(data.reshape(dims, order="F"), affine)


def read_volume(path: str | os.PathLike) -> VoxelVolume:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise NiftiIOError(f"cannot read {path}: {exc}") from exc
    return decode_volume(raw)


def write_volume(volume: VoxelVolume, path: str | os.PathLike) -> None:
    payload = encode_volume(volume)
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise NiftiIOError(f"cannot write {path}: {exc}") from exc
