"""Binary tensor containers.

``NDT1`` layout: ``b"NDT1"``, u8 dtype code, u8 rank, rank x u64 little-endian
dims, then raw little-endian row-major data.

``VOXB`` layout: ``b"VOXB"``, 3 x u16 little-endian dims, then the row-major
occupancy bits packed MSB-first into bytes.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, FormatError, TruncatedFileError, ValidationError

NDT_MAGIC = b"NDT1"
VOXB_MAGIC = b"VOXB"

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}
_CODE_FOR_DTYPE = {dt: code for code, dt in DTYPE_CODES.items()}


def encode_ndt(array):
    arr = np.asarray(array)
    code = _CODE_FOR_DTYPE.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise ValidationError(f"unsupported dtype for NDT1: {arr.dtype}")
    if arr.ndim > 255:
        raise ValidationError("rank too large for NDT1")
    header = NDT_MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + payload


def decode_ndt(buf, name="<bytes>"):
    """Parse one NDT1 blob; ``name`` is only used in error messages."""
    if len(buf) < 6:
        raise TruncatedFileError(f"{name}: file too short for an NDT1 header")
    if buf[:4] != NDT_MAGIC:
        raise FormatError(f"{name}: bad magic {bytes(buf[:4])!r}, expected {NDT_MAGIC!r}")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    head = 6 + 8 * rank
    if len(buf) < head:
        raise TruncatedFileError(f"{name}: header truncated")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    dtype = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < head + nbytes:
        raise TruncatedFileError(f"{name}: expected {nbytes} data bytes, found {len(buf) - head}")
    if len(buf) > head + nbytes:
        raise FormatError(f"{name}: {len(buf) - head - nbytes} trailing bytes after tensor data")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=head).reshape(dims).copy()


def encode_voxb(grid):
    arr = np.asarray(grid)
    if arr.ndim != 3:
        raise ValidationError(f"VOXB stores 3-D grids, got rank {arr.ndim}")
    if any(d > 0xFFFF for d in arr.shape):
        raise ValidationError("VOXB dims must fit in u16")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError("VOXB stores binary occupancy only")
    bits = np.packbits(arr.astype(np.uint8).ravel(), bitorder="big")
    return VOXB_MAGIC + struct.pack("<3H", *arr.shape) + bits.tobytes()


def decode_voxb(buf, name="<bytes>"):
    if len(buf) < 10:
        raise TruncatedFileError(f"{name}: file too short for a VOXB header")
    if buf[:4] != VOXB_MAGIC:
        raise FormatError(f"{name}: bad magic {bytes(buf[:4])!r}, expected {VOXB_MAGIC!r}")
    dims = struct.unpack_from("<3H", buf, 4)
    n = int(np.prod(dims))
    nbytes = (n + 7) // 8
    if len(buf) < 10 + nbytes:
        raise TruncatedFileError(f"{name}: expected {nbytes} packed bytes, found {len(buf) - 10}")
    if len(buf) > 10 + nbytes:
        raise FormatError(f"{name}: trailing bytes after packed data")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=10), count=n, bitorder="big")
    return bits.reshape(dims).astype(np.float32)


def _check_shape(arr, expected_shape, path):
    if expected_shape is not None and tuple(arr.shape) != tuple(expected_shape):
        raise DimensionMismatchError(f"{path}: tensor has shape {tuple(arr.shape)}, expected {tuple(expected_shape)}")
    return arr


def save_ndt(path, array):
    Path(path).write_bytes(encode_ndt(array))


def load_ndt(path, expected_shape=None):
    return _check_shape(decode_ndt(Path(path).read_bytes(), name=str(path)), expected_shape, path)


def save_voxb(path, grid):
    Path(path).write_bytes(encode_voxb(grid))


def load_voxb(path, expected_shape=None):
    return _check_shape(decode_voxb(Path(path).read_bytes(), name=str(path)), expected_shape, path)


def load_tensor(path, expected_shape=None):
    """Load either container, dispatching on the magic bytes."""
    buf = Path(path).read_bytes()
    if buf[:4] == VOXB_MAGIC:
        arr = decode_voxb(buf, name=str(path))
    else:
        arr = decode_ndt(buf, name=str(path))
    return _check_shape(arr, expected_shape, path)
