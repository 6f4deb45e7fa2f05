"""On-disk formats: GDAP binary tensors and 8-bit PGM (P5) maps.

GDAP layout: magic ``GDAP``, u8 version (1), u8 dtype (0=float32, 1=float64),
u8 rank, rank × u32 little-endian dims, then row-major little-endian values.
"""

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from error_handler import FormatError, InputError

logger = logging.getLogger(__name__)

GDAP_MAGIC = b"GDAP"
GDAP_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


def write_gdap(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    array = np.asarray(array)
    if array.dtype not in _CODE_FOR_DTYPE:
        array = array.astype(np.float64)
    code = _CODE_FOR_DTYPE[array.dtype]
    header = GDAP_MAGIC + struct.pack("<BBB", GDAP_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes())
    return path


def read_gdap(path: PathLike) -> np.ndarray:
    """Read a GDAP file; the returned array keeps the stored dtype."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing tensor file: {path}")
    raw = path.read_bytes()
    if len(raw) < 7 or raw[:4] != GDAP_MAGIC:
        raise FormatError(f"{path}: bad magic, not a GDAP tensor file")
    version, code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != GDAP_VERSION:
        raise FormatError(f"{path}: unsupported GDAP version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    offset = 7 + 4 * rank
    if len(raw) < offset:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 7)
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape)
    return values.astype(dtype.newbyteorder("="), copy=True)


def write_pgm(path: PathLike, values: np.ndarray) -> Path:
    """Write an H×W uint8 array as binary PGM."""
    path = Path(path)
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"PGM maps are 2-D, got shape {values.shape}")
    if values.dtype != np.uint8:
        if values.min() < 0 or values.max() > 255:
            raise FormatError(f"{path}: values outside 0..255")
        values = values.astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(values).save(path, format="PPM")
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing map file: {path}")
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise FormatError(f"{path}: expected 8-bit grayscale PGM, got mode {img.mode}")
            return np.array(img, dtype=np.uint8)
    except UnidentifiedImageError:
        raise FormatError(f"{path}: not a PGM image")


def write_map_pgm(path: PathLike, attention: np.ndarray) -> Path:
    """Quantize a [0,1] map (or any nonnegative map, rescaled by its max) to 8 bits."""
    attention = np.asarray(attention, dtype=np.float64)
    peak = attention.max() if attention.size else 0.0
    if peak > 1.0:
        attention = attention / peak
    return write_pgm(path, np.rint(np.clip(attention, 0.0, 1.0) * 255.0).astype(np.uint8))


def read_map_pgm(path: PathLike) -> np.ndarray:
    return read_pgm(path).astype(np.float64) / 255.0


def write_binary_pgm(path: PathLike, mask: np.ndarray) -> Path:
    return write_pgm(path, np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8))


def read_binary_pgm(path: PathLike) -> np.ndarray:
    return (read_pgm(path) > 127).astype(np.uint8)
