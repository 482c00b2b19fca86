"""On-disk formats: CRDT v1 tensor blobs and binary netpbm rasters.

CRDT v1 layout::

    b"CRDT" | version u8 = 1 | dtype u8 (0 = float32, 1 = float64) | ndim u8 = 4
    | four u32 LE dims | row-major LE payload
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError

MAGIC = b"CRDT"
VERSION = 1
_HEADER = struct.Struct("<4sBBB4I")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

PathLike = Union[str, os.PathLike]

# background, CSF-like, GM-like, WM-like
PALETTE = np.array([[0, 0, 0], [255, 255, 255], [0, 170, 0], [240, 210, 0]], dtype=np.uint8)


def as_4d(arr: np.ndarray) -> np.ndarray:
    """Left-pad the shape with ones up to four dimensions."""
    if arr.ndim > 4:
        raise FormatError(f"CRDT stores at most 4 dimensions, got shape {arr.shape}")
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"CRDT supports float32/float64, got {arr.dtype}")
    arr4 = as_4d(arr)
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[arr.dtype], 4, *arr4.shape)
    payload = np.ascontiguousarray(arr4, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def read_tensor_from(stream: BinaryIO, source: str = "<stream>") -> np.ndarray:
    raw = stream.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{source}: truncated CRDT header")
    magic, version, code, ndim, *dims = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported CRDT version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    if ndim != 4:
        raise FormatError(f"{source}: ndim must be 4, got {ndim}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims))
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{source}: truncated payload ({len(payload)} of {count * dtype.itemsize} bytes)")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    stream = io.BytesIO(blob)
    arr = read_tensor_from(stream, source)
    if stream.read(1):
        raise FormatError(f"{source}: trailing bytes after CRDT payload")
    return arr


def write_tensor(path: PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read(), str(path))


# ---------------------------------------------------------------- netpbm

def write_pgm(path: PathLike, image: np.ndarray, maxval: int = 255) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got shape {image.shape}")
    if image.min() < 0 or image.max() > maxval:
        raise FormatError(f"PGM values must lie in [0, {maxval}]")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(image.astype(np.uint8).tobytes())


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError(f"PPM needs an (h, w, 3) array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def _read_header_tokens(data: bytes, count: int, source: str) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def _read_netpbm(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    source = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _read_header_tokens(data, 4, source)
    if tokens[0] != magic:
        raise FormatError(f"{source}: expected {magic.decode()} netpbm, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{source}: non-numeric netpbm header") from None
    if maxval < 1 or maxval > 255:
        raise FormatError(f"{source}: only 8-bit netpbm is supported (maxval {maxval})")
    need = w * h * channels
    raster = data[offset : offset + need]
    if len(raster) != need:
        raise FormatError(f"{source}: truncated raster ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_pgm(path: PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path: PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def colorize(labels: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.max(initial=0) >= len(palette):
        raise FormatError(f"label {labels.max()} has no palette entry")
    return palette[labels]
