"""Raster and feature-map value types plus their on-disk formats.

Images and feature maps are plain numpy arrays:

* an image is ``(H, W, 3)`` float64 with values in ``[0, 1]``
* a feature map is ``(H, W, n)`` float64, finite

Both use row-major, channel-fastest layout, so the flat index of
``(r, c, k)`` is ``(r * W + c) * n + k``.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

DVF_MAGIC = b"DVF1"
DVF_HEADER = struct.Struct("<4sIII")


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class FormatError(ValueError):
    """A byte stream does not follow the expected file format."""


class DataError(ValueError):
    """A decoded payload contains values the library refuses to carry."""


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractError(f"image must be HxWx3 with H, W >= 1, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ContractError("image values must lie in [0, 1]")
    return img


def as_feature_map(data) -> np.ndarray:
    fmap = np.asarray(data, dtype=np.float64)
    if fmap.ndim != 3 or min(fmap.shape) < 1:
        raise ContractError(f"feature map must be HxWxn with every axis >= 1, got {fmap.shape}")
    if not np.all(np.isfinite(fmap)):
        raise DataError("feature map contains non-finite values")
    return fmap


def flat_index(shape: tuple[int, int, int], row: int, col: int, k: int) -> int:
    _, width, dim = shape
    return (row * width + col) * dim + k


def feature_at(fmap: np.ndarray, row: int, col: int) -> np.ndarray:
    """Return the descriptor stored at cell ``(row, col)``."""
    height, width = fmap.shape[:2]
    if not (0 <= row < height and 0 <= col < width):
        raise IndexError(f"cell ({row}, {col}) outside {height}x{width} map")
    return fmap[row, col]


def cells(fmap: np.ndarray) -> np.ndarray:
    """View a map as an ``(H*W, n)`` matrix of descriptors."""
    return fmap.reshape(-1, fmap.shape[-1])


def save_feature_map(fmap: np.ndarray, sink: BinaryIO) -> int:
    fmap = as_feature_map(fmap)
    height, width, dim = fmap.shape
    payload = np.ascontiguousarray(fmap, dtype="<f4").tobytes()
    written = sink.write(DVF_HEADER.pack(DVF_MAGIC, height, width, dim))
    written += sink.write(payload)
    return written


def load_feature_map(source: BinaryIO) -> np.ndarray:
    header = source.read(DVF_HEADER.size)
    if len(header) < DVF_HEADER.size:
        raise FormatError("truncated DVF1 header")
    magic, height, width, dim = DVF_HEADER.unpack(header)
    if magic != DVF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DVF_MAGIC!r}")
    if min(height, width, dim) < 1:
        raise FormatError(f"invalid dimensions {height}x{width}x{dim}")
    expected = height * width * dim * 4
    payload = source.read(expected)
    if len(payload) != expected:
        raise FormatError(f"payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise DataError("DVF1 payload contains non-finite values")
    return values.astype(np.float64).reshape(height, width, dim)


def feature_map_to_bytes(fmap: np.ndarray) -> bytes:
    buf = io.BytesIO()
    save_feature_map(fmap, buf)
    return buf.getvalue()


def feature_map_from_bytes(data: bytes) -> np.ndarray:
    return load_feature_map(io.BytesIO(data))


# --- PPM -------------------------------------------------------------------

def _ppm_tokens(source: BinaryIO, count: int) -> list[bytes]:
    # header tokens are whitespace separated; '#' starts a comment up to EOL
    tokens: list[bytes] = []
    current = b""
    while len(tokens) < count:
        ch = source.read(1)
        if not ch:
            raise FormatError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b"\r", b""):
                ch = source.read(1)
            ch = b"\n"
        if ch.isspace():
            if current:
                tokens.append(current)
                current = b""
        else:
            current += ch
    return tokens


def load_image_ppm(source: BinaryIO) -> np.ndarray:
    """Read a binary (P6) PPM with maxval 255 into a unit-interval image."""
    magic, w, h, maxval = _ppm_tokens(source, 4)
    if magic != b"P6":
        raise FormatError(f"bad PPM magic {magic!r}")
    try:
        width, height, maxval_i = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("non-numeric PPM header field") from exc
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM size {width}x{height}")
    if maxval_i != 255:
        raise FormatError(f"unsupported maxval {maxval_i}")
    n = width * height * 3
    raw = source.read(n)
    if len(raw) != n:
        raise FormatError(f"PPM pixel data has {len(raw)} bytes, expected {n}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3) / 255.0


def image_to_bytes_u8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image_ppm(img: np.ndarray, sink: BinaryIO) -> int:
    img = as_image(img)
    height, width = img.shape[:2]
    written = sink.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
    written += sink.write(image_to_bytes_u8(img).tobytes())
    return written


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_image_ppm(fh)


def write_ppm(path, img: np.ndarray) -> int:
    with open(path, "wb") as fh:
        return save_image_ppm(img, fh)
