"""Binary tensor/mask files and 8-bit PNM images.

``.ttn``: magic ``TTN1``, u32 order D, D x u32 dims, little-endian f64 payload
with the first index varying fastest.  ``.ttm`` uses magic ``TTM1`` and a u8
payload in {0, 1}.  All integers are little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"TTN1"
MASK_MAGIC = b"TTM1"


class FormatError(ValueError):
    pass


def _write(path, magic: bytes, arr: np.ndarray, dtype: str) -> None:
    header = magic + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.asarray(arr, dtype=dtype).ravel(order="F").tobytes()
    Path(path).write_bytes(header + payload)


def _read(path, magic: bytes, dtype: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (order,) = struct.unpack_from("<I", raw, 4)
    if order < 1:
        raise FormatError(f"{path}: tensor order must be >= 1")
    end = 8 + 4 * order
    if len(raw) < end:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{order}I", raw, 8)
    if min(dims) < 1:
        raise FormatError(f"{path}: zero-sized dimension in {dims}")
    count = int(np.prod(dims))
    itemsize = np.dtype(dtype).itemsize
    if len(raw) - end != count * itemsize:
        raise FormatError(
            f"{path}: payload has {len(raw) - end} bytes, expected {count * itemsize}"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=end)
    return flat.reshape(dims, order="F").copy()


def write_tensor(path, t: np.ndarray) -> None:
    _write(path, TENSOR_MAGIC, np.asarray(t, dtype=np.float64), "<f8")


def read_tensor(path) -> np.ndarray:
    return _read(path, TENSOR_MAGIC, "<f8").astype(np.float64)


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask entries must be 0 or 1")
    _write(path, MASK_MAGIC, mask.astype(np.uint8), "u1")


def read_mask(path) -> np.ndarray:
    bits = _read(path, MASK_MAGIC, "u1")
    if bits.max(initial=0) > 1:
        raise FormatError(f"{path}: mask payload contains values other than 0/1")
    return bits.astype(bool)


def _pnm_tokens(raw: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(int(raw[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) file as floats in [0, 1].

    Grayscale images come back as ``(H, W)``, colour ones as ``(H, W, 3)``.
    """
    raw = Path(path).read_bytes()
    kind = raw[:2]
    if kind not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    (width, height, maxval), offset = _pnm_tokens(raw, 3)
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval={maxval})")
    channels = 3 if kind == b"P6" else 1
    count = width * height * channels
    if len(raw) - offset < count:
        raise FormatError(f"{path}: truncated raster")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset)
    img = data.reshape(height, width, channels).astype(np.float64) / maxval
    return img[:, :, 0] if channels == 1 else img


def write_image(path, img: np.ndarray) -> None:
    """Write values in [0, 1] as an 8-bit PGM/PPM, rounding and clamping."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        kind = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        kind = b"P6"
    else:
        raise FormatError(f"cannot write image of shape {img.shape} as PGM/PPM")
    height, width = img.shape[:2]
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = kind + f"\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())
