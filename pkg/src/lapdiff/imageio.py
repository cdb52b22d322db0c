"""Binary PGM/PPM (8- and 16-bit) and raw float64 sidecars.

Raw sidecar layout (all little-endian)::

    8 bytes   magic b"LDFIELD1"
    3 x u32   channels, height, width
    4 bytes   zero padding
    C*H*W f64 values, channel-plane row-major
"""

from __future__ import annotations

import struct

import numpy as np

from lapdiff.errors import FormatError

RAW_MAGIC = b"LDFIELD1"


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PNM header")
        out.append(data[i:j])
        i = j
    return out, i + 1


def read_pnm(path) -> tuple[np.ndarray, int]:
    """Return (integer array (C, H, W), maxval) from a binary P5/P6 file."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), off = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported format {magic!r}; only binary P5/P6")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: non-numeric PNM header") from None
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = c * h * w
    if len(data) - off < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated pixel data")
    pix = np.frombuffer(data, dtype, n, off).reshape(h, w, c)
    return pix.transpose(2, 0, 1).astype(np.int64), maxval


def write_pnm(path, pixels, maxval: int = 255):
    """Write integer pixels (C, H, W) with C in {1, 3} as binary PGM/PPM."""
    pixels = np.asarray(pixels)
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    if pixels.min() < 0 or pixels.max() > maxval:
        raise ValueError("pixel values outside [0, maxval]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.transpose(1, 2, 0).astype(dtype).tobytes())


def quantize(x, bits: int = 8, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Map [lo, hi] onto integer levels 0..2^bits-1, clipping outside values."""
    maxval = (1 << bits) - 1
    q = np.rint((np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * maxval)
    return np.clip(q, 0, maxval).astype(np.int64)


def dequantize(q, maxval: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / maxval * (hi - lo) + lo


def read_image(path, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Read a PGM/PPM or raw sidecar as a float64 field."""
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == RAW_MAGIC:
        return read_raw(path)
    q, maxval = read_pnm(path)
    return dequantize(q, maxval, lo, hi)


def write_image(path, x, bits: int = 8, lo: float = -1.0, hi: float = 1.0):
    write_pnm(path, quantize(x, bits, lo, hi), (1 << bits) - 1)


def write_raw(path, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"raw sidecar holds one (C, H, W) field, got shape {x.shape}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<3I4x", *x.shape))
        fh.write(x.astype("<f8").tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != RAW_MAGIC:
        raise FormatError(f"{path}: not a raw field file")
    c, h, w = struct.unpack_from("<3I", data, 8)
    if len(data) < 24 + 8 * c * h * w:
        raise FormatError(f"{path}: truncated raw data")
    return np.frombuffer(data, "<f8", c * h * w, 24).reshape(c, h, w).astype(np.float64)


def residual_view(band, bits: int = 8) -> tuple[np.ndarray, float]:
    """Signed band -> display pixels with 0 at mid-gray; returns (pixels, scale).

    ``scale`` is the value mapped to full white, i.e. pixel = mid + band / scale * mid.
    """
    band = np.asarray(band, dtype=np.float64)
    scale = float(np.max(np.abs(band)))
    scale = scale if scale > 0 else 1.0
    return quantize(band / scale, bits), scale
