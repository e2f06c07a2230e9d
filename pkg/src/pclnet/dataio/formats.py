"""Middlebury .flo and binary PPM (P6) codecs, plus optional PNG reading."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25
_FLO_TAG = struct.pack("<f", FLO_MAGIC)


class FormatError(ValueError):
    pass


def _as_chw_flow(flow) -> np.ndarray:
    arr = np.asarray(getattr(flow, "data", flow))
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"write_flo takes a single flow, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValueError(f"flow must be 2 x H x W (or 1 x 2 x H x W), got {arr.shape}")
    return arr


def write_flo(path, flow) -> None:
    """Write a 2 x H x W displacement field in Middlebury layout."""
    arr = _as_chw_flow(flow)
    _, h, w = arr.shape
    payload = np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(_FLO_TAG + struct.pack("<ii", w, h) + payload)


def read_flo(path) -> np.ndarray:
    """Read a .flo file into a float32 array of shape 1 x 2 x H x W."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic = struct.unpack_from("<f", blob, 0)[0]
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack_from("<ii", blob, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(blob) < need:
        raise FormatError(f"{path}: truncated payload, {len(blob)} of {need} bytes")
    data = np.frombuffer(blob, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return data.transpose(2, 0, 1)[None].astype(np.float32)


def _ppm_tokens(blob: bytes, count: int):
    """Yield ``count`` header tokens and the offset of the raster start."""
    tokens, i, n = [], 0, len(blob)
    while len(tokens) < count:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i : i + 1] == b"#":
            while i < n and blob[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not blob[i : i + 1].isspace() and blob[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise FormatError("truncated PPM header")
        tokens.append(blob[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as a 1 x 3 x H x W float64 array in [0, 1]."""
    blob = Path(path).read_bytes()
    tokens, offset = _ppm_tokens(blob, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, need 255")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid dimensions {w}x{h}")
    raster = blob[offset : offset + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise FormatError(f"{path}: truncated raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return (img.transpose(2, 0, 1)[None] / 255.0).astype(np.float64)


def quantize(image) -> np.ndarray:
    """Values in [0, 1] -> uint8 H x W x 3, rounding to nearest."""
    arr = np.asarray(getattr(image, "data", image))
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must be 3 x H x W, got {arr.shape}")
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, image) -> None:
    px = quantize(image)
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes())


def read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FormatError("PNG support needs Pillow installed") from exc
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)[None]


IMAGE_SUFFIXES = (".ppm", ".png")


def read_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        return read_png(path)
    raise FormatError(f"{path}: unsupported image type {suffix!r}")
