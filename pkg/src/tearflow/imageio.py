"""Binary PPM/PGM image and mask files, with optional PNG via Pillow.

Images load as (3, h, w) float32 in [0, 1]; grayscale sources replicate
to three channels. Masks are strict two-level PGMs: 0 is background and
255 the positive class, anything else is a data error.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = ["read_image", "write_image", "read_mask", "write_mask"]


def _read_pnm_header(data: bytes, path):
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in b"56":
        raise DataError(f"{path}: not a binary PPM/PGM file")
    magic = data[:2].decode()
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise DataError(f"{path}: truncated header")
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            try:
                fields.append(int(data[start:pos]))
            except ValueError:
                raise DataError(f"{path}: malformed header field") from None
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise DataError(f"{path}: bad dimensions {width}x{height}")
    return magic, width, height, pos


def _read_pnm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    magic, width, height, pos = _read_pnm_header(data, path)
    channels = 3 if magic == "P6" else 1
    need = width * height * channels
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).transpose(2, 0, 1)
    return arr.reshape(1, height, width)


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataError(
            f"{path}: PNG support requires the optional Pillow dependency"
        ) from exc
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"))
    return arr.transpose(2, 0, 1)


def _load_raw(path) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return _read_png(path)
    return _read_pnm(path)


def read_image(path) -> np.ndarray:
    """Load an image as (3, h, w) float32 in [0, 1]."""
    arr = _load_raw(path)
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return (arr.astype(np.float32)) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write a (3, h, w) float array in [0, 1] as binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be (3, h, w), got {image.shape}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[1], data.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def read_mask(path) -> np.ndarray:
    """Load a binary mask: 0 -> background, 255 -> positive class."""
    arr = _load_raw(path)
    if arr.shape[0] == 3:
        if not (arr[0] == arr[1]).all() or not (arr[1] == arr[2]).all():
            raise DataError(f"{path}: mask channels disagree")
        arr = arr[:1]
    values = np.unique(arr)
    if not np.isin(values, (0, 255)).all():
        raise DataError(
            f"{path}: mask values must be 0 or 255, found {values.tolist()[:6]}"
        )
    return (arr[0] == 255).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as a binary PGM with values 0/255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-d, got {mask.shape}")
    if mask.size and mask.max() > 1:
        raise ValueError("mask labels must be 0 or 1")
    data = (mask.astype(np.uint8) * 255).astype(np.uint8)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
