"""Rasters, tissue detection and patch-grid segmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..errors import DegenerateInputError, FormatError, SpecError
from .formats import PatchCoordinateSet, atomic_write_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Raster:
    """8-bit image, shape (height, width) or (height, width, 3)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim not in (2, 3) or (v.ndim == 3 and v.shape[2] != 3):
            raise FormatError(f"raster must be HxW or HxWx3, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise FormatError("raster must be at least 1x1")
        if v.dtype != np.uint8:
            if np.any(v < 0) or np.any(v > 255):
                raise FormatError("raster values must lie in [0, 255]")
            v = v.astype(np.uint8)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else 3


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of raster header")
    return buf[start:pos], pos


def read_raster(path) -> Raster:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported raster magic {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: bad header field {tok!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte ends the header
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = buf[pos:pos + expected]
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated raster payload")
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return Raster(arr.reshape(shape).copy())


def write_raster(raster: Raster, path) -> None:
    magic = b"P5" if raster.channels == 1 else b"P6"
    header = magic + f"\n{raster.width} {raster.height}\n255\n".encode()
    atomic_write_bytes(path, header + np.ascontiguousarray(raster.values).tobytes())


def rgb_to_saturation(raster: Raster) -> Raster:
    """HSV saturation channel scaled to [0, 255], rounded half up."""
    if raster.channels != 3:
        raise FormatError(f"expected a 3-channel raster, got {raster.channels}")
    v = raster.values.astype(np.int64)
    mx = v.max(axis=2)
    mn = v.min(axis=2)
    safe = np.where(mx == 0, 1, mx)
    # round(255 * (mx - mn) / mx) in exact integer arithmetic
    sat = (2 * 255 * (mx - mn) + safe) // (2 * safe)
    sat = np.where(mx == 0, 0, sat)
    return Raster(sat.astype(np.uint8))


def otsu_threshold(raster: Raster) -> int:
    """Threshold maximising between-class variance; ties go to the smallest t."""
    if raster.channels != 1:
        raise FormatError("otsu_threshold expects a single-channel raster")
    hist = np.bincount(raster.values.ravel(), minlength=256).astype(object)
    levels = np.arange(256, dtype=object)
    n = int(hist.sum())
    s = int((hist * levels).sum())
    n0 = np.cumsum(hist)
    s0 = np.cumsum(hist * levels)
    best_t, best = None, None
    # exact rational comparison so that near-ties cannot flip the argmax
    for t in range(256):
        a, b = int(n0[t]), n - int(n0[t])
        if a == 0 or b == 0:
            continue
        score = Fraction((n * int(s0[t]) - a * s) ** 2, a * b)
        if best is None or score > best:
            best, best_t = score, t
    if best_t is None:
        raise DegenerateInputError("constant raster: Otsu needs two distinct values")
    return best_t


def segment_to_coordinates(
    raster: Raster,
    patch_size: int = 256,
    downsample_factor: int = 32,
    min_foreground_fraction: float = 0.5,
    slide_id: str = "slide0",
    first_patch_id: int = 0,
) -> PatchCoordinateSet:
    """Grid patches whose raster block is mostly foreground.

    ``raster`` is the downsampled saturation image; a patch at full-resolution
    (x, y) covers the raster block of side ``patch_size // downsample_factor``
    starting at (x, y) / downsample_factor. A patch is kept when its fraction
    of pixels above the Otsu threshold exceeds ``min_foreground_fraction``;
    a fraction of 0 disables the filter entirely.
    """
    if raster.channels == 3:
        raster = rgb_to_saturation(raster)
    if downsample_factor < 1 or patch_size % downsample_factor:
        raise SpecError(
            f"patch_size {patch_size} must be divisible by downsample_factor {downsample_factor}"
        )
    if not 0.0 <= min_foreground_fraction <= 1.0:
        raise SpecError("min_foreground_fraction must lie in [0, 1]")
    t = otsu_threshold(raster)
    block = patch_size // downsample_factor
    ny, nx = raster.height // block, raster.width // block
    fg = raster.values[: ny * block, : nx * block] > t
    frac = fg.reshape(ny, block, nx, block).mean(axis=(1, 3))
    if min_foreground_fraction == 0:
        keep = np.ones_like(frac, dtype=bool)
    else:
        keep = frac > min_foreground_fraction
    rows, cols = np.nonzero(keep)  # row-major order
    if rows.size == 0:
        log.warning("segmentation found no foreground patches in %s", slide_id)
    entries = [
        (first_patch_id + i, slide_id, int(c) * patch_size, int(r) * patch_size)
        for i, (r, c) in enumerate(zip(rows, cols))
    ]
    return PatchCoordinateSet(entries, patch_size)
