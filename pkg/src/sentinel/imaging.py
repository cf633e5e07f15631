"""Pixel rasters, integral images, and the small image toolbox the detector needs.

Images are thin immutable wrappers around numpy arrays: uint8 rasters for
color/gray pixels and int64 cumulative tables for the integral images that
make rectangle sums O(1). File I/O speaks binary PGM (P5) and PPM (P6) only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Raised for malformed or unsupported PGM/PPM data."""


class BoundsError(ValueError):
    """Raised when a rectangle falls outside the image it is applied to."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Rect:
    """Axis-aligned rectangle, top-left origin, in pixel units."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"rect must have positive size, got {self.w}x{self.h}")

    def __eq__(self, other):
        if not isinstance(other, Rect):
            return NotImplemented
        return (self.x, self.y, self.w, self.h) == (other.x, other.y, other.w, other.h)

    def __hash__(self):
        return hash((self.x, self.y, self.w, self.h))

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return 0 <= self.x and 0 <= self.y and self.x + self.w <= width and self.y + self.h <= height


@dataclass(frozen=True, eq=False)
class ColorImage:
    """8-bit RGB raster, shape (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.uint8)
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"color pixels must be (h, w, 3), got {p.shape}")
        object.__setattr__(self, "pixels", _freeze(p))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit luminance raster, shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.uint8)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"gray pixels must be (h, w), got {p.shape}")
        object.__setattr__(self, "pixels", _freeze(p))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Cumulative-sum table: entry (y, x) is the sum over pixels [0,y) x [0,x).

    Shape is (height+1, width+1); row 0 and column 0 are zero.
    """

    table: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "table", _freeze(np.ascontiguousarray(self.table, dtype=np.int64)))

    @property
    def width(self) -> int:
        return self.table.shape[1] - 1

    @property
    def height(self) -> int:
        return self.table.shape[0] - 1


@dataclass(frozen=True, eq=False)
class SquaredIntegralImage(IntegralImage):
    """Same layout as IntegralImage but accumulating squared pixel values."""


def to_grayscale(img: ColorImage) -> GrayImage:
    """Convert RGB to luminance: Y = round(0.299 R + 0.587 G + 0.114 B).

    Integer arithmetic, rounding half away from zero.
    """
    p = img.pixels.astype(np.int64)
    y = (299 * p[:, :, 0] + 587 * p[:, :, 1] + 114 * p[:, :, 2] + 500) // 1000
    return GrayImage(np.clip(y, 0, 255).astype(np.uint8))


def integral(img: GrayImage) -> tuple[IntegralImage, SquaredIntegralImage]:
    """Build the plain and squared integral tables for a gray image."""
    p = img.pixels.astype(np.int64)
    h, w = p.shape
    ii = np.zeros((h + 1, w + 1), dtype=np.int64)
    sq = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.cumsum(np.cumsum(p, axis=0), axis=1, out=ii[1:, 1:])
    np.cumsum(np.cumsum(p * p, axis=0), axis=1, out=sq[1:, 1:])
    return IntegralImage(ii), SquaredIntegralImage(sq)


def rect_sum(ii: IntegralImage, r: Rect) -> int:
    """Sum of pixels inside r, from four table lookups."""
    if not r.inside(ii.width, ii.height):
        raise BoundsError(f"rect {r} outside {ii.width}x{ii.height} image")
    t = ii.table
    return int(t[r.y + r.h, r.x + r.w] - t[r.y, r.x + r.w] - t[r.y + r.h, r.x] + t[r.y, r.x])


def window_stddev(ii: IntegralImage, sq: SquaredIntegralImage, r: Rect) -> float:
    """Pixel standard deviation over r: sqrt(max(0, E[x^2] - E[x]^2))."""
    a = r.area
    mean = rect_sum(ii, r) / a
    ex2 = rect_sum(sq, r) / a
    return math.sqrt(max(0.0, ex2 - mean * mean))


def _expand_and_clamp(r: Rect, margin: float, width: int, height: int) -> Rect:
    dx = int(round(margin * r.w))
    dy = int(round(margin * r.h))
    x0 = max(0, r.x - dx)
    y0 = max(0, r.y - dy)
    x1 = min(width, r.x + r.w + dx)
    y1 = min(height, r.y + r.h + dy)
    return Rect(x0, y0, x1 - x0, y1 - y0)


def crop(img: ColorImage | GrayImage, r: Rect, margin: float = 0.0):
    """Copy out r, optionally expanded by margin (a fraction of r's size) on
    every side and clamped to the image bounds. The base rect must fit."""
    if not r.inside(img.width, img.height):
        raise BoundsError(f"rect {r} outside {img.width}x{img.height} image")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    e = _expand_and_clamp(r, margin, img.width, img.height)
    sub = img.pixels[e.y : e.y + e.h, e.x : e.x + e.w].copy()
    return type(img)(sub)


def resample_bilinear(img: GrayImage, w: int, h: int) -> np.ndarray:
    """Bilinear resample to a w x h float array with edge clamping
    (half-pixel centers), no quantization."""
    if w < 1 or h < 1:
        raise ValueError("target size must be >= 1x1")
    src = img.pixels.astype(np.float64)
    sh, sw = src.shape
    xs = np.clip((np.arange(w) + 0.5) * (sw / w) - 0.5, 0.0, sw - 1.0)
    ys = np.clip((np.arange(h) + 0.5) * (sh / h) - 0.5, 0.0, sh - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = (xs - x0)[None, :]
    fy = (ys - y0)[:, None]
    return (
        src[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + src[np.ix_(y1, x0)] * fy * (1 - fx)
        + src[np.ix_(y0, x1)] * (1 - fy) * fx
        + src[np.ix_(y1, x1)] * fy * fx
    )


def resize_bilinear(img: GrayImage, w: int, h: int) -> GrayImage:
    """Bilinear resample to w x h, rounded back to 8-bit gray."""
    out = resample_bilinear(img, w, h)
    return GrayImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def draw_rect(img: ColorImage, r: Rect, color: tuple[int, int, int], thickness: int = 2) -> ColorImage:
    """Paint the border of r (band of `thickness` px just inside its edges),
    clipped at the image boundary; the interior is left untouched."""
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    p = img.pixels.copy()
    h, w = p.shape[:2]
    c = np.array(color, dtype=np.uint8)
    x0, y0 = r.x, r.y
    x1, y1 = r.x + r.w, r.y + r.h
    t = thickness

    def paint(ax0, ay0, ax1, ay1):
        ax0, ay0 = max(0, ax0), max(0, ay0)
        ax1, ay1 = min(w, ax1), min(h, ay1)
        if ax0 < ax1 and ay0 < ay1:
            p[ay0:ay1, ax0:ax1] = c

    paint(x0, y0, x1, y0 + t)          # top
    paint(x0, y1 - t, x1, y1)          # bottom
    paint(x0, y0, x0 + t, y1)          # left
    paint(x1 - t, y0, x1, y1)          # right
    return ColorImage(p)


def _read_header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse a PNM header; returns (magic, width, height, maxval, payload offset)."""
    pos = 0
    n = len(data)

    def skip_space_and_comments():
        nonlocal pos
        while pos < n:
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < n and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                return

    def token() -> bytes:
        nonlocal pos
        skip_space_and_comments()
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        return data[start:pos]

    magic = token()
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic number {magic!r}")
    fields = []
    for name in ("width", "height", "maxval"):
        tok = token()
        if not tok.isdigit():
            raise FormatError(f"bad {name} field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header and payload
    return magic, width, height, maxval, pos


def decode_image(data: bytes) -> ColorImage | GrayImage:
    """Decode binary PGM (P5) or PPM (P6) bytes."""
    magic, width, height, _, offset = _read_header(data)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return GrayImage(arr.reshape(height, width).copy())
    return ColorImage(arr.reshape(height, width, 3).copy())


def encode_image(img: ColorImage | GrayImage) -> bytes:
    """Encode to binary PGM/PPM with the canonical header."""
    if isinstance(img, GrayImage):
        magic = b"P5"
    elif isinstance(img, ColorImage):
        magic = b"P6"
    else:
        raise TypeError(f"cannot encode {type(img).__name__}")
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


def read_image(path) -> ColorImage | GrayImage:
    with open(path, "rb") as f:
        return decode_image(f.read())


def write_image(img: ColorImage | GrayImage, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_image(img))
