"""
Deterministic 8-bit image primitives.

Everything here operates on :class:`Image`, a thin wrapper over a ``uint8``
numpy array of shape ``(h, w)`` (grayscale) or ``(h, w, 3)`` (RGB).
Rounding is always half-up so results are bit-identical across platforms.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Image",
    "BoundingBox",
    "PnmError",
    "DimensionError",
    "load_pnm",
    "save_pnm",
    "read_pnm",
    "write_pnm",
    "to_grayscale",
    "resize",
    "center_crop",
    "crop",
    "expand_box",
    "mean_brightness",
    "clahe",
    "clahe_mappings",
    "dhash",
    "hamming",
]


class PnmError(ValueError):
    """Malformed or unsupported PNM byte stream."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DimensionError(ValueError):
    """Requested geometry does not fit the image."""


class Image:
    """Owned 8-bit raster. Treat as immutable; operations return new images."""

    __slots__ = ("data", "_header")

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("samples must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3)):
            raise ValueError(f"unsupported image shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Image":
        """Adopt an array already known to be a valid raster (no checks)."""
        img = object.__new__(cls)
        img.data = arr
        return img

    @classmethod
    def from_samples(cls, width: int, height: int, channels: int, samples) -> "Image":
        buf = np.frombuffer(bytes(samples), dtype=np.uint8)
        if buf.size != width * height * channels:
            raise ValueError(
                f"expected {width * height * channels} samples, got {buf.size}"
            )
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(buf.reshape(shape))

    @classmethod
    def filled(cls, width: int, height: int, value=0, channels: int = 1) -> "Image":
        shape = (height, width) if channels == 1 else (height, width, channels)
        arr = np.empty(shape, dtype=np.uint8)
        arr[...] = value
        return cls(arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def samples(self) -> bytes:
        """Row-major sample bytes, channels interleaved."""
        return np.ascontiguousarray(self.data).tobytes()

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.samples()))

    def __repr__(self):
        return f"Image({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def intersects(self, width: int, height: int) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0

    def clamp(self, width: int, height: int) -> "BoundingBox | None":
        """Intersection with the ``width`` x ``height`` frame, or None if empty."""
        x0 = max(self.x, 0)
        y0 = max(self.y, 0)
        x1 = min(self.x + self.w, width)
        y1 = min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


# --------------------------------------------------------------------------
# PNM I/O

_PNM_CHANNELS = {b"P5": 1, b"P6": 3}


def load_pnm(data: bytes) -> Image:
    """Parse a binary PGM (P5) or PPM (P6) byte string with maxval 255.

    Header comments (``#`` to end of line) are accepted; exactly one
    whitespace byte must separate the maxval from the payload.
    """
    data = bytes(data)
    pos = 0
    tokens = []
    token_offsets = []
    while len(tokens) < 4:
        # skip whitespace and comments
        while pos < len(data):
            c = data[pos : pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            else:
                break
        if pos >= len(data):
            raise PnmError("truncated header", pos)
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
        token_offsets.append(start)

    magic, w_tok, h_tok, max_tok = tokens
    if magic not in _PNM_CHANNELS:
        raise PnmError(f"unsupported magic {magic!r}", token_offsets[0])
    channels = _PNM_CHANNELS[magic]
    dims = []
    for tok, off in zip((w_tok, h_tok, max_tok), token_offsets[1:]):
        if not tok.isdigit():
            raise PnmError(f"expected decimal integer, got {tok!r}", off)
        dims.append(int(tok))
    width, height, maxval = dims
    if width < 1 or height < 1:
        raise PnmError("image dimensions must be positive", token_offsets[1])
    if maxval != 255:
        raise PnmError(f"maxval must be 255, got {maxval}", token_offsets[3])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PnmError("missing whitespace before payload", pos)
    pos += 1

    expected = width * height * channels
    payload = data[pos:]
    if len(payload) < expected:
        raise PnmError(
            f"truncated payload: need {expected} bytes, have {len(payload)}", pos + len(payload)
        )
    if len(payload) > expected:
        raise PnmError("trailing bytes after payload", pos + expected)
    img = Image.from_samples(width, height, channels, payload)
    img._header = data[:pos]
    return img


def save_pnm(img: Image) -> bytes:
    """Serialize as ``P5\\n<w> <h>\\n255\\n`` (or P6) followed by the raw samples.

    An image that came from :func:`load_pnm` keeps its original header
    bytes, so loading and saving a file reproduces it exactly.
    """
    header = getattr(img, "_header", None)
    if header is None:
        magic = "P5" if img.channels == 1 else "P6"
        header = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.samples()


def read_pnm(path) -> Image:
    with open(path, "rb") as fh:
        return load_pnm(fh.read())


def write_pnm(path, img: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(save_pnm(img))


# --------------------------------------------------------------------------
# geometry and colour


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    rgb = img.data.astype(np.int32)
    # BT.601 luma in integer thousandths so that +500 // 1000 rounds half-up
    luma = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return Image(luma.astype(np.uint8))


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def _bilinear_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize(img: Image, out_w: int, out_h: int) -> Image:
    """Bilinear resize with half-pixel centres.

    Source coordinates are ``(dst + 0.5) * in / out - 0.5`` clamped to
    ``[0, in - 1]``; interpolated values are rounded half-up.
    """
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"output size must be positive, got {out_w}x{out_h}")
    if (out_w, out_h) == (img.width, img.height):
        return img
    src = img.data.astype(np.float64)
    x0, x1, fx = _bilinear_axis(img.width, out_w)
    y0, y1, fy = _bilinear_axis(img.height, out_h)
    if src.ndim == 3:
        fx = fx[:, None]
        fy_col = fy[:, None, None]
    else:
        fy_col = fy[:, None]
    rows = src[:, x0] * (1.0 - fx) + src[:, x1] * fx
    out = rows[y0] * (1.0 - fy_col) + rows[y1] * fy_col
    return Image(np.clip(_round_half_up(out), 0, 255).astype(np.uint8))


def center_crop(img: Image, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1 or out_w > img.width or out_h > img.height:
        raise DimensionError(
            f"cannot center-crop {img.width}x{img.height} to {out_w}x{out_h}"
        )
    x = (img.width - out_w) // 2
    y = (img.height - out_h) // 2
    return Image(img.data[y : y + out_h, x : x + out_w])


def crop(img: Image, box: BoundingBox) -> Image:
    h, w = img.data.shape[:2]
    if box.x >= 0 and box.y >= 0 and box.x + box.w <= w and box.y + box.h <= h:
        out = object.__new__(Image)
        out.data = img.data[box.y : box.y + box.h, box.x : box.x + box.w]
        return out
    clamped = box.clamp(w, h)
    if clamped is None:
        raise DimensionError(f"{box} does not intersect a {img.width}x{img.height} image")
    return Image._wrap(img.data[clamped.y : clamped.y + clamped.h, clamped.x : clamped.x + clamped.w])


@functools.lru_cache(maxsize=256)
def expand_box(box: BoundingBox, factor: float, bounds_w: int, bounds_h: int) -> BoundingBox:
    """Grow ``box`` by ``factor`` of its size about its centre, then clamp.

    Edges are rounded to the nearest integer with ties moving outward, so a
    0.5-pixel tie never shrinks the box.
    """
    if factor < 0:
        raise ValueError("factor must be non-negative")
    if factor == 0:
        return box.clamp(bounds_w, bounds_h) or box
    scale = 1.0 + factor
    cx2 = 2 * box.x + box.w  # twice the centre, kept integral
    cy2 = 2 * box.y + box.h
    # 12 decimals drops binary noise such as 100 * 1.2 = 120.00000000000001
    left = round((cx2 - box.w * scale) / 2.0, 12)
    right = round((cx2 + box.w * scale) / 2.0, 12)
    top = round((cy2 - box.h * scale) / 2.0, 12)
    bottom = round((cy2 + box.h * scale) / 2.0, 12)
    x0, x1 = math.ceil(left - 0.5), math.floor(right + 0.5)
    y0, y1 = math.ceil(top - 0.5), math.floor(bottom + 0.5)
    grown = BoundingBox(x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))
    return grown.clamp(bounds_w, bounds_h) or box


def mean_brightness(img: Image) -> float:
    return float(to_grayscale(img).data.mean(dtype=np.float64))


# --------------------------------------------------------------------------
# CLAHE


@functools.lru_cache(maxsize=64)
def _tile_geometry(width: int, height: int, tiles_x: int, tiles_y: int):
    """Index arrays shared by every image of one size and tile grid."""
    xe = (np.arange(tiles_x + 1) * width) // tiles_x
    ye = (np.arange(tiles_y + 1) * height) // tiles_y
    tile_col = np.repeat(np.arange(tiles_x), np.diff(xe))
    tile_row = np.repeat(np.arange(tiles_y), np.diff(ye))
    bin_base = (tile_row[:, None] * tiles_x + tile_col[None, :]) * 256
    n = (np.diff(ye)[:, None] * np.diff(xe)[None, :]).astype(np.float64)
    c0, c1, wx = _interp_axis(width, xe)
    r0, r1, wy = _interp_axis(height, ye)
    interp = (r0[:, None], r1[:, None], c0[None, :], c1[None, :], wx[None, :], wy[:, None])
    for arr in (bin_base, n, *interp):
        arr.flags.writeable = False
    return bin_base, n, interp


def _interp_axis(n: int, edges: np.ndarray):
    """Neighbouring tile indices and blend weight for each pixel along one axis."""
    centres = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centres, pos, side="right")
    i0 = np.clip(hi - 1, 0, len(centres) - 1)
    i1 = np.clip(hi, 0, len(centres) - 1)
    span = centres[i1] - centres[i0]
    weight = np.where(span > 0, (pos - centres[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, weight


def _check_clahe_args(img: Image, tiles_x: int, tiles_y: int, clip_limit: float) -> None:
    if img.channels != 1:
        raise TypeError("CLAHE requires a single-channel image")
    if tiles_x < 1 or tiles_y < 1:
        raise ValueError("tile counts must be >= 1")
    if clip_limit < 1.0:
        raise ValueError("clip_limit must be >= 1.0")
    if tiles_x > img.width or tiles_y > img.height:
        raise DimensionError(
            f"{tiles_x}x{tiles_y} tiles do not fit a {img.width}x{img.height} image"
        )


def _mappings(data: np.ndarray, bin_base: np.ndarray, n: np.ndarray, clip_limit: float) -> np.ndarray:
    ty, tx = n.shape
    hist = np.bincount((bin_base + data).ravel(), minlength=ty * tx * 256)
    hist = hist.reshape(ty, tx, 256).astype(np.float64)
    clip = (clip_limit / 256.0) * n[..., None]
    excess = np.maximum(hist - clip, 0.0).sum(axis=2, keepdims=True)
    hist = np.minimum(hist, clip) + excess / 256.0
    table = np.floor(255.0 * np.cumsum(hist, axis=2) / n[..., None] + 0.5)
    return np.minimum(table, 255.0)


def clahe_mappings(img: Image, tiles_x: int = 8, tiles_y: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Per-tile 256-entry transfer tables, shape ``(tiles_y, tiles_x, 256)``.

    Each tile histogram is clipped at ``clip_limit * n / 256`` where ``n`` is
    the tile's pixel count; the clipped excess is spread evenly over all bins
    in one pass and the table is ``round(255 * cdf / n)``.
    """
    _check_clahe_args(img, tiles_x, tiles_y, clip_limit)
    bin_base, n, _ = _tile_geometry(img.width, img.height, tiles_x, tiles_y)
    return _mappings(img.data, bin_base, n, clip_limit).astype(np.uint8)


def clahe(img: Image, tiles_x: int = 8, tiles_y: int = 8, clip_limit: float = 2.0) -> Image:
    """Contrast-limited adaptive histogram equalization of a grayscale image.

    Args:
        img: single-channel input.
        tiles_x, tiles_y: tile grid; each dimension must not exceed the image size.
        clip_limit: bin ceiling as a multiple of the uniform bin height.

    Returns:
        Enhanced image. Each output pixel bilinearly blends the four nearest
        tile tables at its input value; pixels outside the grid of tile
        centres use the nearest edge tiles.
    """
    _check_clahe_args(img, tiles_x, tiles_y, clip_limit)
    bin_base, n, (R0, R1, C0, C1, WX, WY) = _tile_geometry(img.width, img.height, tiles_x, tiles_y)
    data = img.data
    maps = _mappings(data, bin_base, n, clip_limit)
    if maps.shape[0] == 1 and maps.shape[1] == 1:
        return Image(maps[0, 0, data].astype(np.uint8))
    top = maps[R0, C0, data] * (1.0 - WX) + maps[R0, C1, data] * WX
    bottom = maps[R1, C0, data] * (1.0 - WX) + maps[R1, C1, data] * WX
    out = np.floor(top * (1.0 - WY) + bottom * WY + 0.5)
    return Image(np.minimum(out, 255.0).astype(np.uint8))


# --------------------------------------------------------------------------
# dHash


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Integer overlap matrix (n_out x n_in) for box-filter downscaling.

    Source pixel ``s`` spans ``[s*n_out, (s+1)*n_out)`` and output ``o`` spans
    ``[o*n_in, (o+1)*n_in)`` on a common integer grid, so every output is an
    exact integer multiple of its true area average.
    """
    s = np.arange(n_in)
    o = np.arange(n_out)[:, None]
    lo = np.maximum(s * n_out, o * n_in)
    hi = np.minimum((s + 1) * n_out, (o + 1) * n_in)
    return np.maximum(hi - lo, 0).astype(np.int64)


def _area_downscale_scaled(gray: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    wy = _area_weights(gray.shape[0], out_h)
    wx = _area_weights(gray.shape[1], out_w)
    return wy @ gray.astype(np.int64) @ wx.T


def dhash(img: Image) -> int:
    """64-bit horizontal difference hash on a 9x8 area-averaged thumbnail.

    Bit ``row * 8 + col`` is set when the thumbnail pixel at (row, col) is
    strictly brighter than its right-hand neighbour.
    """
    small = _area_downscale_scaled(to_grayscale(img).data, 9, 8)
    bits = (small[:, :-1] > small[:, 1:]).ravel()
    return sum(1 << i for i in np.flatnonzero(bits).tolist())


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")
