"""Fundus image decoding, retina cropping, CLAHE enhancement and resizing."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

# 4-connectivity
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_LUMA = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Base class for image decoding failures."""


class UnknownFormatError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


class UnsupportedDepthError(ImageFormatError):
    pass


class ClaheParamError(ValueError):
    pass


@dataclass(frozen=True)
class Image8:
    """8-bit image; ``pixels`` has shape (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] not in (1, 3):
            raise ValueError(f"Image8 needs uint8 HxWx1 or HxWx3 pixels, got {p.dtype} {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError("image dimensions must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def from_array(cls, arr) -> "Image8":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return cls(np.ascontiguousarray(arr, dtype=np.uint8))


@dataclass(frozen=True)
class ClaheParams:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 0.01
    bins: int = 256

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise ClaheParamError("tile counts must be positive")
        if not 0.0 < self.clip_limit <= 1.0:
            raise ClaheParamError(f"clip_limit must lie in (0, 1], got {self.clip_limit}")
        if self.bins < 2:
            raise ClaheParamError("need at least 2 histogram bins")


# -- PNM codec ---------------------------------------------------------------

def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace separated header tokens after the magic number.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last token.
    """
    tokens: list[bytes] = []
    pos = 2
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError("header ended before width, height and maxval")
        tokens.append(data[start:pos])
    if pos >= n:
        raise TruncatedImageError("no pixel data after header")
    return tokens, pos


def decode_image(data: bytes) -> Image8:
    """Decode binary PGM (P5) / PPM (P6); PNG as well when Pillow is installed."""
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(data)
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise UnknownFormatError(f"unknown magic number {magic!r}")
    tokens, pos = _read_header_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise UnknownFormatError(f"malformed header tokens {tokens}") from exc
    if width < 1 or height < 1:
        raise UnknownFormatError(f"bad dimensions {width}x{height}")
    if maxval > 255:
        raise UnsupportedDepthError(f"maxval {maxval} implies 16-bit samples; only 8-bit supported")
    if maxval < 1:
        raise UnknownFormatError(f"bad maxval {maxval}")
    payload = data[pos + 1:]
    need = width * height * channels
    if len(payload) < need:
        raise TruncatedImageError(f"expected {need} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=need).reshape(height, width, channels)
    if maxval != 255:
        pixels = np.floor(pixels.astype(np.float64) * 255.0 / maxval + 0.5).clip(0, 255)
    return Image8(np.array(pixels, dtype=np.uint8))


def _decode_png(data: bytes) -> Image8:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise UnknownFormatError("PNG support requires Pillow") from exc
    im = Image.open(io.BytesIO(data))
    if im.mode in ("I;16", "I;16B", "I", "F") or "16" in im.mode:
        raise UnsupportedDepthError(f"PNG mode {im.mode} is not 8-bit")
    if im.mode == "L":
        return Image8.from_array(np.asarray(im))
    return Image8.from_array(np.asarray(im.convert("RGB")))


def encode_image(img: Image8) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


def read_image(path) -> Image8:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_image(path, img: Image8) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(img))


# -- retina boundary ---------------------------------------------------------

def luma(img: Image8) -> np.ndarray:
    """Integer luma, ``round(0.299R + 0.587G + 0.114B)`` with halves rounded up."""
    p = img.pixels.astype(np.float64)
    if img.channels == 1:
        return img.pixels[:, :, 0].astype(np.int32)
    y = _LUMA[0] * p[:, :, 0] + _LUMA[1] * p[:, :, 1] + _LUMA[2] * p[:, :, 2]
    return np.floor(y + 0.5).astype(np.int32)


def detect_retina_bbox(img: Image8, threshold: int = 15) -> tuple[int, int, int, int]:
    """Inclusive (x0, y0, x1, y1) box of the largest bright 4-connected region.

    Falls back to the full frame when that region covers under 10% of the image.
    """
    h, w = img.height, img.width
    full = (0, 0, w - 1, h - 1)
    mask = luma(img) > threshold
    labels, count = ndimage.label(mask, structure=_CROSS)
    if count == 0:
        return full
    # labels are assigned in row-major order of first pixel, so argmax keeps the earliest on ties
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] * 10 < h * w:
        return full
    ys, xs = np.nonzero(labels == best)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def crop(img: Image8, box: tuple[int, int, int, int]) -> Image8:
    x0, y0, x1, y1 = box
    return Image8(np.ascontiguousarray(img.pixels[y0:y1 + 1, x0:x1 + 1]))


# -- CLAHE -------------------------------------------------------------------

def _tile_edges(size: int, tiles: int) -> np.ndarray:
    return np.array([(i * size) // tiles for i in range(tiles + 1)], dtype=np.int64)


def _tile_mapping(tile: np.ndarray, p: ClaheParams) -> np.ndarray:
    """256-entry lookup table for one tile."""
    bin_of = (np.arange(256) * p.bins) // 256
    hist = np.bincount(bin_of[tile.ravel()], minlength=p.bins).astype(np.float64)
    npix = tile.size
    limit = math.ceil(p.clip_limit * npix)
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / p.bins
    cdf = np.cumsum(hist) / npix
    table = np.floor(255.0 * cdf + 0.5).clip(0, 255)
    return table[bin_of]


def _blend_axis(size: int, edges: np.ndarray):
    """Per-coordinate (lower tile, upper tile, upper weight) along one axis."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    coords = np.arange(size, dtype=np.float64)
    hi = np.searchsorted(centers, coords, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    weight = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, weight


def clahe(img: Image8, p: ClaheParams = ClaheParams()) -> Image8:
    """Contrast-limited adaptive histogram equalization of a single-channel image.

    Each tile's histogram is clipped at ``ceil(clip_limit * tile_pixels)``, the
    clipped mass is spread evenly over all bins, and the tile maps ``v`` to
    ``round(255 * cdf(v))``. Pixels blend the maps of the four surrounding tile
    centers bilinearly; pixels outside the outermost centers clamp.
    """
    if img.channels != 1:
        raise ClaheParamError("clahe expects a single-channel image")
    h, w = img.height, img.width
    if h < p.tiles_y or w < p.tiles_x:
        raise ClaheParamError(f"image {w}x{h} is smaller than the {p.tiles_x}x{p.tiles_y} tile grid")
    src = img.pixels[:, :, 0]
    ye = _tile_edges(h, p.tiles_y)
    xe = _tile_edges(w, p.tiles_x)
    maps = np.empty((p.tiles_y, p.tiles_x, 256), dtype=np.float64)
    for ty in range(p.tiles_y):
        for tx in range(p.tiles_x):
            maps[ty, tx] = _tile_mapping(src[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]], p)

    y_lo, y_hi, wy = _blend_axis(h, ye)
    x_lo, x_hi, wx = _blend_axis(w, xe)
    v = src.astype(np.int64)
    wy = wy[:, None]
    wx = wx[None, :]

    def lookup(ty, tx):
        return maps[ty[:, None], tx[None, :], v]

    top = (1.0 - wx) * lookup(y_lo, x_lo) + wx * lookup(y_lo, x_hi)
    bottom = (1.0 - wx) * lookup(y_hi, x_lo) + wx * lookup(y_hi, x_hi)
    out = (1.0 - wy) * top + wy * bottom
    return Image8.from_array(np.floor(out + 0.5).clip(0, 255))


def enhance_color(img: Image8, p: ClaheParams = ClaheParams()) -> Image8:
    """CLAHE on each RGB channel independently."""
    if img.channels != 3:
        raise ClaheParamError("enhance_color expects an RGB image")
    chans = [clahe(Image8.from_array(img.pixels[:, :, c]), p).pixels[:, :, 0] for c in range(3)]
    return Image8.from_array(np.stack(chans, axis=-1))


# -- resizing and the full pipeline ------------------------------------------

def _resize_axis(in_size: int, out_size: int):
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_bilinear(img: Image8, out_w: int, out_h: int) -> Image8:
    """Bilinear resize with half-pixel centers; rounds half away from zero."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be positive")
    p = img.pixels.astype(np.float64)
    y0, y1, fy = _resize_axis(img.height, out_h)
    x0, x1, fx = _resize_axis(img.width, out_w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = p[y0][:, x0] * (1.0 - fx) + p[y0][:, x1] * fx
    bottom = p[y1][:, x0] * (1.0 - fx) + p[y1][:, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    return Image8.from_array(np.floor(out + 0.5).clip(0, 255))


def to_rgb(img: Image8) -> Image8:
    if img.channels == 3:
        return img
    return Image8.from_array(np.repeat(img.pixels, 3, axis=2))


def preprocess(img: Image8, p: ClaheParams = ClaheParams(), out_size: int = 64,
               threshold: int = 15) -> np.ndarray:
    """Crop to the retina, enhance, resize and return a float32 ``3 x S x S`` tensor in [0, 1]."""
    img = to_rgb(img)
    box = detect_retina_bbox(img, threshold)
    img = enhance_color(crop(img, box), p)
    img = resize_bilinear(img, out_size, out_size)
    return np.ascontiguousarray(img.pixels.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)
