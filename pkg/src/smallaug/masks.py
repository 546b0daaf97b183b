"""Binary-mask geometry.

Masks are 2-D ``uint8`` numpy arrays of shape ``(height, width)`` holding 0/1.
Run-length counts follow the COCO convention: column-major, first run counts
zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from smallaug._backend import kernels


class MaskError(ValueError):
    pass


class DegeneratePolygon(MaskError):
    pass


class LengthMismatch(MaskError):
    pass


class DegenerateOutput(MaskError):
    pass


@dataclass(frozen=True)
class RunLengthCounts:
    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...]

    def __post_init__(self):
        h, w = self.size
        if sum(self.counts) != h * w:
            raise LengthMismatch(f"counts sum {sum(self.counts)} != {h}*{w}")
        if any(c < 0 for c in self.counts):
            raise LengthMismatch("negative run length")

    @classmethod
    def from_string(cls, size: Sequence[int], s: str) -> "RunLengthCounts":
        counts = kernels.string_to_counts(s)
        return cls((int(size[0]), int(size[1])), tuple(int(c) for c in counts))

    def to_string(self) -> str:
        return kernels.counts_to_string(np.asarray(self.counts, dtype=np.int64))


def empty_mask(width: int, height: int) -> np.ndarray:
    return np.zeros((height, width), dtype=np.uint8)


def rasterize_polygons(polys: Sequence[Sequence[float]], width: int, height: int) -> np.ndarray:
    """Rasterize COCO flat-coordinate polygons.

    A pixel is set when its center lies inside any polygon under the
    even-odd rule. Parts of a polygon outside the image produce no pixels.
    """
    mask = empty_mask(width, height)
    for poly in polys:
        if len(poly) < 6 or len(poly) % 2:
            raise DegeneratePolygon(f"polygon with {len(poly)} coordinates")
        coords = np.asarray(poly, dtype=np.float64)
        kernels.fill_polygon(mask, coords[0::2], coords[1::2])
    return mask


def rle_encode(mask: np.ndarray) -> RunLengthCounts:
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    counts = kernels.rle_encode(m)
    return RunLengthCounts((m.shape[0], m.shape[1]), tuple(int(c) for c in counts))


def rle_decode(rle: RunLengthCounts) -> np.ndarray:
    h, w = rle.size
    if sum(rle.counts) != h * w:
        raise LengthMismatch(f"counts sum {sum(rle.counts)} != {h}*{w}")
    return kernels.rle_decode(np.asarray(rle.counts, dtype=np.int64), h, w)


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tightest ``(x, y, w, h)`` around the set pixels, or None when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return x0, y0, x1 - x0 + 1, y1 - y0 + 1


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def _scale_coords(n_in: int, n_out: int) -> np.ndarray:
    # continuous source coordinate of each output pixel center
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out)


def scaled_shape(height: int, width: int, factor: float) -> tuple[int, int]:
    if not factor > 0:
        raise DegenerateOutput(f"scale factor must be positive, got {factor}")
    out_h = int(round(height * factor))
    out_w = int(round(width * factor))
    if out_h < 1 or out_w < 1:
        raise DegenerateOutput(f"{width}x{height} scaled by {factor} is empty")
    return out_h, out_w


def scale_mask(mask: np.ndarray, factor: float) -> np.ndarray:
    """Nearest-neighbour resample to ``round(dim * factor)`` on each axis."""
    h, w = mask.shape
    out_h, out_w = scaled_shape(h, w, factor)
    rows = np.minimum(np.floor(_scale_coords(h, out_h)).astype(np.intp), h - 1)
    cols = np.minimum(np.floor(_scale_coords(w, out_w)).astype(np.intp), w - 1)
    return np.ascontiguousarray(mask[rows[:, None], cols[None, :]], dtype=np.uint8)


def scale_pixels(pixels: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of an (h, w[, c]) raster onto the same grid as ``scale_mask``."""
    h, w = pixels.shape[:2]
    out_h, out_w = out_shape
    rr = _scale_coords(h, out_h) - 0.5
    cc = _scale_coords(w, out_w) - 0.5
    grid_r, grid_c = np.meshgrid(rr, cc, indexing="ij")
    return _sample_bilinear(pixels, grid_r, grid_c)


def rotated_shape(height: int, width: int, angle: float) -> tuple[int, int]:
    t = math.radians(angle)
    c, s = abs(math.cos(t)), abs(math.sin(t))
    # guard against ceil(20.000000000000004) at lattice angles
    out_w = max(1, math.ceil(width * c + height * s - 1e-9))
    out_h = max(1, math.ceil(width * s + height * c - 1e-9))
    return out_h, out_w


def rotation_source_coords(height: int, width: int, angle: float):
    """Source (row, col) continuous coordinates for every pixel of the rotated canvas.

    The canvas is enlarged to hold the whole rotated rectangle; positive angles
    turn the content counter-clockwise as displayed (y axis pointing down).
    """
    out_h, out_w = rotated_shape(height, width, angle)
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.meshgrid(
        np.arange(out_h, dtype=np.float64) + 0.5 - out_h / 2.0,
        np.arange(out_w, dtype=np.float64) + 0.5 - out_w / 2.0,
        indexing="ij",
    )
    # inverse of the forward map (x, y) -> (c*x + s*y, -s*x + c*y)
    src_x = c * xx - s * yy + width / 2.0
    src_y = s * xx + c * yy + height / 2.0
    return src_y, src_x


def rotate_mask(mask: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the mask center by inverse mapping, nearest-neighbour sampling."""
    if abs(angle) > 180:
        raise MaskError(f"angle {angle} outside [-180, 180]")
    h, w = mask.shape
    if angle == 0:
        return np.ascontiguousarray(mask, dtype=np.uint8).copy()
    src_y, src_x = rotation_source_coords(h, w, angle)
    r = np.floor(src_y).astype(np.intp)
    c = np.floor(src_x).astype(np.intp)
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.zeros(src_y.shape, dtype=np.uint8)
    out[inside] = mask[r[inside], c[inside]]
    return out


def rotate_pixels(pixels: np.ndarray, angle: float) -> np.ndarray:
    h, w = pixels.shape[:2]
    if angle == 0:
        return pixels.copy()
    src_y, src_x = rotation_source_coords(h, w, angle)
    return _sample_bilinear(pixels, src_y - 0.5, src_x - 0.5)


def _sample_bilinear(pixels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    src = np.asarray(pixels, dtype=np.float64)
    if src.ndim == 2:
        src = src[:, :, None]
    coords = np.stack([rows, cols])
    out = np.empty(rows.shape + (src.shape[2],), dtype=np.float64)
    for ch in range(src.shape[2]):
        out[..., ch] = ndimage.map_coordinates(src[..., ch], coords, order=1, mode="nearest")
    if pixels.ndim == 2:
        out = out[..., 0]
    if np.issubdtype(pixels.dtype, np.integer):
        info = np.iinfo(pixels.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(pixels.dtype)


def masks_overlap(a: np.ndarray, a_at: tuple[int, int], b: np.ndarray, b_at: tuple[int, int]) -> bool:
    """True iff some pixel is set in both masks once placed at their (x, y) offsets."""
    ax, ay = a_at
    bx, by = b_at
    x0 = max(ax, bx)
    y0 = max(ay, by)
    x1 = min(ax + a.shape[1], bx + b.shape[1])
    y1 = min(ay + a.shape[0], by + b.shape[0])
    if x0 >= x1 or y0 >= y1:
        return False
    sa = a[y0 - ay:y1 - ay, x0 - ax:x1 - ax]
    sb = b[y0 - by:y1 - by, x0 - bx:x1 - bx]
    return bool(np.logical_and(sa, sb).any())


def gaussian_kernel1d(k: int) -> np.ndarray:
    """Normalised 1-D Gaussian of odd length ``k`` (sigma as OpenCV derives it from k)."""
    if k < 1 or k % 2 == 0:
        raise MaskError(f"kernel size must be odd and positive, got {k}")
    sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    x = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def blur_mask(mask: np.ndarray, k: int) -> np.ndarray:
    """Separable k x k Gaussian blur of a 0/1 mask, zero outside; result in [0, 1]."""
    g = gaussian_kernel1d(k)
    f = np.asarray(mask, dtype=np.float64)
    f = ndimage.correlate1d(f, g, axis=0, mode="constant", cval=0.0)
    f = ndimage.correlate1d(f, g, axis=1, mode="constant", cval=0.0)
    f[f > 1.0 - 1e-9] = 1.0
    f[f < 1e-12] = 0.0
    return f
