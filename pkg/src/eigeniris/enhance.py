"""Contrast enhancement applied before hallucination and to dictionary images.

Three methods are available besides the identity: a saturating percentile
stretch (``stretch``), contrast-limited adaptive histogram equalization
(``clahe``) and multi-scale retinex (``msr``). Their spatial parameters are
given for the 231-pixel HR frame and scale with image width.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .image import GrayImage, blur_array, round_half_up

METHODS = ("none", "stretch", "clahe", "msr")
HR_REFERENCE_SIZE = 231
MSR_LOG_OFFSET = 1.0 / 255.0


@dataclass(frozen=True)
class EnhanceMethod:
    kind: str = "none"
    clahe_tiles_hr: tuple[int, int] = (8, 8)
    clahe_clip: float = 0.01
    msr_sizes_hr: tuple[int, int, int] = (13, 27, 37)
    stretch_sat: float = 0.01

    def __post_init__(self):
        if self.kind not in METHODS:
            raise InvalidArgumentError(f"unknown enhancement {self.kind!r}; expected one of {METHODS}")
        if min(self.clahe_tiles_hr) < 1:
            raise InvalidArgumentError("CLAHE tile counts must be >= 1")
        if not 0 < self.clahe_clip <= 1:
            raise InvalidArgumentError("CLAHE clip limit must be in (0, 1]")
        sizes = self.msr_sizes_hr
        if len(sizes) != 3 or any(s % 2 == 0 or s < 3 for s in sizes) or list(sizes) != sorted(set(sizes)):
            raise InvalidArgumentError("MSR sizes must be three strictly increasing odd values >= 3")
        if not 0 <= self.stretch_sat < 0.5:
            raise InvalidArgumentError("stretch saturation must be in [0, 0.5)")

    @property
    def tag(self) -> str:
        return self.kind

    def scaled_tiles(self, ratio: float) -> tuple[int, int]:
        return tuple(max(1, round_half_up(t * ratio)) for t in self.clahe_tiles_hr)

    def scaled_msr_sizes(self, ratio: float) -> tuple[int, int, int]:
        return tuple(_nearest_odd(s * ratio) for s in self.msr_sizes_hr)


def _nearest_odd(v: float) -> int:
    return max(3, 2 * round_half_up((v - 1.0) / 2.0) + 1)


def enhance(img: GrayImage, method: EnhanceMethod, hr_reference_size: int = HR_REFERENCE_SIZE) -> GrayImage:
    """Apply ``method`` with parameters scaled by ``img.width / hr_reference_size``."""
    if hr_reference_size <= 0:
        raise InvalidArgumentError("hr_reference_size must be > 0")
    if method.kind == "none":
        return img
    ratio = img.width / hr_reference_size
    if method.kind == "stretch":
        return percentile_stretch(img, method.stretch_sat)
    if method.kind == "clahe":
        return clahe(img, method.scaled_tiles(ratio), method.clahe_clip)
    return msr(img, method.scaled_msr_sizes(ratio))


def percentile_stretch(img: GrayImage, sat: float = 0.01) -> GrayImage:
    """Linear stretch that saturates a fraction ``sat`` of samples at each tail."""
    if not 0 <= sat < 0.5:
        raise InvalidArgumentError("sat must be in [0, 0.5)")
    x = img.data
    lo = float(np.quantile(x, sat))
    hi = float(np.quantile(x, 1.0 - sat))
    if hi <= lo:
        return GrayImage.constant(img.width, img.height, 0.5)
    return GrayImage.from_array((x - lo) / (hi - lo))


def _tile_edges(n: int, count: int) -> np.ndarray:
    return (np.arange(count + 1) * n) // count


def _interp_coords(n: int, centers: np.ndarray):
    """Lower tile index, upper tile index and blend weight for each pixel row/col."""
    pos = np.arange(n, dtype=np.float64)
    if len(centers) == 1:
        zeros = np.zeros(n, dtype=np.int64)
        return zeros, zeros, np.zeros(n)
    pos = np.clip(pos, centers[0], centers[-1])
    lo = np.clip(np.searchsorted(centers, pos, side="right") - 1, 0, len(centers) - 2)
    w = (pos - centers[lo]) / (centers[lo + 1] - centers[lo])
    return lo, lo + 1, w


def clahe_tile_mappings(img: GrayImage, tiles: tuple[int, int], clip: float):
    """Per-tile 256-level lookup tables, shape (rows, cols, 256), plus tile edges."""
    h, w = img.shape
    rows, cols = min(tiles[0], h), min(tiles[1], w)
    ey, ex = _tile_edges(h, rows), _tile_edges(w, cols)
    bins = np.minimum((img.data * 256.0).astype(np.int64), 255)
    maps = np.empty((rows, cols, 256))
    for i in range(rows):
        for j in range(cols):
            tile = bins[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            limit = clip * n
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / 256.0
            maps[i, j] = np.cumsum(hist) / n
    return maps, ey, ex


def clahe(img: GrayImage, tiles: tuple[int, int] = (8, 8), clip: float = 0.01) -> GrayImage:
    """Contrast-limited adaptive histogram equalization.

    Histogram bins are clipped at ``clip * tile_pixels`` counts and the excess
    is spread uniformly over all 256 bins in a single pass. Each pixel blends
    the lookup tables of the four nearest tile centres bilinearly; pixels
    beyond the outermost centres use the nearest tiles only. Tile counts larger
    than the image are reduced to the image size.
    """
    if min(tiles) < 1:
        raise InvalidArgumentError("tile counts must be >= 1")
    if not 0 < clip <= 1:
        raise InvalidArgumentError("clip must be in (0, 1]")
    maps, ey, ex = clahe_tile_mappings(img, tiles, clip)
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    y0, y1, wy = _interp_coords(img.height, cy)
    x0, x1, wx = _interp_coords(img.width, cx)
    b = np.minimum((img.data * 256.0).astype(np.int64), 255)
    Y0, Y1, WY = y0[:, None], y1[:, None], wy[:, None]
    X0, X1, WX = x0[None, :], x1[None, :], wx[None, :]
    out = ((1 - WY) * (1 - WX) * maps[Y0, X0, b] + (1 - WY) * WX * maps[Y0, X1, b]
           + WY * (1 - WX) * maps[Y1, X0, b] + WY * WX * maps[Y1, X1, b])
    return GrayImage.from_array(out)


def msr(img: GrayImage, sizes: tuple[int, int, int] = (13, 27, 37)) -> GrayImage:
    """Equal-weight multi-scale retinex, min-max rescaled to [0, 1].

    Surround ``k`` is a normalized Gaussian window of ``sizes[k]`` taps with
    sigma ``sizes[k] / 6``.
    """
    for s in sizes:
        if s < 3 or s % 2 == 0:
            raise InvalidArgumentError(f"MSR filter size {s} must be odd and >= 3")
    x = img.data
    log_x = np.log(x + MSR_LOG_OFFSET)
    r = np.zeros_like(x)
    for s in sizes:
        surround = blur_array(x, s / 6.0, radius=(s - 1) // 2)
        r += log_x - np.log(np.maximum(surround, 0.0) + MSR_LOG_OFFSET)
    r /= len(sizes)
    span = r.max() - r.min()
    if span < 1e-9:
        return GrayImage.constant(img.width, img.height, 0.5)
    return GrayImage.from_array((r - r.min()) / span)
