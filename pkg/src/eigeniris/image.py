"""Grayscale image container, separable resampling and blurring, PGM/PNG I/O.

Samples are float64 in [0, 1]. Resizing and blurring are separable linear
maps, so each is built once per (size, parameters) as a dense 1-D operator
matrix and applied as ``R_rows @ data @ R_cols.T``. The same matrices are
reused by the re-projection loop in :mod:`eigeniris.eigenpatch`.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    InvalidArgumentError,
    MalformedFileError,
    MissingFileError,
    UnsupportedFormatError,
)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Immutable 2-D luminance image; ``data`` has shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True, order="C")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidArgumentError(f"expected a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("image samples must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidArgumentError("image samples must lie in [0, 1]; use GrayImage.from_array")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "GrayImage":
        """Build an image from any real array, clamping samples to [0, 1]."""
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("image samples must be finite")
        return cls(np.clip(arr, 0.0, 1.0))

    @classmethod
    def constant(cls, width: int, height: int, value: float) -> "GrayImage":
        return cls(np.full((height, width), float(value)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height})"


@dataclass(frozen=True)
class ResampleKernel:
    kind: str = "bicubic"  # "bilinear" or "bicubic"
    a: float = -0.5

    def __post_init__(self):
        if self.kind not in ("bilinear", "bicubic"):
            raise InvalidArgumentError(f"unknown resample kernel {self.kind!r}")


BILINEAR = ResampleKernel("bilinear")
BICUBIC = ResampleKernel("bicubic")


def keys_kernel(x, a=-0.5):
    """Keys cubic convolution kernel evaluated at offsets ``x``."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    xn = x[near]
    out[near] = (a + 2.0) * xn**3 - (a + 3.0) * xn**2 + 1.0
    xf = x[far]
    out[far] = a * xf**3 - 5.0 * a * xf**2 + 8.0 * a * xf - 4.0 * a
    return out


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int, kernel: ResampleKernel = BICUBIC) -> np.ndarray:
    """(n_out, n_in) interpolation operator under the align-centers convention.

    Output sample i reads the source at ``(i + 0.5) * n_in / n_out - 0.5``;
    taps outside the source are clamped to the nearest edge sample.
    """
    if n_in < 1 or n_out < 1:
        raise InvalidArgumentError("resize dimensions must be >= 1")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.int64)
    if kernel.kind == "bilinear":
        offsets = np.arange(0, 2)
        taps = base[:, None] + offsets[None, :]
        weights = 1.0 - np.abs(src[:, None] - taps)
    else:
        offsets = np.arange(-1, 3)
        taps = base[:, None] + offsets[None, :]
        weights = keys_kernel(src[:, None] - taps, kernel.a)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps.shape[1])
    np.add.at(mat, (rows, np.clip(taps, 0, n_in - 1).ravel()), weights.ravel())
    mat.setflags(write=False)
    return mat


def _reflect_index(idx, n):
    # half-sample symmetric reflection: -1 -> 0, n -> n-1
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m >= n, period - 1 - m, m)


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if radius is None:
        radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=256)
def blur_matrix(n: int, sigma: float, radius: int | None = None) -> np.ndarray:
    """(n, n) Gaussian smoothing operator with reflected borders."""
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be > 0")
    k = gaussian_kernel1d(sigma, radius)
    r = (len(k) - 1) // 2
    offsets = np.arange(-r, r + 1)
    cols = _reflect_index(np.arange(n)[:, None] + offsets[None, :], n)
    mat = np.zeros((n, n))
    rows = np.repeat(np.arange(n), len(k))
    np.add.at(mat, (rows, cols.ravel()), np.tile(k, n))
    mat.setflags(write=False)
    return mat


def apply_separable(arr: np.ndarray, rows_op: np.ndarray, cols_op: np.ndarray) -> np.ndarray:
    return rows_op @ arr @ cols_op.T


def resample_array(arr: np.ndarray, out_w: int, out_h: int, kernel: ResampleKernel = BICUBIC) -> np.ndarray:
    """Unclamped resize of a raw 2-D array."""
    if out_w < 1 or out_h < 1:
        raise InvalidArgumentError(f"invalid output size {out_w}x{out_h}")
    h, w = arr.shape
    return apply_separable(arr, resize_matrix(h, out_h, kernel), resize_matrix(w, out_w, kernel))


def blur_array(arr: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Unclamped separable Gaussian blur of a raw 2-D array."""
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be > 0")
    h, w = arr.shape
    return apply_separable(arr, blur_matrix(h, float(sigma), radius), blur_matrix(w, float(sigma), radius))


def resize(img: GrayImage, out_w: int, out_h: int, kernel: ResampleKernel = BICUBIC) -> GrayImage:
    if out_w < 1 or out_h < 1:
        raise InvalidArgumentError(f"invalid output size {out_w}x{out_h}")
    return GrayImage.from_array(resample_array(img.data, out_w, out_h, kernel))


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    if not sigma > 0:
        raise InvalidArgumentError("sigma must be > 0")
    return GrayImage.from_array(blur_array(img.data, sigma))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def downsampled_side(side: int, factor: float) -> int:
    """Target side length for a down-sampling ``factor``: round(side / factor)."""
    return max(1, round_half_up(side / factor))


def psnr(test: GrayImage | np.ndarray, reference: GrayImage | np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-peak images."""
    a = test.data if isinstance(test, GrayImage) else np.asarray(test, dtype=np.float64)
    b = reference.data if isinstance(reference, GrayImage) else np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# --- file I/O ---------------------------------------------------------------

def _read_pgm_header(buf: bytes, path):
    """Parse a P5 header; returns (width, height, maxval, payload_offset)."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedFileError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise MalformedFileError(f"{path}: PGM header must end with a single whitespace byte")
    pos += 1
    magic = tokens[0]
    if magic != b"P5":
        raise UnsupportedFormatError(f"{path}: unsupported magic {magic!r} (only binary P5 PGM)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedFileError(f"{path}: non-numeric PGM header field") from exc
    if width < 1 or height < 1 or maxval < 1:
        raise MalformedFileError(f"{path}: invalid PGM dimensions or maxval")
    if maxval > 255:
        raise UnsupportedFormatError(f"{path}: 16-bit PGM (maxval {maxval}) is not supported")
    return width, height, maxval, pos


def load_image(path) -> GrayImage:
    """Load an 8-bit binary PGM or (with Pillow installed) a grayscale PNG."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    buf = path.read_bytes()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    if buf[:1] != b"P":
        raise UnsupportedFormatError(f"{path}: unrecognised image format")
    width, height, maxval, offset = _read_pgm_header(buf, path)
    payload = buf[offset:offset + width * height]
    if len(payload) < width * height:
        raise MalformedFileError(
            f"{path}: truncated PGM payload ({len(payload)} of {width * height} bytes)"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(arr.astype(np.float64) / maxval)


def to_uint8(img: GrayImage) -> np.ndarray:
    return np.clip(np.floor(img.data * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(img: GrayImage, path) -> None:
    """Write ``img`` as PGM (default) or PNG when the suffix is ``.png``."""
    path = Path(path)
    if not path.parent.is_dir():
        raise MissingFileError(f"{path.parent}: directory does not exist")
    if path.suffix.lower() == ".png":
        _save_png(img, path)
        return
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(header + to_uint8(img).tobytes())
    tmp.replace(path)


def _pillow():
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise UnsupportedFormatError("PNG support requires Pillow (pip install artifact[png])") from exc
    return Image


def _load_png(path) -> GrayImage:
    Image = _pillow()
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I", "F"):
            raise UnsupportedFormatError(f"{path}: PNG mode {im.mode} (>8-bit) is not supported")
        if im.mode not in ("L", "LA", "1", "P"):
            raise UnsupportedFormatError(f"{path}: colour PNG (mode {im.mode}) is not supported")
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return GrayImage(arr / 255.0)


def _save_png(img: GrayImage, path) -> None:
    Image = _pillow()
    Image.fromarray(to_uint8(img)).save(path)
