"""Log-Gabor iris codes and masked, rotation-compensated Hamming distance.

Each row of the 20x240 normalized iris is filtered independently with a
one-sided 1-D log-Gabor transfer function. The complex response is quantized
to two phase bits per sample, stored interleaved (real, imaginary) along the
columns, which gives a 20x480 code.

Template file: 16-byte header ``struct "<4sHHII"`` (magic ``IRTC``, version,
reserved, rows, cols) followed by the code bits and the mask bits, each
row-major and packed 8 per byte (``numpy.packbits``, big-endian bit order).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, MalformedFileError, MissingFileError, UnsupportedFormatError
from .geometry import NORM_COLS, NORM_ROWS, NormalizedIris

TEMPLATE_MAGIC = b"IRTC"
TEMPLATE_VERSION = 1
_HEADER = struct.Struct("<4sHHII")


@dataclass(frozen=True)
class LgParams:
    wavelength: float = 18.0
    sigma_over_f: float = 0.5
    shift_range: int = 8
    amplitude_threshold: float = 1e-6

    def __post_init__(self):
        if not self.wavelength > 2:
            raise InvalidArgumentError("wavelength must be > 2 samples")
        if not 0 < self.sigma_over_f < 1:
            raise InvalidArgumentError("sigma_over_f must be in (0, 1)")
        if self.shift_range < 0:
            raise InvalidArgumentError("shift_range must be >= 0")


@dataclass(frozen=True, eq=False)
class IrisTemplate:
    code: np.ndarray  # bool (rows, 2 * cols)
    mask: np.ndarray  # bool, both bits of a sample share validity

    def __post_init__(self):
        code = np.asarray(self.code, dtype=bool)
        mask = np.asarray(self.mask, dtype=bool)
        if code.shape != mask.shape or code.ndim != 2 or code.shape[1] % 2:
            raise InvalidArgumentError(f"code {code.shape} and mask {mask.shape} must match with an even column count")
        if np.any(mask[:, 0::2] != mask[:, 1::2]):
            raise InvalidArgumentError("both bits of a sample must share validity")
        code.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "code", code)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.code.shape


def log_gabor_filter(n: int, wavelength: float, sigma_over_f: float) -> np.ndarray:
    """Frequency response on ``numpy.fft.fftfreq(n)``; zero at DC and negative frequencies."""
    f = np.fft.fftfreq(n)
    g = np.zeros(n)
    pos = f > 0
    f0 = 1.0 / wavelength
    g[pos] = np.exp(-(np.log(f[pos] / f0) ** 2) / (2.0 * np.log(sigma_over_f) ** 2))
    return g


def filter_rows(texture: np.ndarray, p: LgParams) -> np.ndarray:
    g = log_gabor_filter(texture.shape[1], p.wavelength, p.sigma_over_f)
    return np.fft.ifft(np.fft.fft(texture, axis=1) * g[None, :], axis=1)


def encode(n: NormalizedIris, p: LgParams | None = None) -> IrisTemplate:
    """Two-bit phase code of every normalized sample.

    Masked samples are replaced by the mean of the valid ones before filtering
    so that occlusion edges do not ring into neighbouring samples.
    """
    p = p or LgParams()
    tex = n.texture.data
    mask = np.asarray(n.mask, dtype=bool)
    if tex.shape != (NORM_ROWS, NORM_COLS) or mask.shape != tex.shape:
        raise InvalidArgumentError(f"normalized iris must be {NORM_ROWS}x{NORM_COLS}, got {tex.shape}")
    if mask.any() and not mask.all():
        tex = np.where(mask, tex, tex[mask].mean())
    resp = filter_rows(tex, p)
    valid = mask & (np.abs(resp) > p.amplitude_threshold)
    code = np.empty((tex.shape[0], 2 * tex.shape[1]), dtype=bool)
    code[:, 0::2] = resp.real >= 0
    code[:, 1::2] = resp.imag >= 0
    return IrisTemplate(code, np.repeat(valid, 2, axis=1))


def hamming(a: IrisTemplate, b: IrisTemplate, p: LgParams | None = None) -> float | None:
    """Minimum masked normalized Hamming distance over +-shift_range sample shifts.

    Returns ``None`` when no shift leaves a jointly valid bit.
    """
    p = p or LgParams()
    if a.shape != b.shape:
        raise InvalidArgumentError(f"template shapes differ: {a.shape} vs {b.shape}")
    hd = kernels.hamming_min(a.code.view(np.uint8), a.mask.view(np.uint8),
                             b.code.view(np.uint8), b.mask.view(np.uint8), p.shift_range)
    return None if hd != hd else float(hd)


def save_template(t: IrisTemplate, path) -> None:
    rows, cols = t.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TEMPLATE_MAGIC, TEMPLATE_VERSION, 0, rows, cols))
        fh.write(np.packbits(t.code.ravel()).tobytes())
        fh.write(np.packbits(t.mask.ravel()).tobytes())


def load_template(path) -> IrisTemplate:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    buf = path.read_bytes()
    if len(buf) < _HEADER.size:
        raise MalformedFileError(f"{path}: truncated template header")
    magic, version, _, rows, cols = _HEADER.unpack_from(buf)
    if magic != TEMPLATE_MAGIC:
        raise UnsupportedFormatError(f"{path}: not an iris template")
    if version != TEMPLATE_VERSION:
        raise UnsupportedFormatError(f"{path}: unsupported template version {version}")
    nbits = rows * cols
    nbytes = (nbits + 7) // 8
    if len(buf) != _HEADER.size + 2 * nbytes:
        raise MalformedFileError(f"{path}: expected {_HEADER.size + 2 * nbytes} bytes, found {len(buf)}")
    raw = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size)
    code = np.unpackbits(raw[:nbytes])[:nbits].reshape(rows, cols).astype(bool)
    mask = np.unpackbits(raw[nbytes:])[:nbits].reshape(rows, cols).astype(bool)
    return IrisTemplate(code, mask)
