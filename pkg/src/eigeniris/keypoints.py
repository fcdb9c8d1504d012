"""Scale-space keypoint matcher on the aligned (not unwrapped) iris region.

Detection follows the difference-of-Gaussians pipeline: blurred octaves,
26-neighbour extrema, quadratic sub-sample refinement, low-contrast and
edge-response rejection, dominant orientations from a 36-bin histogram and a
4x4x8 gradient descriptor. The per-keypoint histogram loops run in
:mod:`eigeniris.kernels`.

Matching keeps mutual nearest neighbours that pass the ratio test in both
directions, then drops matches whose displacement disagrees with the median
displacement. The score is the surviving count over the mean keypoint count.

Keypoint cache file: header ``struct "<4sHHI32s"`` (magic ``KPC1``, version,
reserved, count, sha256 of the source image samples), then per keypoint
``"<4d"`` (x, y, scale, orientation) and 128 descriptor bytes quantized in
steps of 1/512.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .errors import InvalidArgumentError, MalformedFileError, UnsupportedFormatError
from .geometry import IrisAnnotation, region_mask
from .image import GrayImage, blur_array

CACHE_MAGIC = b"KPC1"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHI32s")
_CACHE_RECORD = struct.Struct("<4d128s")
DESCRIPTOR_STEP = 1.0 / 512.0
DESCRIPTOR_SIZE = 128


@dataclass(frozen=True, eq=False)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    descriptor: np.ndarray


@dataclass(frozen=True)
class DetectorParams:
    n_octaves: int = 3
    scales_per_octave: int = 3
    sigma0: float = 1.6
    input_sigma: float = 0.5
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    border: int = 5
    orientation_peak_ratio: float = 0.8
    descriptor_clamp: float = 0.2


@dataclass(frozen=True)
class KpMatchParams:
    ratio_threshold: float = 0.8
    orientation_tolerance: float = 0.35
    length_tolerance: float = 0.35
    mask_required: bool = True
    direction_min_length: float = 1.0  # pixels; below this the median direction is noise

    def __post_init__(self):
        if not 0 < self.ratio_threshold < 1:
            raise InvalidArgumentError("ratio_threshold must be in (0, 1)")


# --- detection ---------------------------------------------------------------

def _gradients(g):
    p = np.pad(g, 1, mode="edge")
    dx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    dy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    mag = np.hypot(dx, dy)
    ang = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    ang[ang >= 2.0 * np.pi] = 0.0
    return mag, ang


def _octave_stack(base, dp: DetectorParams):
    S = dp.scales_per_octave
    k = 2.0 ** (1.0 / S)
    layers = [base]
    for s in range(1, S + 3):
        prev = dp.sigma0 * k ** (s - 1)
        inc = math.sqrt((prev * k) ** 2 - prev**2)
        layers.append(blur_array(layers[-1], inc))
    return np.stack(layers)


def _scale_space_extrema(dog, threshold, border):
    """Candidate (layer, row, col) of strict-or-equal 26-neighbour extrema."""
    found = []
    for s in range(1, dog.shape[0] - 1):
        cube = dog[s - 1:s + 2]
        win = sliding_window_view(cube, (3, 3, 3))[0]  # (H-2, W-2, 3, 3, 3)
        flat = win.reshape(win.shape[0], win.shape[1], 27)
        centre = dog[s, 1:-1, 1:-1]
        is_max = (centre >= flat.max(axis=2)) & (centre > threshold)
        is_min = (centre <= flat.min(axis=2)) & (centre < -threshold)
        rr, cc = np.nonzero(is_max | is_min)
        rr, cc = rr + 1, cc + 1
        keep = (rr >= border) & (rr < dog.shape[1] - border) & (cc >= border) & (cc < dog.shape[2] - border)
        found.extend((s, int(r), int(c)) for r, c in zip(rr[keep], cc[keep]))
    return found


def _refine(dog, s, r, c, dp: DetectorParams):
    """Quadratic interpolation of an extremum; None when rejected."""
    n_layers, h, w = dog.shape
    for _ in range(5):
        v = dog[s, r, c]
        g = 0.5 * np.array([
            dog[s, r, c + 1] - dog[s, r, c - 1],
            dog[s, r + 1, c] - dog[s, r - 1, c],
            dog[s + 1, r, c] - dog[s - 1, r, c],
        ])
        dxx = dog[s, r, c + 1] + dog[s, r, c - 1] - 2 * v
        dyy = dog[s, r + 1, c] + dog[s, r - 1, c] - 2 * v
        dss = dog[s + 1, r, c] + dog[s - 1, r, c] - 2 * v
        dxy = 0.25 * (dog[s, r + 1, c + 1] - dog[s, r + 1, c - 1] - dog[s, r - 1, c + 1] + dog[s, r - 1, c - 1])
        dxs = 0.25 * (dog[s + 1, r, c + 1] - dog[s + 1, r, c - 1] - dog[s - 1, r, c + 1] + dog[s - 1, r, c - 1])
        dys = 0.25 * (dog[s + 1, r + 1, c] - dog[s + 1, r - 1, c] - dog[s - 1, r + 1, c] + dog[s - 1, r - 1, c])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            off = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(off) < 0.5):
            break
        c += int(round(off[0]))
        r += int(round(off[1]))
        s += int(round(off[2]))
        if not (1 <= s <= n_layers - 2 and dp.border <= r < h - dp.border and dp.border <= c < w - dp.border):
            return None
    else:
        return None
    contrast = v + 0.5 * float(g @ off)
    if abs(contrast) < dp.contrast_threshold:
        return None
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    if det <= 0 or tr * tr * dp.edge_ratio >= (dp.edge_ratio + 1) ** 2 * det:
        return None
    return c + off[0], r + off[1], s + off[2], s


def _dominant_orientations(hist, peak_ratio):
    n = len(hist)
    sm = np.zeros(n)
    for off, wgt in zip(range(-2, 3), (1, 4, 6, 4, 1)):
        sm += wgt * np.roll(hist, off)
    sm /= 16.0
    top = sm.max()
    if top <= 0:
        return []
    out = []
    for b in range(n):
        left, right = sm[(b - 1) % n], sm[(b + 1) % n]
        if sm[b] > left and sm[b] > right and sm[b] >= peak_ratio * top:
            denom = left - 2 * sm[b] + right
            frac = 0.5 * (left - right) / denom if denom != 0 else 0.0
            out.append(((b + frac) % n) * 2.0 * math.pi / n)
    return out


def _normalize_descriptors(raw, clamp):
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    ok = norm[:, 0] > 0
    d = np.divide(raw, norm, out=np.zeros_like(raw), where=norm > 0)
    d = np.minimum(d, clamp)
    n2 = np.linalg.norm(d, axis=1, keepdims=True)
    d = np.divide(d, n2, out=np.zeros_like(d), where=n2 > 0)
    return d, ok


def detect(img: GrayImage, ann: IrisAnnotation | None = None, params: KpMatchParams | None = None,
           detector: DetectorParams | None = None) -> list[Keypoint]:
    """Keypoints of ``img``, restricted to the iris region of ``ann`` when masking is on."""
    params = params or KpMatchParams()
    dp = detector or DetectorParams()
    S = dp.scales_per_octave
    base = blur_array(img.data, math.sqrt(max(dp.sigma0**2 - dp.input_sigma**2, 1e-12)))
    keypoints = []
    for octave in range(dp.n_octaves):
        if min(base.shape) < 2 * dp.border + 3:
            break
        unit = 2.0**octave
        gauss = _octave_stack(base, dp)
        dog = gauss[1:] - gauss[:-1]
        grads = {}
        by_layer = {}
        for s, r, c in _scale_space_extrema(dog, 0.5 * dp.contrast_threshold / S, dp.border):
            ref = _refine(dog, s, r, c, dp)
            if ref is None:
                continue
            x, y, sl, layer = ref
            if ann is not None and params.mask_required and not region_mask(ann, x * unit, y * unit):
                continue
            if layer not in grads:
                grads[layer] = _gradients(gauss[layer])
            mag, ang = grads[layer]
            sigma_oct = dp.sigma0 * 2.0 ** (sl / S)
            hist = kernels.orientation_histograms(mag, ang, np.array([[x, y, sigma_oct]]))[0]
            for ori in _dominant_orientations(hist, dp.orientation_peak_ratio):
                by_layer.setdefault(layer, []).append((x, y, sigma_oct, ori))
        for layer in sorted(by_layer):
            mag, ang = grads[layer]
            recs = np.array(by_layer[layer])
            desc, ok = _normalize_descriptors(kernels.sift_descriptors(mag, ang, recs), dp.descriptor_clamp)
            for (x, y, so, ori), d, good in zip(recs, desc, ok):
                if good:
                    keypoints.append(Keypoint(float(x * unit), float(y * unit), float(so * unit), float(ori), d))
        base = gauss[S][::2, ::2]
    return keypoints


# --- matching ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Array form used for matching: positions (K, 2) and descriptors (K, 128)."""
    xy: np.ndarray
    descriptors: np.ndarray

    @classmethod
    def from_keypoints(cls, kps) -> "KeypointSet":
        if isinstance(kps, KeypointSet):
            return kps
        kps = list(kps)
        xy = np.array([(k.x, k.y) for k in kps], dtype=np.float64).reshape(-1, 2)
        d = np.array([k.descriptor for k in kps], dtype=np.float64).reshape(len(kps), DESCRIPTOR_SIZE)
        return cls(xy, d)

    def __len__(self):
        return self.xy.shape[0]


def _distances(da, db):
    """Euclidean distance matrix, computed in a canonical operand order so that
    ``_distances(db, da)`` is the exact transpose."""
    swap = hashlib.sha1(da.tobytes()).digest() > hashlib.sha1(db.tobytes()).digest()
    if swap:
        da, db = db, da
    sq = (da * da).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * (da @ db.T)
    d = np.sqrt(np.maximum(sq, 0.0))
    return d.T if swap else d


def _ratio_ok(d, axis, ratio):
    if d.shape[axis] < 2:
        return np.ones(d.shape[1 - axis], dtype=bool)
    part = np.partition(d, 1, axis=axis)
    return part.take(0, axis=axis) < ratio * part.take(1, axis=axis)


def candidate_matches(a, b, ratio: float = 0.8) -> list[tuple[int, int]]:
    """Mutual nearest neighbours passing the ratio test from both sides."""
    a, b = KeypointSet.from_keypoints(a), KeypointSet.from_keypoints(b)
    if len(a) == 0 or len(b) == 0:
        return []
    d = _distances(a.descriptors, b.descriptors)
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    ok = (nn_ba[nn_ab] == np.arange(len(a))) & _ratio_ok(d, 1, ratio) & _ratio_ok(d, 0, ratio)[nn_ab]
    return [(int(i), int(nn_ab[i])) for i in np.nonzero(ok)[0]]


def geometric_filter(a, b, matches, orientation_tolerance=0.35, length_tolerance=0.35,
                     direction_min_length=1.0):
    """Keep matches whose displacement agrees with the median displacement.

    The direction test only applies when the median displacement is at least
    ``direction_min_length`` pixels long; shorter medians are checked on
    length alone.
    """
    if not matches:
        return []
    a, b = KeypointSet.from_keypoints(a), KeypointSet.from_keypoints(b)
    idx = np.array(matches)
    disp = b.xy[idx[:, 1]] - a.xy[idx[:, 0]]
    med = np.median(disp, axis=0)
    med_len = math.hypot(med[0], med[1])
    lens = np.hypot(disp[:, 0], disp[:, 1])
    cross = disp[:, 0] * med[1] - disp[:, 1] * med[0]
    dot = disp[:, 0] * med[0] + disp[:, 1] * med[1]
    dev = np.arctan2(np.abs(cross), dot)  # 0 when either vector is zero
    direction_ok = (dev <= orientation_tolerance) | (med_len < direction_min_length)
    keep = direction_ok & (np.abs(lens - med_len) <= length_tolerance * (med_len + 1.0))
    return [m for m, k in zip(matches, keep) if k]


def match_score(a_kps, b_kps, p: KpMatchParams | None = None) -> float:
    """Surviving matches divided by the mean number of keypoints in the two sets."""
    p = p or KpMatchParams()
    a_kps, b_kps = KeypointSet.from_keypoints(a_kps), KeypointSet.from_keypoints(b_kps)
    if len(a_kps) == 0 or len(b_kps) == 0:
        return 0.0
    matches = candidate_matches(a_kps, b_kps, p.ratio_threshold)
    kept = geometric_filter(a_kps, b_kps, matches, p.orientation_tolerance, p.length_tolerance,
                            p.direction_min_length)
    return len(kept) / ((len(a_kps) + len(b_kps)) / 2.0)


# --- cache -------------------------------------------------------------------

def image_hash(img: GrayImage) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(img.data).tobytes()).digest()


def quantize_descriptor(d: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(d) / DESCRIPTOR_STEP + 0.5), 0, 255).astype(np.uint8)


def quantized(kps) -> list[Keypoint]:
    """Keypoints with descriptors passed through the cache quantization."""
    return [Keypoint(k.x, k.y, k.scale, k.orientation, quantize_descriptor(k.descriptor) * DESCRIPTOR_STEP)
            for k in kps]


def save_keypoints(kps, path, source_hash: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, 0, len(kps), source_hash))
        for k in kps:
            fh.write(_CACHE_RECORD.pack(k.x, k.y, k.scale, k.orientation, quantize_descriptor(k.descriptor).tobytes()))
    tmp.replace(path)


def load_keypoints(path, expected_hash: bytes | None = None) -> list[Keypoint] | None:
    """Read a cache file; ``None`` if it is missing or was built from other content."""
    path = Path(path)
    if not path.is_file():
        return None
    buf = path.read_bytes()
    if len(buf) < _CACHE_HEADER.size:
        raise MalformedFileError(f"{path}: truncated keypoint cache")
    magic, version, _, count, src = _CACHE_HEADER.unpack_from(buf)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise UnsupportedFormatError(f"{path}: not a keypoint cache (or unsupported version)")
    if expected_hash is not None and src != expected_hash:
        return None
    if len(buf) != _CACHE_HEADER.size + count * _CACHE_RECORD.size:
        raise MalformedFileError(f"{path}: keypoint cache length does not match its count")
    out = []
    for n in range(count):
        x, y, sc, ori, raw = _CACHE_RECORD.unpack_from(buf, _CACHE_HEADER.size + n * _CACHE_RECORD.size)
        out.append(Keypoint(x, y, sc, ori, np.frombuffer(raw, dtype=np.uint8) * DESCRIPTOR_STEP))
    return out
