"""Eigen-patch hallucination and iterative re-projection.

An LR image is cut into overlapping square patches on a fixed grid. For every
grid position the dictionary holds the collocated LR and HR patches of ``M``
training images. The LR patch is projected onto the PCA basis of its
training patches. The resulting reconstruction weights then combine the
collocated HR patches. Overlapping HR patches are averaged, and the
preliminary image is refined by gradient-style back-projection against the
degradation model ``X = D B Y``.

Dictionaries are stored in factored form. For position ``i`` with
mean-subtracted LR training matrix ``A`` (``dl x M``) and HR matrix ``H``
(``dh x M``), the eigenpairs ``(E, lam)`` of ``A.T @ A`` are kept together
with ``A E lam^-1/2`` (LR sample-space eigenvectors) and ``H E lam^-1/2``
(the same directions rendered in HR space). ``A`` and ``H`` themselves are
recoverable as ``basis * sqrt(lam) @ E.T``.

Dictionary file layout (little-endian)::

    header   struct "<8sIIIIIIIIId16s32s"
             magic, version, lr_side, hr_side, lr_patch, lr_overlap, factor,
             n_train, n_positions, n_components, blur_sigma, enhancement tag,
             sha256 of the training inputs
    ranks    uint32[P]
    mean_l   float64[P, dl]
    mean_h   float64[P, dh]
    eigvals  float64[P, K]
    eigvecs  float64[P, M, K]
    lr_basis float64[P, dl, K]
    hr_basis float64[P, dh, K]
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np

from .enhance import EnhanceMethod, enhance
from .errors import InvalidArgumentError, MalformedFileError, MissingFileError, NumericalError, UnsupportedFormatError
from .image import BICUBIC, GrayImage, blur_matrix, downsampled_side, resize_matrix

DICT_MAGIC = b"EIGPATCH"
DICT_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIIIIId16s32s")


@dataclass(frozen=True)
class HallucinationConfig:
    tau: float = 0.02
    epsilon: float = 1e-5
    max_iters: int = 500
    blur_per_factor: float = 0.4
    blur_sigma: float | None = None  # overrides blur_per_factor * factor; 0 disables B
    lr_patch: int = 4
    lr_overlap: int = 2
    retention: float = 1e-8

    def __post_init__(self):
        if self.tau < 0 or self.epsilon <= 0 or self.max_iters < 1:
            raise InvalidArgumentError("need tau >= 0, epsilon > 0 and max_iters >= 1")
        if not 1 <= self.lr_overlap < self.lr_patch:
            raise InvalidArgumentError("need 1 <= lr_overlap < lr_patch")

    def sigma_for(self, factor: int) -> float:
        if self.blur_sigma is not None:
            return float(self.blur_sigma)
        return self.blur_per_factor * factor


def _axis_positions(side: int, patch: int, step: int) -> list[int]:
    if patch > side:
        raise InvalidArgumentError(f"patch size {patch} exceeds image side {side}")
    pos = list(range(0, side - patch + 1, step))
    if pos[-1] != side - patch:
        pos.append(side - patch)
    return pos


@dataclass(frozen=True)
class PatchGrid:
    """Square patch layout shared by an LR image and its HR counterpart.

    LR positions advance by ``lr_patch - lr_overlap`` with the final patch
    clamped to the border. HR patches are ``factor`` times larger and sit at
    ``factor`` times the LR position, except that the final patch of each axis
    is pinned to the HR border (``hr_side`` need not equal ``lr_side * factor``).
    """

    lr_side: int
    hr_side: int
    lr_patch: int
    lr_overlap: int
    factor: int

    def __post_init__(self):
        if not 1 <= self.lr_overlap < self.lr_patch <= self.lr_side:
            raise InvalidArgumentError(
                f"invalid grid: need 1 <= overlap ({self.lr_overlap}) < patch ({self.lr_patch}) <= LR side ({self.lr_side})"
            )
        if self.hr_patch > self.hr_side:
            raise InvalidArgumentError("HR patch larger than HR image")

    @property
    def step(self) -> int:
        return self.lr_patch - self.lr_overlap

    @property
    def hr_patch(self) -> int:
        return self.lr_patch * self.factor

    @cached_property
    def lr_axis(self) -> list[int]:
        return _axis_positions(self.lr_side, self.lr_patch, self.step)

    @cached_property
    def hr_axis(self) -> list[int]:
        last = self.hr_side - self.hr_patch
        pos = [min(p * self.factor, last) for p in self.lr_axis]
        pos[-1] = last
        return pos

    @property
    def patch_positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.lr_axis for c in self.lr_axis]

    @property
    def hr_positions(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.hr_axis for c in self.hr_axis]

    @property
    def n_positions(self) -> int:
        return len(self.lr_axis) ** 2

    @cached_property
    def lr_index(self) -> np.ndarray:
        """Flat pixel indices of every LR patch, shape (P, lr_patch**2)."""
        return _patch_index(self.lr_axis, self.lr_patch, self.lr_side)

    @cached_property
    def hr_index(self) -> np.ndarray:
        return _patch_index(self.hr_axis, self.hr_patch, self.hr_side)


def _patch_index(axis, patch, side):
    axis = np.asarray(axis)
    rows = axis[:, None] + np.arange(patch)[None, :]
    flat = rows[:, None, :, None] * side + rows[None, :, None, :]
    return flat.reshape(len(axis) ** 2, patch * patch)


def make_grid(hr_side: int, factor: int, cfg: HallucinationConfig) -> PatchGrid:
    return PatchGrid(downsampled_side(hr_side, factor), hr_side, cfg.lr_patch, cfg.lr_overlap, factor)


# --- degradation model -------------------------------------------------------

@lru_cache(maxsize=64)
def degradation_matrix(hr_side: int, factor: int, sigma: float) -> np.ndarray:
    """1-D operator for D B: blur at HR scale, then bicubic down-size."""
    down = resize_matrix(hr_side, downsampled_side(hr_side, factor), BICUBIC)
    if sigma > 0:
        down = down @ blur_matrix(hr_side, sigma)
    down.setflags(write=False)
    return down


@lru_cache(maxsize=64)
def backprojection_matrix(hr_side: int, factor: int, sigma: float) -> np.ndarray:
    """1-D operator for B U: bicubic up-size, then blur at HR scale."""
    up = resize_matrix(downsampled_side(hr_side, factor), hr_side, BICUBIC)
    if sigma > 0:
        up = blur_matrix(hr_side, sigma) @ up
    up.setflags(write=False)
    return up


def _check_square(img: GrayImage, what="image"):
    if img.width != img.height:
        raise InvalidArgumentError(f"{what} must be square, got {img.width}x{img.height}")


def degrade(hr: GrayImage, factor: int, cfg: HallucinationConfig | None = None) -> GrayImage:
    """Simulate the LR observation ``D B hr`` of side ``round(side / factor)``."""
    cfg = cfg or HallucinationConfig()
    _check_square(hr)
    if factor < 1:
        raise InvalidArgumentError("factor must be >= 1")
    op = degradation_matrix(hr.width, int(factor), cfg.sigma_for(factor))
    return GrayImage.from_array(op @ hr.data @ op.T)


# --- dictionary --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PatchDictionary:
    grid: PatchGrid
    enhancement: str
    n_train: int
    blur_sigma: float
    ranks: np.ndarray  # (P,)
    mean_l: np.ndarray  # (P, dl)
    mean_h: np.ndarray  # (P, dh)
    eigvals: np.ndarray  # (P, K), descending
    eigvecs: np.ndarray  # (P, M, K)
    lr_basis: np.ndarray  # (P, dl, K)
    hr_basis: np.ndarray  # (P, dh, K)
    source_hash: bytes = field(default=b"\0" * 32)

    @property
    def factor(self) -> int:
        return self.grid.factor

    @property
    def n_components(self) -> int:
        return self.eigvals.shape[1]

    @property
    def n_degenerate(self) -> int:
        """Positions whose training patches carry no variance (mean-patch fallback)."""
        return int(np.count_nonzero(self.ranks == 0))

    def _factor(self, basis, i):
        r = int(self.ranks[i])
        return basis[i, :, :r] * np.sqrt(self.eigvals[i, :r]) @ self.eigvecs[i, :, :r].T

    def lr_matrix(self, i: int) -> np.ndarray:
        """Mean-subtracted LR training patches at position ``i`` (columns)."""
        return self._factor(self.lr_basis, i)

    def hr_matrix(self, i: int) -> np.ndarray:
        return self._factor(self.hr_basis, i)


def _stack(images):
    arr = np.stack([im.data for im in images])
    return arr.reshape(arr.shape[0], -1)


def training_hash(training_hr, factor, enh: EnhanceMethod, cfg: HallucinationConfig) -> bytes:
    h = hashlib.sha256()
    h.update(repr((factor, enh, cfg)).encode())
    for im in training_hr:
        h.update(np.ascontiguousarray(im.data).tobytes())
    return h.digest()


def build_dictionary(training_hr, factor: int, enh: EnhanceMethod | None = None,
                     cfg: HallucinationConfig | None = None) -> PatchDictionary:
    """Learn the per-position eigen-transformation from HR training images."""
    enh = enh or EnhanceMethod()
    cfg = cfg or HallucinationConfig()
    training_hr = list(training_hr)
    if len(training_hr) < 2:
        raise InvalidArgumentError("need at least 2 training images")
    side = training_hr[0].width
    for im in training_hr:
        if im.width != side or im.height != side:
            raise InvalidArgumentError(
                f"training images must share one square size; got {im.width}x{im.height} vs {side}x{side}"
            )
    grid = make_grid(side, factor, cfg)
    hr_imgs = [enhance(im, enh) for im in training_hr]
    lr_imgs = [degrade(im, factor, cfg) for im in hr_imgs]

    # (M, P, d) -> (P, d, M): one training patch per column
    lr_p = _stack(lr_imgs)[:, grid.lr_index].transpose(1, 2, 0)
    hr_p = _stack(hr_imgs)[:, grid.hr_index].transpose(1, 2, 0)
    mean_l = lr_p.mean(axis=2)
    mean_h = hr_p.mean(axis=2)
    A = lr_p - mean_l[:, :, None]
    H = hr_p - mean_h[:, :, None]
    del lr_p, hr_p

    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    lam = s**2
    ranks = _retained_ranks(lam, cfg.retention)
    keep = np.arange(lam.shape[1])[None, :] < ranks[:, None]
    E = Vt.transpose(0, 2, 1) * keep[:, None, :]
    inv_sqrt = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    lr_basis = U * keep[:, None, :]
    hr_basis = (H @ E) * inv_sqrt[:, None, :]
    return PatchDictionary(
        grid=grid,
        enhancement=enh.tag,
        n_train=len(training_hr),
        blur_sigma=cfg.sigma_for(factor),
        ranks=ranks,
        mean_l=mean_l,
        mean_h=mean_h,
        eigvals=np.where(keep, lam, 0.0),
        eigvecs=E,
        lr_basis=lr_basis,
        hr_basis=hr_basis,
        source_hash=training_hash(training_hr, factor, enh, cfg),
    )


def _retained_ranks(lam: np.ndarray, retention: float) -> np.ndarray:
    """Smallest r per row whose leading eigenvalues hold (1 - retention) of the total."""
    total = lam.sum(axis=1)
    scale = np.maximum(lam[:, 0], np.finfo(float).tiny)
    frac = np.cumsum(lam, axis=1) / np.where(total > 0, total, 1.0)[:, None]
    ranks = np.argmax(frac >= 1.0 - retention, axis=1) + 1
    # numerically zero spectrum: all training patches identical at this position
    ranks[total <= 1e-24 * lam.shape[1]] = 0
    # eigenvalues must stay strictly positive after truncation
    positive = (lam > 1e-14 * scale[:, None]).sum(axis=1)
    return np.minimum(ranks, positive).astype(np.int64)


# --- hallucination -----------------------------------------------------------

def _projection(x, i, d: PatchDictionary):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != d.mean_l.shape[1]:
        raise InvalidArgumentError(f"patch has {x.shape[0]} samples, dictionary expects {d.mean_l.shape[1]}")
    return d.lr_basis[i].T @ (x - d.mean_l[i])


def eigen_coefficients(x, i: int, d: PatchDictionary) -> np.ndarray:
    """Coefficients ``c`` over the mean-subtracted training patches.

    ``A @ c`` is the orthogonal projection of ``x - mean`` onto the span of
    the training patches and ``c`` is the minimum-norm such vector.
    """
    w = _projection(x, i, d)
    s = np.sqrt(d.eigvals[i])
    inv = np.divide(1.0, s, out=np.zeros_like(s), where=s > 0)
    return d.eigvecs[i] @ (inv * w)


def reconstruction_weights(x, i: int, d: PatchDictionary) -> np.ndarray:
    """Weights over the raw collocated training patches; they sum to one.

    The hallucinated HR patch equals ``sum_j weights[j] * h_j``.
    """
    return eigen_coefficients(x, i, d) + 1.0 / d.n_train


def hallucinate_patch(x, i: int, d: PatchDictionary) -> np.ndarray:
    """HR patch vector for LR patch vector ``x`` at grid position ``i``."""
    return d.mean_h[i] + d.hr_basis[i] @ _projection(x, i, d)


def hallucinate(lr: GrayImage, d: PatchDictionary, cfg: HallucinationConfig | None = None) -> GrayImage:
    """Preliminary HR reconstruction: per-patch hallucination, overlap-averaged."""
    g = d.grid
    if lr.width != g.lr_side or lr.height != g.lr_side:
        raise InvalidArgumentError(
            f"LR image is {lr.width}x{lr.height}, dictionary expects {g.lr_side}x{g.lr_side}"
        )
    x = lr.data.ravel()[g.lr_index]  # (P, dl)
    w = np.einsum("pdk,pd->pk", d.lr_basis, x - d.mean_l)
    patches = d.mean_h + np.einsum("phk,pk->ph", d.hr_basis, w)
    n = g.hr_side * g.hr_side
    acc = np.bincount(g.hr_index.ravel(), weights=patches.ravel(), minlength=n)
    hits = np.bincount(g.hr_index.ravel(), minlength=n)
    return GrayImage.from_array((acc / hits).reshape(g.hr_side, g.hr_side))


@dataclass(frozen=True, eq=False)
class ReprojectionResult:
    image: GrayImage
    iterations: int
    residual: float
    converged: bool
    residuals: tuple[float, ...]  # ||D B Y^t - X|| for t = 0..iterations


def reproject(y_prime: GrayImage, x: GrayImage, factor: int,
              cfg: HallucinationConfig | None = None) -> ReprojectionResult:
    """Iterate ``Y <- Y - tau * B U (D B Y - X)`` until the mean absolute update is below epsilon."""
    cfg = cfg or HallucinationConfig()
    _check_square(y_prime, "HR estimate")
    side = y_prime.width
    lr_side = downsampled_side(side, factor)
    if x.width != lr_side or x.height != lr_side:
        raise InvalidArgumentError(f"LR image must be {lr_side}x{lr_side} for factor {factor}, got {x.width}x{x.height}")
    sigma = cfg.sigma_for(factor)
    DB = degradation_matrix(side, int(factor), sigma)
    BU = backprojection_matrix(side, int(factor), sigma)
    y = np.array(y_prime.data)
    target = x.data
    residual = DB @ y @ DB.T - target
    history = [float(np.linalg.norm(residual))]
    converged = False
    t = 0
    while t < cfg.max_iters:
        t += 1
        update = cfg.tau * (BU @ residual @ BU.T)
        y -= update
        change = float(np.mean(np.abs(update)))
        if not np.isfinite(change):
            raise NumericalError(f"non-finite values at re-projection iteration {t}")
        residual = DB @ y @ DB.T - target
        history.append(float(np.linalg.norm(residual)))
        if change < cfg.epsilon:
            converged = True
            break
    return ReprojectionResult(GrayImage.from_array(y), t, history[-1], converged, tuple(history))


def super_resolve(lr: GrayImage, d: PatchDictionary, cfg: HallucinationConfig | None = None) -> ReprojectionResult:
    """Hallucinate then re-project; ``lr`` is the already-enhanced LR input."""
    return reproject(hallucinate(lr, d, cfg), lr, d.factor, cfg)


# --- serialization -----------------------------------------------------------

def save_dictionary(d: PatchDictionary, path) -> None:
    g = d.grid
    P, K = d.eigvals.shape
    header = _HEADER.pack(
        DICT_MAGIC, DICT_VERSION, g.lr_side, g.hr_side, g.lr_patch, g.lr_overlap, g.factor,
        d.n_train, P, K, d.blur_sigma, d.enhancement.encode("ascii")[:16], d.source_hash,
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(d.ranks, dtype="<u4").tobytes())
        for arr in (d.mean_l, d.mean_h, d.eigvals, d.eigvecs, d.lr_basis, d.hr_basis):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def read_dictionary_header(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise MalformedFileError(f"{path}: truncated dictionary header")
    fields = _HEADER.unpack(raw)
    if fields[0] != DICT_MAGIC:
        raise UnsupportedFormatError(f"{path}: not an eigen-patch dictionary")
    if fields[1] != DICT_VERSION:
        raise UnsupportedFormatError(f"{path}: unsupported dictionary version {fields[1]}")
    keys = ("lr_side", "hr_side", "lr_patch", "lr_overlap", "factor", "n_train", "n_positions",
            "n_components", "blur_sigma")
    info = dict(zip(keys, fields[2:11]))
    info["version"] = fields[1]
    info["enhancement"] = fields[11].rstrip(b"\0").decode("ascii")
    info["source_hash"] = fields[12].hex()
    return info


def load_dictionary(path) -> PatchDictionary:
    info = read_dictionary_header(path)
    grid = PatchGrid(info["lr_side"], info["hr_side"], info["lr_patch"], info["lr_overlap"], info["factor"])
    P, K, M = info["n_positions"], info["n_components"], info["n_train"]
    if P != grid.n_positions:
        raise MalformedFileError(f"{path}: header position count does not match the grid")
    dl, dh = grid.lr_patch**2, grid.hr_patch**2
    shapes = [(P, dl), (P, dh), (P, K), (P, M, K), (P, dl, K), (P, dh, K)]
    need = _HEADER.size + 4 * P + 8 * sum(int(np.prod(s)) for s in shapes)
    buf = Path(path).read_bytes()
    if len(buf) != need:
        raise MalformedFileError(f"{path}: expected {need} bytes, found {len(buf)}")
    off = _HEADER.size
    ranks = np.frombuffer(buf, dtype="<u4", count=P, offset=off).astype(np.int64)
    off += 4 * P
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 8 * n
    return PatchDictionary(grid, info["enhancement"], M, info["blur_sigma"], ranks, *arrays,
                           source_hash=bytes.fromhex(info["source_hash"]))
