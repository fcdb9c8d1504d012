"""Annotation-driven iris geometry: rescaling, pupil-centred crops, rubber-sheet unwrapping.

Coordinates are in pixel-index units: the centre of pixel (row r, col c) is
at (x=c, y=r). Angles increase counter-clockwise as seen on screen, so the
boundary point at angle t is ``(cx + r cos t, cy - r sin t)``.

Annotation CSV columns (header line required; eyelid triples may be empty)::

    image_id,subject_id,eye,session,pupil_cx,pupil_cy,pupil_r,
    sclera_cx,sclera_cy,sclera_r,uy_cx,uy_cy,uy_r,ly_cx,ly_cy,ly_r

An eyelid circle marks the occluded area: samples inside it are masked.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import AnnotationParseError, InvalidAnnotationError, MissingFileError
from .image import BICUBIC, GrayImage, resize, round_half_up

log = logging.getLogger(__name__)

REFERENCE_SCLERA_RADIUS = 105.0
CROP_SIDE = 231
NORM_ROWS = 20
NORM_COLS = 240

CSV_FIELDS = (
    "image_id", "subject_id", "eye", "session",
    "pupil_cx", "pupil_cy", "pupil_r", "sclera_cx", "sclera_cy", "sclera_r",
    "uy_cx", "uy_cy", "uy_r", "ly_cx", "ly_cy", "ly_r",
)


class Circle(NamedTuple):
    cx: float
    cy: float
    r: float

    def contains(self, x, y):
        return (np.asarray(x) - self.cx) ** 2 + (np.asarray(y) - self.cy) ** 2 < self.r**2


@dataclass(frozen=True)
class IrisAnnotation:
    image_id: str
    subject_id: str
    eye: str
    session: int
    pupil: Circle
    sclera: Circle
    upper_eyelid: Circle | None = None
    lower_eyelid: Circle | None = None

    def __post_init__(self):
        if self.eye not in ("L", "R"):
            raise InvalidAnnotationError(f"{self.image_id}: eye must be 'L' or 'R', got {self.eye!r}")
        for name in ("pupil", "sclera", "upper_eyelid", "lower_eyelid"):
            c = getattr(self, name)
            if c is not None and not c.r > 0:
                raise InvalidAnnotationError(f"{self.image_id}: {name} radius must be > 0")
        if self.pupil.r >= self.sclera.r:
            raise InvalidAnnotationError(
                f"{self.image_id}: pupil radius {self.pupil.r} must be smaller than sclera radius {self.sclera.r}"
            )
        if not self.sclera.contains(self.pupil.cx, self.pupil.cy):
            raise InvalidAnnotationError(f"{self.image_id}: pupil centre lies outside the sclera circle")

    @property
    def user(self) -> str:
        """Verification identity: each eye of a subject is a separate user."""
        return f"{self.subject_id}_{self.eye}"

    @property
    def eyelids(self) -> list[Circle]:
        return [c for c in (self.upper_eyelid, self.lower_eyelid) if c is not None]

    def transformed(self, sx: float, sy: float, sr: float, dx: float = 0.0, dy: float = 0.0) -> "IrisAnnotation":
        """Map centres through ``x' = (x + 0.5) * sx - 0.5 + dx`` and scale radii by ``sr``."""
        def tf(c):
            if c is None:
                return None
            return Circle((c.cx + 0.5) * sx - 0.5 + dx, (c.cy + 0.5) * sy - 0.5 + dy, c.r * sr)

        return replace(self, pupil=tf(self.pupil), sclera=tf(self.sclera),
                       upper_eyelid=tf(self.upper_eyelid), lower_eyelid=tf(self.lower_eyelid))

    def translated(self, dx: float, dy: float) -> "IrisAnnotation":
        return self.transformed(1.0, 1.0, 1.0, dx, dy)


@dataclass(frozen=True)
class Rejected:
    reason: str


@dataclass(frozen=True, eq=False)
class NormalizedIris:
    texture: GrayImage  # NORM_ROWS x NORM_COLS, radial x angular
    mask: np.ndarray  # bool, True = usable sample


def rescale_to_reference(img: GrayImage, ann: IrisAnnotation,
                         target_r: float = REFERENCE_SCLERA_RADIUS) -> tuple[GrayImage, IrisAnnotation]:
    """Bicubically resize so that the sclera radius becomes ``target_r``."""
    if not ann.sclera.r > 0:
        raise InvalidAnnotationError("sclera radius must be > 0")
    s = target_r / ann.sclera.r
    if s == 1.0:
        return img, ann
    w = max(1, round_half_up(img.width * s))
    h = max(1, round_half_up(img.height * s))
    out = resize(img, w, h, BICUBIC)
    return out, ann.transformed(w / img.width, h / img.height, s)


def align_crop(img: GrayImage, ann: IrisAnnotation, side: int = CROP_SIDE):
    """Square ``side`` crop centred on the rounded pupil centre.

    Returns ``(crop, annotation_in_crop_frame)``, or :class:`Rejected` when the
    crop would leave the image.
    """
    cx = round_half_up(ann.pupil.cx)
    cy = round_half_up(ann.pupil.cy)
    left = cx - side // 2
    top = cy - side // 2
    if left < 0 or top < 0 or left + side > img.width or top + side > img.height:
        return Rejected(
            f"{side}x{side} crop around pupil ({cx}, {cy}) exceeds {img.width}x{img.height} image"
        )
    crop = GrayImage(img.data[top:top + side, left:left + side])
    return crop, ann.translated(-left, -top)


def check_annulus(ann: IrisAnnotation) -> None:
    d = math.hypot(ann.pupil.cx - ann.sclera.cx, ann.pupil.cy - ann.sclera.cy)
    if d + ann.pupil.r >= ann.sclera.r:
        raise InvalidAnnotationError(f"{ann.image_id}: pupil and sclera boundaries cross")


def sample_points(ann: IrisAnnotation, rows: int = NORM_ROWS, cols: int = NORM_COLS):
    """Image coordinates (x, y) of every rubber-sheet sample, each (rows, cols)."""
    theta = 2.0 * np.pi * np.arange(cols) / cols
    rho = (np.arange(rows) + 0.5) / rows
    cos, sin = np.cos(theta), np.sin(theta)
    px = ann.pupil.cx + ann.pupil.r * cos
    py = ann.pupil.cy - ann.pupil.r * sin
    sx = ann.sclera.cx + ann.sclera.r * cos
    sy = ann.sclera.cy - ann.sclera.r * sin
    x = (1.0 - rho)[:, None] * px[None, :] + rho[:, None] * sx[None, :]
    y = (1.0 - rho)[:, None] * py[None, :] + rho[:, None] * sy[None, :]
    return x, y


def bilinear_sample(data: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear lookup; returns (values, inside) with zeros outside the image."""
    h, w = data.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    v = ((1 - fy) * ((1 - fx) * data[y0, x0] + fx * data[y0, x1])
         + fy * ((1 - fx) * data[y1, x0] + fx * data[y1, x1]))
    return np.where(inside, v, 0.0), inside


def region_mask(ann: IrisAnnotation, x, y):
    """True where (x, y) lies in the pupil-sclera annulus and outside every eyelid."""
    ok = ann.sclera.contains(x, y) & ~ann.pupil.contains(x, y)
    for lid in ann.eyelids:
        ok &= ~lid.contains(x, y)
    return ok


def unwrap(img: GrayImage, ann: IrisAnnotation, rows: int = NORM_ROWS, cols: int = NORM_COLS) -> NormalizedIris:
    """Daugman rubber-sheet normalization to a ``rows x cols`` rectangle."""
    check_annulus(ann)
    x, y = sample_points(ann, rows, cols)
    values, inside = bilinear_sample(img.data, x, y)
    # boundary samples (rho at bin centres) sit strictly inside the annulus, but
    # float round-off on tiny annuli can push them out; check explicitly
    mask = inside & ~ann.pupil.contains(x, y) & (
        (x - ann.sclera.cx) ** 2 + (y - ann.sclera.cy) ** 2 <= ann.sclera.r**2
    )
    for lid in ann.eyelids:
        mask &= ~lid.contains(x, y)
    return NormalizedIris(GrayImage.from_array(values), mask)


# --- annotation files --------------------------------------------------------

def _circle(fields, start, line, required):
    raw = fields[start:start + 3]
    raw = list(raw) + [""] * (3 - len(raw))
    if all(v.strip() == "" for v in raw):
        if required:
            raise AnnotationParseError(f"missing required circle in columns {start + 1}-{start + 3}", line)
        return None
    try:
        return Circle(*(float(v) for v in raw))
    except ValueError as exc:
        raise AnnotationParseError(f"bad circle {raw!r}: {exc}", line) from None


def parse_annotation_row(fields, line=None) -> IrisAnnotation:
    if len(fields) < 10 or len(fields) > 16:
        raise AnnotationParseError(f"expected 10-16 fields, got {len(fields)}", line)
    try:
        session = int(fields[3])
    except ValueError:
        raise AnnotationParseError(f"session must be an integer, got {fields[3]!r}", line) from None
    pupil = _circle(fields, 4, line, True)
    sclera = _circle(fields, 7, line, True)
    upper = _circle(fields, 10, line, False)
    lower = _circle(fields, 13, line, False)
    try:
        return IrisAnnotation(fields[0].strip(), fields[1].strip(), fields[2].strip(), session,
                              pupil, sclera, upper, lower)
    except InvalidAnnotationError as exc:
        raise InvalidAnnotationError(f"line {line}: {exc}" if line else str(exc)) from None


def load_annotations(path, strict: bool = True, diagnostics: list | None = None) -> list[IrisAnnotation]:
    """Read an annotation CSV.

    With ``strict`` any bad record raises; otherwise it is skipped and a
    ``(line, message)`` entry is appended to ``diagnostics``.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for fields in reader:
            line = reader.line_num
            if not fields or all(f.strip() == "" for f in fields):
                continue
            if not header_seen:
                if fields[0].strip() != "image_id":
                    raise AnnotationParseError("missing header line", line)
                header_seen = True
                continue
            try:
                out.append(parse_annotation_row(fields, line))
            except (AnnotationParseError, InvalidAnnotationError) as exc:
                if strict:
                    raise
                log.warning("%s: skipping record: %s", path, exc)
                if diagnostics is not None:
                    diagnostics.append((line, str(exc)))
    return out


def _fmt(c):
    if c is None:
        return ["", "", ""]
    return [repr(float(c.cx)), repr(float(c.cy)), repr(float(c.r))]


def save_annotations(annotations, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for a in annotations:
            w.writerow([a.image_id, a.subject_id, a.eye, a.session]
                       + _fmt(a.pupil) + _fmt(a.sclera) + _fmt(a.upper_eyelid) + _fmt(a.lower_eyelid))
