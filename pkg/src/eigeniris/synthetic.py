"""Procedural eye images with exact annotations, for tests and desk-scale runs.

Each eye owns a texture defined on (angle, normalized radius) so that it
survives pupil dilation; each capture varies rotation, dilation, position,
gain, eyelid occlusion and sensor noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Circle, IrisAnnotation, save_annotations
from .image import GrayImage, blur_array, save_image


@dataclass(frozen=True)
class EyeTexture:
    fiber_m: np.ndarray  # angular frequencies
    fiber_amp: np.ndarray
    fiber_phase: np.ndarray
    fiber_twist: np.ndarray
    blob_theta: np.ndarray
    blob_rho: np.ndarray
    blob_size: np.ndarray
    blob_amp: np.ndarray
    ring_rho: float
    base: float


def random_texture(rng: np.random.Generator, n_fibers: int = 24, n_blobs: int = 70) -> EyeTexture:
    return EyeTexture(
        fiber_m=rng.integers(5, 48, n_fibers).astype(np.float64),
        fiber_amp=rng.uniform(0.01, 0.035, n_fibers),
        fiber_phase=rng.uniform(0, 2 * np.pi, n_fibers),
        fiber_twist=rng.uniform(-3.0, 3.0, n_fibers),
        blob_theta=rng.uniform(0, 2 * np.pi, n_blobs),
        blob_rho=rng.uniform(0.1, 0.9, n_blobs),
        blob_size=rng.uniform(2.0, 5.5, n_blobs),
        blob_amp=rng.uniform(-0.25, 0.2, n_blobs),
        ring_rho=float(rng.uniform(0.25, 0.45)),
        base=float(rng.uniform(0.32, 0.5)),
    )


def _iris_coords(x, y, pupil: Circle, sclera: Circle):
    """Angle and normalized radius of pixels (x, y) between the two boundaries."""
    dx, dy = x - pupil.cx, -(y - pupil.cy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    d = np.hypot(dx, dy)
    # distance from the pupil centre to the sclera circle along each ray
    ux, uy = np.cos(theta), np.sin(theta)
    ox, oy = pupil.cx - sclera.cx, -(pupil.cy - sclera.cy)
    b = ox * ux + oy * uy
    c = ox * ox + oy * oy - sclera.r**2
    rs = -b + np.sqrt(np.maximum(b * b - c, 0.0))
    rho = (d - pupil.r) / np.maximum(rs - pupil.r, 1e-9)
    return theta, rho, rs


def _texture_terms(tex: EyeTexture, th, r, span, r_mid, scale=1.0):
    out = np.zeros_like(th)
    for m, a, ph, tw in zip(tex.fiber_m, tex.fiber_amp, tex.fiber_phase, tex.fiber_twist):
        out += a * np.cos(m * th + ph + tw * r)
    for bt, br, bs, ba in zip(tex.blob_theta, tex.blob_rho, tex.blob_size, tex.blob_amp):
        v = (r - br) * span
        near = np.abs(v) < 4 * bs
        u = (np.mod(th[near] - bt + np.pi, 2 * np.pi) - np.pi) * r_mid[near]
        out[near] += ba * np.exp(-(u * u + v[near] ** 2) / (2 * bs * bs))
    return scale * out


def _patch_weight(th, r, patches, mix):
    w = np.zeros_like(th)
    for t0, r0, width in patches:
        d = np.mod(th - t0 + np.pi, 2 * np.pi) - np.pi
        w += np.exp(-0.5 * (d / width) ** 2 - 0.5 * ((r - r0) / 0.35) ** 2)
    return np.clip(mix * w, 0.0, 1.0)


def render_eye(tex: EyeTexture, ann: IrisAnnotation, width: int, height: int, rotation: float,
               gain: float, noise: float, rng: np.random.Generator,
               nuisance: EyeTexture | None = None, nuisance_scale: float = 0.0,
               patches=(), patch_mix: float = 1.5) -> GrayImage:
    """Render one capture.

    ``nuisance`` is a capture-specific texture. It is added everywhere at
    ``nuisance_scale`` relative amplitude, and it replaces the eye's own
    texture inside the soft ``patches`` (angle, normalized radius, angular
    width) that stand in for reflections, lashes and local focus loss.
    """
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta, rho, rs = _iris_coords(xx, yy, ann.pupil, ann.sclera)
    in_iris = (rho >= 0) & (rho <= 1)
    th = theta[in_iris] - rotation
    r = rho[in_iris]
    span = rs[in_iris] - ann.pupil.r
    r_mid = ann.pupil.r + r * span
    iris = tex.base + 0.08 * np.exp(-((r - tex.ring_rho) / 0.06) ** 2) - 0.06 * r
    own = _texture_terms(tex, th, r, span, r_mid)
    if nuisance is not None and (nuisance_scale > 0 or len(patches)):
        other = _texture_terms(nuisance, th + rotation, r, span, r_mid)
        w = _patch_weight(th + rotation, r, patches, patch_mix)
        iris += (1.0 - w) * own + (w + nuisance_scale) * other
    else:
        iris += own
    img = np.full_like(xx, 0.78)  # sclera
    skin = 0.62 + 0.03 * np.sin(xx / 17.0) * np.cos(yy / 23.0)
    img[in_iris] = iris
    img = np.where(rho < 0, 0.07, img)
    far = ~ann.sclera.contains(xx, yy) & (np.hypot(xx - ann.sclera.cx, yy - ann.sclera.cy) > 1.9 * ann.sclera.r)
    img = np.where(far, skin, img)
    for lid in ann.eyelids:
        img = np.where(lid.contains(xx, yy), skin, img)
    img = blur_array(img * gain, 0.8)
    img = img + rng.normal(0.0, noise, img.shape)
    return GrayImage.from_array(img)


def generate_corpus(out_dir, n_subjects: int = 20, images_per_eye: int = 4, seed: int = 0,
                    width: int = 340, height: int = 300, rotation_jitter: float = 0.004,
                    dilation_jitter: float = 0.01, nuisance_scale: float = 0.8,
                    max_patches: int = 0) -> list[IrisAnnotation]:
    """Write ``<out_dir>/images/<id>.pgm`` and ``<out_dir>/annotations.csv``.

    ``rotation_jitter`` (radians) and ``dilation_jitter`` (relative pupil
    radius) bound the non-rigid change between captures of one eye;
    ``nuisance_scale`` sets the strength of the dense per-capture texture and
    each capture gets 0..``max_patches`` local patches of it.
    """
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    anns = []
    for s in range(n_subjects):
        for eye in ("L", "R"):
            tex = random_texture(rng)
            sclera_r = float(rng.uniform(95, 115))
            pupil_ratio = float(rng.uniform(0.3, 0.4))
            for n in range(images_per_eye):
                image_id = f"S{s + 1:03d}{eye}_{n + 1:02d}"
                pcx = width / 2 + rng.uniform(-6, 6)
                pcy = height / 2 + rng.uniform(-6, 6)
                pr = sclera_r * pupil_ratio * (1 + rng.uniform(-dilation_jitter, dilation_jitter))
                sclera = Circle(pcx + rng.uniform(-0.5, 0.5), pcy + rng.uniform(-0.5, 0.5), sclera_r)
                lids = []
                depth = rng.uniform(0.55, 1.3)
                if depth < 1.0:
                    R = 3.0 * sclera.r
                    lids.append(Circle(pcx + rng.uniform(-10, 10), pcy - depth * sclera.r - R, R))
                else:
                    lids.append(None)
                low = rng.uniform(0.7, 1.5)
                lids.append(Circle(pcx, pcy + low * sclera.r + 4 * sclera.r, 4 * sclera.r) if low < 1.0 else None)
                ann = IrisAnnotation(image_id, f"S{s + 1:03d}", eye, n // 2 + 1,
                                     Circle(pcx, pcy, pr), sclera, lids[0], lids[1])
                patches = [(rng.uniform(0, 2 * np.pi), rng.uniform(0, 1), rng.uniform(0.3, 0.8))
                           for _ in range(rng.integers(0, max_patches + 1))]
                img = render_eye(tex, ann, width, height, rotation=rng.uniform(-rotation_jitter, rotation_jitter),
                                 gain=rng.uniform(0.9, 1.1), noise=0.01, rng=rng,
                                 nuisance=random_texture(rng), nuisance_scale=nuisance_scale, patches=patches)
                save_image(img, img_dir / f"{image_id}.pgm")
                anns.append(ann)
    save_annotations(anns, out / "annotations.csv")
    return anns
