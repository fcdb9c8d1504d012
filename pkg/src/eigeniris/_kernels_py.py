"""Pure numpy implementations of the hot kernels (fallback for ``_ckernels``)."""
import math

import numpy as np

ORI_BINS = 36
DESC_WIDTH = 4
DESC_BINS = 8
TWO_PI = 2.0 * math.pi


def hamming_min(code_a, mask_a, code_b, mask_b, max_shift):
    """Lowest masked fractional Hamming distance over circular shifts of ``b``.

    Shifts move whole samples (two bit columns) in ``[-max_shift, max_shift]``.
    Returns ``nan`` when no shift leaves any jointly valid bit.
    """
    ca = np.asarray(code_a, dtype=bool)
    ma = np.asarray(mask_a, dtype=bool)
    cb = np.asarray(code_b, dtype=bool)
    mb = np.asarray(mask_b, dtype=bool)
    best = math.nan
    for s in range(-max_shift, max_shift + 1):
        sb = np.roll(cb, 2 * s, axis=1)
        joint = ma & np.roll(mb, 2 * s, axis=1)
        n = int(np.count_nonzero(joint))
        if n == 0:
            continue
        hd = int(np.count_nonzero((ca ^ sb) & joint)) / n
        if not hd >= best:
            best = hd
    return best


def orientation_histograms(mag, ang, kps):
    """36-bin gradient orientation histograms around (x, y, sigma) rows of ``kps``."""
    mag = np.asarray(mag, dtype=np.float64)
    ang = np.asarray(ang, dtype=np.float64)
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 3)
    h, w = mag.shape
    out = np.zeros((kps.shape[0], ORI_BINS))
    for k, (x, y, sigma) in enumerate(kps):
        sw = 1.5 * sigma
        radius = int(math.floor(3.0 * sw + 0.5))
        xi, yi = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
        r0, r1 = max(yi - radius, 0), min(yi + radius, h - 1)
        c0, c1 = max(xi - radius, 0), min(xi + radius, w - 1)
        if r0 > r1 or c0 > c1:
            continue
        dy = np.arange(r0, r1 + 1)[:, None] - yi
        dx = np.arange(c0, c1 + 1)[None, :] - xi
        d2 = dx * dx + dy * dy
        inside = d2 <= radius * radius
        wgt = np.exp(-d2 / (2.0 * sw * sw)) * mag[r0:r1 + 1, c0:c1 + 1]
        b = np.floor(ang[r0:r1 + 1, c0:c1 + 1] * (ORI_BINS / TWO_PI) + 0.5).astype(np.int64) % ORI_BINS
        out[k] = np.bincount(b[inside], weights=wgt[inside], minlength=ORI_BINS)
    return out


def sift_descriptors(mag, ang, kps):
    """Raw 4x4x8 gradient histograms for (x, y, sigma, orientation) rows of ``kps``.

    Sample offsets are rotated by minus the keypoint orientation, Gaussian weighted and spread
    trilinearly over (row bin, column bin, orientation bin). Normalization is
    left to the caller.
    """
    mag = np.asarray(mag, dtype=np.float64)
    ang = np.asarray(ang, dtype=np.float64)
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 4)
    h, w = mag.shape
    d, n = DESC_WIDTH, DESC_BINS
    out = np.zeros((kps.shape[0], d * d * n))
    for k, (x, y, sigma, ori) in enumerate(kps):
        hist_width = 3.0 * sigma
        radius = int(math.floor(hist_width * math.sqrt(2.0) * (d + 1) * 0.5 + 0.5))
        cos_t = math.cos(ori) / hist_width
        sin_t = math.sin(ori) / hist_width
        xi, yi = int(math.floor(x + 0.5)), int(math.floor(y + 0.5))
        ii, jj = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        ii = ii.ravel()
        jj = jj.ravel()
        c_rot = jj * cos_t + ii * sin_t
        r_rot = ii * cos_t - jj * sin_t
        rbin = r_rot + d / 2 - 0.5
        cbin = c_rot + d / 2 - 0.5
        py = yi + ii
        px = xi + jj
        ok = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d) & (py >= 0) & (py < h) & (px >= 0) & (px < w)
        if not ok.any():
            continue
        rbin, cbin, r_rot, c_rot = rbin[ok], cbin[ok], r_rot[ok], c_rot[ok]
        py, px = py[ok], px[ok]
        weight = np.exp(-(c_rot * c_rot + r_rot * r_rot) / (2.0 * (d / 2) ** 2)) * mag[py, px]
        obin = (ang[py, px] - ori) * (n / TWO_PI)
        obin = np.mod(obin, n)
        obin[obin >= n] -= n
        r0 = np.floor(rbin).astype(np.int64)
        c0 = np.floor(cbin).astype(np.int64)
        o0 = np.floor(obin).astype(np.int64)
        fr, fc, fo = rbin - r0, cbin - c0, obin - o0
        hist = np.zeros((d + 2) * (d + 2) * n)
        for dr, wr in ((0, 1 - fr), (1, fr)):
            for dc, wc in ((0, 1 - fc), (1, fc)):
                for do, wo in ((0, 1 - fo), (1, fo)):
                    idx = ((r0 + 1 + dr) * (d + 2) + (c0 + 1 + dc)) * n + (o0 + do) % n
                    hist += np.bincount(idx, weights=weight * wr * wc * wo, minlength=hist.size)
        out[k] = hist.reshape(d + 2, d + 2, n)[1:d + 1, 1:d + 1].ravel()
    return out
