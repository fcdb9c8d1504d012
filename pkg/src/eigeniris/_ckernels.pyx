# cython: language_level=3
"""Compiled versions of the kernels in ``_kernels_py`` (same semantics)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, exp, floor, sqrt, fmod, NAN, M_PI

cnp.import_array()

cdef enum:
    ORI_BINS = 36
    D = 4
    NB = 8


def hamming_min(code_a, mask_a, code_b, mask_b, int max_shift):
    cdef const cnp.uint8_t[:, ::1] ca = np.ascontiguousarray(code_a, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] ma = np.ascontiguousarray(mask_a, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] cb = np.ascontiguousarray(code_b, dtype=np.uint8)
    cdef const cnp.uint8_t[:, ::1] mb = np.ascontiguousarray(mask_b, dtype=np.uint8)
    cdef Py_ssize_t rows = ca.shape[0], cols = ca.shape[1]
    cdef Py_ssize_t i, j, off
    cdef int s
    cdef long n, diff
    cdef cnp.uint8_t v
    cdef double hd, best = NAN
    cdef bint have = False
    for s in range(-max_shift, max_shift + 1):
        # np.roll(b, 2s)[j] == b[(j - 2s) mod cols]
        off = (-2 * s) % cols
        if off < 0:
            off += cols
        n = 0
        diff = 0
        for i in range(rows):
            for j in range(cols - off):
                v = (ma[i, j] != 0) & (mb[i, j + off] != 0)
                n += v
                diff += v & ((ca[i, j] != 0) ^ (cb[i, j + off] != 0))
            for j in range(cols - off, cols):
                v = (ma[i, j] != 0) & (mb[i, j + off - cols] != 0)
                n += v
                diff += v & ((ca[i, j] != 0) ^ (cb[i, j + off - cols] != 0))
        if n == 0:
            continue
        hd = <double>diff / <double>n
        if not have or hd < best:
            best = hd
            have = True
    return best


def orientation_histograms(mag, ang, kps):
    cdef const double[:, ::1] m = np.ascontiguousarray(mag, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(ang, dtype=np.float64)
    cdef const double[:, ::1] k = np.ascontiguousarray(np.asarray(kps, dtype=np.float64).reshape(-1, 3))
    cdef Py_ssize_t nk = k.shape[0], h = m.shape[0], w = m.shape[1]
    out_arr = np.zeros((nk, ORI_BINS))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t q, r, c, r0, r1, c0, c1
    cdef int radius, xi, yi, b, dx, dy
    cdef double sw, wgt
    for q in range(nk):
        sw = 1.5 * k[q, 2]
        radius = <int>floor(3.0 * sw + 0.5)
        xi = <int>floor(k[q, 0] + 0.5)
        yi = <int>floor(k[q, 1] + 0.5)
        r0 = max(yi - radius, 0)
        r1 = min(yi + radius, h - 1)
        c0 = max(xi - radius, 0)
        c1 = min(xi + radius, w - 1)
        for r in range(r0, r1 + 1):
            dy = r - yi
            for c in range(c0, c1 + 1):
                dx = c - xi
                if dx * dx + dy * dy > radius * radius:
                    continue
                wgt = exp(-(dx * dx + dy * dy) / (2.0 * sw * sw)) * m[r, c]
                b = (<int>floor(a[r, c] * (ORI_BINS / (2.0 * M_PI)) + 0.5)) % ORI_BINS
                out[q, b] += wgt
    return out_arr


def sift_descriptors(mag, ang, kps):
    cdef const double[:, ::1] m = np.ascontiguousarray(mag, dtype=np.float64)
    cdef const double[:, ::1] a = np.ascontiguousarray(ang, dtype=np.float64)
    cdef const double[:, ::1] k = np.ascontiguousarray(np.asarray(kps, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t nk = k.shape[0], h = m.shape[0], w = m.shape[1]
    out_arr = np.zeros((nk, D * D * NB))
    cdef double[:, ::1] out = out_arr
    cdef double hist[(D + 2) * (D + 2) * NB]
    cdef Py_ssize_t q, t
    cdef int radius, xi, yi, i, j, py, px, r0, c0, o0, dr, dc, do, ob
    cdef double hist_width, cos_t, sin_t, c_rot, r_rot, rbin, cbin, obin, weight
    cdef double fr, fc, fo, wr, wc, wo
    for q in range(nk):
        for t in range((D + 2) * (D + 2) * NB):
            hist[t] = 0.0
        hist_width = 3.0 * k[q, 2]
        radius = <int>floor(hist_width * sqrt(2.0) * (D + 1) * 0.5 + 0.5)
        cos_t = cos(k[q, 3]) / hist_width
        sin_t = sin(k[q, 3]) / hist_width
        xi = <int>floor(k[q, 0] + 0.5)
        yi = <int>floor(k[q, 1] + 0.5)
        for i in range(-radius, radius + 1):
            for j in range(-radius, radius + 1):
                c_rot = j * cos_t + i * sin_t
                r_rot = i * cos_t - j * sin_t
                rbin = r_rot + D / 2.0 - 0.5
                cbin = c_rot + D / 2.0 - 0.5
                py = yi + i
                px = xi + j
                if not (rbin > -1 and rbin < D and cbin > -1 and cbin < D
                        and py >= 0 and py < h and px >= 0 and px < w):
                    continue
                weight = exp(-(c_rot * c_rot + r_rot * r_rot) / (2.0 * (D / 2.0) * (D / 2.0))) * m[py, px]
                obin = fmod((a[py, px] - k[q, 3]) * (NB / (2.0 * M_PI)), NB)
                if obin < 0:
                    obin += NB
                if obin >= NB:
                    obin -= NB
                r0 = <int>floor(rbin)
                c0 = <int>floor(cbin)
                o0 = <int>floor(obin)
                fr = rbin - r0
                fc = cbin - c0
                fo = obin - o0
                for dr in range(2):
                    wr = fr if dr else 1.0 - fr
                    for dc in range(2):
                        wc = fc if dc else 1.0 - fc
                        for do in range(2):
                            wo = fo if do else 1.0 - fo
                            ob = (o0 + do) % NB
                            hist[((r0 + 1 + dr) * (D + 2) + (c0 + 1 + dc)) * NB + ob] += weight * wr * wc * wo
        t = 0
        for i in range(1, D + 1):
            for j in range(1, D + 1):
                for ob in range(NB):
                    out[q, t] = hist[(i * (D + 2) + j) * NB + ob]
                    t += 1
    return out_arr
