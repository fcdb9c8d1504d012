"""The compiled and numpy kernel backends must agree."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigeniris import kernels

backends = kernels.available_backends()
needs_both = pytest.mark.skipif("cython" not in backends, reason="compiled extension not built")


def test_dispatch():
    assert kernels.BACKEND in backends
    assert kernels.hamming_min is backends[kernels.BACKEND].hamming_min


def _grads(r, h=40, w=50):
    return r.random((h, w)), r.uniform(0, 2 * np.pi, (h, w))


@needs_both
@given(st.integers(0, 2**31 - 1), st.integers(0, 8))
def test_hamming_backends_agree(seed, shift):
    r = np.random.default_rng(seed)
    args = [(r.random((6, 32)) < p).astype(np.uint8) for p in (0.5, 0.8, 0.5, 0.8)]
    args[1][:, 1::2] = args[1][:, 0::2]
    args[3][:, 1::2] = args[3][:, 0::2]
    a = backends["python"].hamming_min(*args, shift)
    b = backends["cython"].hamming_min(*args, shift)
    assert a == b or (a != a and b != b)


@needs_both
@given(st.integers(0, 2**31 - 1))
def test_orientation_backends_agree(seed):
    r = np.random.default_rng(seed)
    mag, ang = _grads(r)
    kps = np.column_stack([r.uniform(-3, 53, 6), r.uniform(-3, 43, 6), r.uniform(1, 5, 6)])
    a = backends["python"].orientation_histograms(mag, ang, kps)
    b = backends["cython"].orientation_histograms(mag, ang, kps)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_both
@given(st.integers(0, 2**31 - 1))
def test_descriptor_backends_agree(seed):
    r = np.random.default_rng(seed)
    mag, ang = _grads(r)
    kps = np.column_stack([r.uniform(0, 50, 5), r.uniform(0, 40, 5), r.uniform(1, 4, 5),
                           r.uniform(0, 2 * np.pi, 5)])
    a = backends["python"].sift_descriptors(mag, ang, kps)
    b = backends["cython"].sift_descriptors(mag, ang, kps)
    assert a.shape == (5, 128)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_orientation_histogram_of_uniform_direction():
    mag = np.ones((30, 30))
    ang = np.full((30, 30), np.pi / 2)
    h = backends["python"].orientation_histograms(mag, ang, np.array([[15.0, 15.0, 2.0]]))[0]
    assert np.argmax(h) == 9 and np.count_nonzero(h) == 1
