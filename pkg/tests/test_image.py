import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eigeniris.errors import InvalidArgumentError, MalformedFileError, MissingFileError, UnsupportedFormatError
from eigeniris.image import (
    BICUBIC, BILINEAR, GrayImage, ResampleKernel, blur_array, blur_matrix, downsampled_side, gaussian_blur,
    gaussian_kernel1d, keys_kernel, load_image, psnr, resample_array, resize, resize_matrix, round_half_up,
    save_image,
)

unit_arrays = arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(2, 12)),
                     elements=st.floats(0, 1, allow_nan=False))


def test_keys_kernel_values():
    # interpolating at integers, hand-evaluated at half offsets for a = -0.5
    assert keys_kernel(np.array([0.0, 1.0, 2.0, 2.5]), -0.5).tolist() == [1.0, 0.0, 0.0, 0.0]
    assert keys_kernel(0.5, -0.5) == pytest.approx(0.5625)
    assert keys_kernel(1.5, -0.5) == pytest.approx(-0.0625)


def test_bicubic_reproduces_linear_ramp_in_interior():
    n_in, n_out = 20, 47
    ramp = 3.0 + 0.25 * np.arange(n_in)
    out = resize_matrix(n_in, n_out) @ ramp
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    inner = (src >= 1) & (src <= n_in - 2)
    assert np.allclose(out[inner], 3.0 + 0.25 * src[inner], atol=1e-12)


def test_bilinear_matches_np_interp():
    n_in, n_out = 9, 23
    x = np.random.default_rng(0).random(n_in)
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    assert np.allclose(resize_matrix(n_in, n_out, BILINEAR) @ x, np.interp(src, np.arange(n_in), x), atol=1e-12)


@pytest.mark.parametrize("n_in,n_out", [(231, 13), (13, 231), (29, 231), (7, 7), (1, 5)])
def test_resize_rows_sum_to_one(n_in, n_out):
    assert np.allclose(resize_matrix(n_in, n_out).sum(axis=1), 1.0)


def test_same_size_resize_is_identity():
    assert np.allclose(resize_matrix(17, 17), np.eye(17))


def test_blur_impulse_is_sampled_gaussian():
    n, sigma = 41, 2.0
    imp = np.zeros((n, n))
    imp[20, 20] = 1.0
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    out = blur_array(imp, sigma)
    expected = np.zeros((n, n))
    expected[20 - r:21 + r, 20 - r:21 + r] = np.outer(k, k)
    assert np.allclose(out, expected, atol=1e-15)
    assert np.exp(-0.5) == pytest.approx(k[r + 2] / k[r], rel=1e-12)


def test_blur_reflects_at_border():
    m = blur_matrix(5, 1.0)
    assert np.allclose(m.sum(axis=1), 1.0)
    assert m[0, 0] > m[2, 2]  # tap -1 folds back onto sample 0


def test_round_half_up_and_lr_sizes():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 12.83)] == [1, 2, 3, 13]
    assert downsampled_side(231, 18) == 13
    assert downsampled_side(231, 8) == 29
    assert downsampled_side(231, 2) == 116


def test_grayimage_validation():
    with pytest.raises(InvalidArgumentError):
        GrayImage(np.array([[0.0, 1.5]]))
    with pytest.raises(InvalidArgumentError):
        GrayImage(np.array([[np.nan]]))
    with pytest.raises(InvalidArgumentError):
        GrayImage(np.zeros(4))
    img = GrayImage.from_array([[-1.0, 0.5, 2.0]])
    assert img.data.tolist() == [[0.0, 0.5, 1.0]]
    assert not img.data.flags.writeable
    assert (img.width, img.height) == (3, 1)


def test_resize_and_blur_argument_errors():
    img = GrayImage.constant(4, 4, 0.5)
    with pytest.raises(InvalidArgumentError):
        resize(img, 0, 3)
    with pytest.raises(InvalidArgumentError):
        gaussian_blur(img, 0.0)
    with pytest.raises(InvalidArgumentError):
        ResampleKernel("lanczos")


def test_psnr():
    a = GrayImage.constant(4, 4, 0.5)
    assert psnr(a, a) == math.inf
    b = GrayImage.constant(4, 4, 0.6)
    assert psnr(b, a) == pytest.approx(20.0)
    with pytest.raises(InvalidArgumentError):
        psnr(a, GrayImage.constant(3, 4, 0.5))


@given(unit_arrays, st.integers(1, 20), st.integers(1, 20))
def test_resize_output_in_range(arr, w, h):
    out = resize(GrayImage(arr), w, h)
    assert out.shape == (h, w)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


@given(st.floats(0, 1), st.integers(3, 15), st.floats(0.3, 4.0))
def test_blur_and_resize_preserve_constants(v, n, sigma):
    c = np.full((n, n + 1), v)
    assert np.allclose(blur_array(c, sigma), v)
    assert np.allclose(resample_array(c, 7, 5, BICUBIC), v)


@given(unit_arrays)
def test_pgm_round_trip_exact_at_8_bit(tmp_path_factory, arr):
    q = np.floor(arr * 255 + 0.5) / 255
    path = tmp_path_factory.mktemp("pgm") / "a.pgm"
    save_image(GrayImage(q), path)
    assert np.array_equal(load_image(path).data, q)


def test_png_round_trip(tmp_path, rng):
    q = np.floor(rng.random((6, 9)) * 255 + 0.5) / 255
    save_image(GrayImage(q), tmp_path / "a.png")
    assert np.array_equal(load_image(tmp_path / "a.png").data, q)


def test_pgm_header_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert load_image(tmp_path / "c.pgm").data.tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize("payload,err", [
    (b"P5\n2 2\n255\n\x00", MalformedFileError),
    (b"P5\n2", MalformedFileError),
    (b"P5\nx 2\n255\n\x00\x00", MalformedFileError),
    (b"P2\n1 1\n255\n0", UnsupportedFormatError),
    (b"P5\n1 1\n65535\n\x00\x00", UnsupportedFormatError),
    (b"GIF89a", UnsupportedFormatError),
])
def test_malformed_images(tmp_path, payload, err):
    (tmp_path / "x.pgm").write_bytes(payload)
    with pytest.raises(err):
        load_image(tmp_path / "x.pgm")


def test_missing_image(tmp_path):
    with pytest.raises(MissingFileError):
        load_image(tmp_path / "none.pgm")
    with pytest.raises(MissingFileError):
        save_image(GrayImage.constant(2, 2, 0.0), tmp_path / "no" / "dir.pgm")


def test_sixteen_bit_png_rejected(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((3, 3), 40000, dtype=np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "d.png")
