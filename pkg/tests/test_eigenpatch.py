import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigeniris.eigenpatch import (
    HallucinationConfig, PatchGrid, build_dictionary, degrade, eigen_coefficients, hallucinate,
    hallucinate_patch, load_dictionary, make_grid, read_dictionary_header, reconstruction_weights, reproject,
    save_dictionary, super_resolve,
)
from eigeniris.errors import InvalidArgumentError, MalformedFileError, MissingFileError, UnsupportedFormatError
from eigeniris.image import GrayImage, resize


def _images(rng, n, side):
    return [GrayImage(rng.random((side, side))) for _ in range(n)]


def _lr_patches(train, factor, d):
    """Independent LR training matrix for position 0 (columns = patches)."""
    cols = []
    for im in train:
        lr = degrade(im, factor).data
        cols.append(lr.ravel()[d.grid.lr_index[0]])
    return np.array(cols).T


def test_grid_at_factor_18_covers_13x13():
    g = make_grid(231, 18, HallucinationConfig())
    assert g.lr_side == 13 and g.hr_patch == 72
    assert g.lr_axis == [0, 2, 4, 6, 8, 9]
    assert g.n_positions == 36
    assert len(np.unique(g.lr_index)) == 13 * 13
    assert len(np.unique(g.hr_index)) == 231 * 231
    assert g.hr_axis[-1] == 231 - 72


def test_grid_validation():
    with pytest.raises(InvalidArgumentError):
        PatchGrid(3, 12, 4, 2, 3)
    with pytest.raises(InvalidArgumentError):
        HallucinationConfig(lr_overlap=4)


def test_eigenvalues_match_characteristic_polynomial(rng):
    train = _images(rng, 3, 8)
    d = build_dictionary(train, 2)
    X = _lr_patches(train, 2, d)
    A = X - X.mean(axis=1, keepdims=True)
    G = A.T @ A
    # lambda^3 - tr(G) lambda^2 + (sum of principal 2x2 minors) lambda - det(G)
    minors = sum(G[i, i] * G[j, j] - G[i, j] ** 2 for i in range(3) for j in range(i + 1, 3))
    roots = np.sort(np.real(np.roots([1.0, -np.trace(G), minors, -np.linalg.det(G)])))[::-1]
    r = d.ranks[0]
    assert r == 2  # centring removes one dimension
    assert np.allclose(d.eigvals[0, :r], roots[:r], rtol=1e-9)
    assert np.allclose(d.lr_matrix(0), A, atol=1e-12)


def test_hr_matrix_is_recoverable(rng):
    train = _images(rng, 4, 8)
    d = build_dictionary(train, 2)
    H = np.array([im.data.ravel()[d.grid.hr_index[0]] for im in train]).T
    assert np.allclose(d.hr_matrix(0), H - H.mean(axis=1, keepdims=True), atol=1e-12)


def test_weights_are_one_hot_for_training_patch(rng):
    train = _images(rng, 5, 8)
    d = build_dictionary(train, 2)
    X = _lr_patches(train, 2, d)
    for j in range(5):
        w = reconstruction_weights(X[:, j], 0, d)
        assert np.allclose(w, np.eye(5)[j], atol=1e-9)
        assert np.isclose(w.sum(), 1.0)
        assert np.allclose(hallucinate_patch(X[:, j], 0, d), train[j].data.ravel()[d.grid.hr_index[0]], atol=1e-9)


def test_projection_matches_least_squares(rng):
    train = _images(rng, 4, 12)
    d = build_dictionary(train, 3)
    X = _lr_patches(train, 3, d)
    mean = X.mean(axis=1)
    A = X - mean[:, None]
    x = rng.random(16)
    c = eigen_coefficients(x, 0, d)
    ls, *_ = np.linalg.lstsq(A, x - mean, rcond=None)
    assert np.allclose(A @ c, A @ ls, atol=1e-10)
    assert np.allclose(c, np.linalg.pinv(A) @ (x - mean), atol=1e-8)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_hallucinate_patch_is_affine(a, b, seed):
    r = np.random.default_rng(seed)
    d = build_dictionary(_images(r, 4, 8), 2)
    x, y = r.random(16), r.random(16)
    z0 = hallucinate_patch(np.zeros(16), 0, d)
    lhs = hallucinate_patch(a * x + b * y, 0, d) - z0
    rhs = a * (hallucinate_patch(x, 0, d) - z0) + b * (hallucinate_patch(y, 0, d) - z0)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_degenerate_position_falls_back_to_mean(rng):
    same = GrayImage(rng.random((8, 8)))
    d = build_dictionary([same, same, same], 2)
    assert d.ranks[0] == 0 and d.n_degenerate == 1
    out = hallucinate_patch(rng.random(16), 0, d)
    assert np.allclose(out, same.data.ravel()[d.grid.hr_index[0]])


def test_training_input_errors(rng):
    with pytest.raises(InvalidArgumentError):
        build_dictionary(_images(rng, 1, 8), 2)
    with pytest.raises(InvalidArgumentError):
        build_dictionary([GrayImage(rng.random((8, 8))), GrayImage(rng.random((10, 10)))], 2)


def test_degrade_constant_and_size():
    c = GrayImage.constant(231, 231, 0.37)
    lr = degrade(c, 18)
    assert lr.shape == (13, 13)
    assert np.allclose(lr.data, 0.37)
    assert degrade(c, 8).shape == (29, 29)
    with pytest.raises(InvalidArgumentError):
        degrade(GrayImage.constant(10, 12, 0.0), 2)


def test_reproject_descends_and_converges(rng):
    side, f = 48, 4
    truth = GrayImage(rng.random((side, side)))
    x = degrade(truth, f)
    start = resize(x, side, side)
    res = reproject(start, x, f)
    hist = np.array(res.residuals)
    assert np.all(np.diff(hist) <= 1e-12)
    assert res.residual < hist[0]
    smooth = GrayImage.from_array(0.5 + 0.3 * np.sin(np.arange(231) / 9.0)[:, None] * np.ones(231))
    x = degrade(smooth, 2)
    res = reproject(resize(x, 231, 231), x, 2)
    assert res.converged and res.iterations < 500


def test_reproject_reports_iteration_cap(rng):
    truth = GrayImage(rng.random((48, 48)))
    x = degrade(truth, 4)
    res = reproject(resize(x, 48, 48), x, 4, HallucinationConfig(max_iters=3))
    assert res.iterations == 3 and not res.converged and len(res.residuals) == 4


def test_reproject_rejects_wrong_lr_size(rng):
    with pytest.raises(InvalidArgumentError):
        reproject(GrayImage(rng.random((48, 48))), GrayImage(rng.random((5, 5))), 4)


def test_hallucinate_training_image_is_exact(rng):
    train = _images(rng, 6, 24)
    d = build_dictionary(train, 2)
    out = hallucinate(degrade(train[2], 2), d)
    assert np.allclose(out.data, train[2].data, atol=1e-8)
    res = super_resolve(degrade(train[2], 2), d)
    assert res.image.shape == (24, 24)
    with pytest.raises(InvalidArgumentError):
        hallucinate(GrayImage(rng.random((5, 5))), d)


def test_dictionary_round_trip(tmp_path, rng):
    d = build_dictionary(_images(rng, 5, 24), 3)
    save_dictionary(d, tmp_path / "d.eigd")
    e = load_dictionary(tmp_path / "d.eigd")
    for name in ("ranks", "mean_l", "mean_h", "eigvals", "eigvecs", "lr_basis", "hr_basis"):
        assert np.array_equal(getattr(d, name), getattr(e, name))
    assert e.grid == d.grid and e.source_hash == d.source_hash and e.n_train == 5
    info = read_dictionary_header(tmp_path / "d.eigd")
    assert info["factor"] == 3 and info["lr_side"] == 8 and info["enhancement"] == "none"


def test_dictionary_file_errors(tmp_path, rng):
    d = build_dictionary(_images(rng, 3, 8), 2)
    p = tmp_path / "d.eigd"
    save_dictionary(d, p)
    raw = p.read_bytes()
    (tmp_path / "short.eigd").write_bytes(raw[:-8])
    with pytest.raises(MalformedFileError):
        load_dictionary(tmp_path / "short.eigd")
    (tmp_path / "hdr.eigd").write_bytes(raw[:20])
    with pytest.raises(MalformedFileError):
        load_dictionary(tmp_path / "hdr.eigd")
    (tmp_path / "magic.eigd").write_bytes(b"NOTADICT" + raw[8:])
    with pytest.raises(UnsupportedFormatError):
        load_dictionary(tmp_path / "magic.eigd")
    with pytest.raises(MissingFileError):
        load_dictionary(tmp_path / "none.eigd")
