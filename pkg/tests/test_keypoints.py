import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigeniris.errors import MalformedFileError, UnsupportedFormatError
from eigeniris.geometry import Circle, IrisAnnotation
from eigeniris.image import GrayImage, blur_array
from eigeniris.keypoints import (
    DESCRIPTOR_STEP, KeypointSet, KpMatchParams, candidate_matches, detect, geometric_filter, image_hash,
    load_keypoints, match_score, quantized, save_keypoints,
)


def _blob_image(cx=50.0, cy=50.0, sigma=4.0, size=100):
    yy, xx = np.mgrid[0:size, 0:size]
    return GrayImage(0.2 + 0.6 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)))


def _texture(seed=0, h=96, w=96):
    r = np.random.default_rng(seed)
    return blur_array(r.random((h, w)), 2.0)


def _stretch(a):
    return GrayImage((a - a.min()) / (a.max() - a.min()))


def test_constant_image_has_no_keypoints():
    assert detect(GrayImage.constant(64, 64, 0.5)) == []


def test_blob_is_found_at_its_centre():
    kps = detect(_blob_image())
    assert kps
    best = min(kps, key=lambda k: math.hypot(k.x - 50, k.y - 50))
    assert math.hypot(best.x - 50, best.y - 50) < 0.5
    assert best.scale == pytest.approx(4.0 / math.sqrt(2) * 1.25, rel=0.3)


def test_descriptors_are_normalized_and_clamped():
    kps = detect(_stretch(_texture()))
    d = np.array([k.descriptor for k in kps])
    assert len(kps) > 10
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-9)
    assert np.all(d >= 0)


def test_mask_discards_points_outside_the_annulus():
    img = _blob_image(20, 20)
    ann_in = IrisAnnotation("a", "S", "L", 1, Circle(50, 50, 10), Circle(50, 50, 45))
    ann_out = IrisAnnotation("a", "S", "L", 1, Circle(80, 80, 5), Circle(80, 80, 15))
    assert detect(img, ann_in)
    assert detect(img, ann_out) == []
    assert detect(img, ann_out, KpMatchParams(mask_required=False))


def test_translation_equivariance():
    base = _texture(1, 140, 140)
    kps = detect(_stretch(base[20:116, 20:116]))
    dx, dy = 4, 8
    moved = detect(_stretch(base[20 - dy:116 - dy, 20 - dx:116 - dx]))
    inner = [k for k in kps if 16 < k.x < 70 and 16 < k.y < 70]
    assert inner
    pts = np.array([(k.x, k.y) for k in moved])
    for k in inner:
        assert np.min(np.hypot(pts[:, 0] - k.x - dx, pts[:, 1] - k.y - dy)) < 0.5


def test_identical_sets_score_one_and_empty_zero():
    kps = quantized(detect(_stretch(_texture(2))))
    assert match_score(kps, kps) == pytest.approx(1.0, abs=0.05)
    assert match_score(kps, []) == 0.0 and match_score([], []) == 0.0


def _set(xy, desc):
    return KeypointSet(np.asarray(xy, float), np.asarray(desc, float))


def test_pruning_hand_enumeration():
    r = np.random.default_rng(5)
    a_xy = r.uniform(0, 200, (13, 2))
    disp = np.array([[5.0 + 0.1 * k, 0.05 * k] for k in range(10)] + [[0.0, 5.0]] * 3)
    a = _set(a_xy, np.eye(13, 128))
    b = _set(a_xy + disp, np.eye(13, 128))
    matches = [(k, k) for k in range(13)]
    kept = geometric_filter(a, b, matches)
    # by hand: median displacement (5.35, 0.05); orthogonal entries deviate by ~pi/2
    mx = sorted(disp[:, 0])[6]
    my = sorted(disp[:, 1])[6]
    by_hand = []
    for k, (ux, uy) in enumerate(disp):
        ang = math.atan2(abs(ux * my - uy * mx), ux * mx + uy * my)
        length_ok = abs(math.hypot(ux, uy) - math.hypot(mx, my)) <= 0.35 * (math.hypot(mx, my) + 1)
        if ang <= 0.35 and length_ok:
            by_hand.append((k, k))
    assert kept == by_hand == [(k, k) for k in range(10)]
    assert match_score(a, b) == pytest.approx(10 / 13)


def test_short_median_checks_length_only():
    a = _set([[0, 0], [10, 0], [20, 0], [30, 0]], np.eye(4, 128))
    b = _set([[0.1, 0], [10, 0.1], [19.9, 0], [31.5, 0]], np.eye(4, 128))
    kept = geometric_filter(a, b, [(k, k) for k in range(4)])
    assert kept == [(0, 0), (1, 1), (2, 2)]


def test_ratio_test_rejects_ambiguous_matches():
    a = _set(np.zeros((2, 2)), np.eye(2, 128))
    halfway = _set(np.zeros((1, 2)), [np.eye(1, 128)[0] * 0.8 + np.eye(2, 128)[1] * 0.6])
    # distances 0.63 and 0.89: ratio 0.71
    assert candidate_matches(halfway, a) == [(0, 0)]
    assert candidate_matches(a, halfway) == [(0, 0)]
    assert candidate_matches(halfway, a, ratio=0.7) == []


@given(st.integers(0, 2**31 - 1), st.integers(1, 25), st.integers(1, 25))
def test_match_score_symmetric_and_pruning_monotone(seed, na, nb):
    r = np.random.default_rng(seed)
    da = np.abs(r.normal(size=(na, 128)))
    k = min(na, nb // 2)
    db = np.vstack([da[:k] + 0.01 * r.random((k, 128)), np.abs(r.normal(size=(nb - k, 128)))])
    a = _set(r.uniform(0, 100, (na, 2)), da)
    b = _set(r.uniform(0, 100, (nb, 2)), db)
    assert match_score(a, b) == match_score(b, a)
    cand = candidate_matches(a, b)
    assert len(geometric_filter(a, b, cand)) <= len(cand)
    assert 0.0 <= match_score(a, b) <= 1.0


def test_cache_round_trip(tmp_path):
    img = _stretch(_texture(3))
    kps = detect(img)
    h = image_hash(img)
    save_keypoints(kps, tmp_path / "k.kpc", h)
    back = load_keypoints(tmp_path / "k.kpc", h)
    q = quantized(kps)
    assert len(back) == len(kps)
    for u, v in zip(back, q):
        assert (u.x, u.y, u.scale, u.orientation) == (v.x, v.y, v.scale, v.orientation)
        assert np.array_equal(u.descriptor, v.descriptor)
    assert np.max(np.abs(q[0].descriptor - kps[0].descriptor)) <= DESCRIPTOR_STEP / 2
    assert load_keypoints(tmp_path / "k.kpc", b"\1" * 32) is None
    assert load_keypoints(tmp_path / "none.kpc") is None


def test_cache_errors(tmp_path):
    save_keypoints(detect(_stretch(_texture(4))), tmp_path / "k.kpc", b"\0" * 32)
    raw = (tmp_path / "k.kpc").read_bytes()
    (tmp_path / "a").write_bytes(raw[:-3])
    with pytest.raises(MalformedFileError):
        load_keypoints(tmp_path / "a")
    (tmp_path / "b").write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(UnsupportedFormatError):
        load_keypoints(tmp_path / "b")
    (tmp_path / "c").write_bytes(raw[:10])
    with pytest.raises(MalformedFileError):
        load_keypoints(tmp_path / "c")
