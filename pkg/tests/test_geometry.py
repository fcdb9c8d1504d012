import numpy as np
import pytest

from eigeniris.errors import AnnotationParseError, InvalidAnnotationError, MissingFileError
from eigeniris.geometry import (
    CSV_FIELDS, Circle, IrisAnnotation, Rejected, align_crop, check_annulus, load_annotations, region_mask,
    rescale_to_reference, sample_points, save_annotations, unwrap,
)
from eigeniris.image import GrayImage


def _ann(cx=150.0, cy=140.0, pr=20.0, sr=60.0, **kw):
    return IrisAnnotation("img", "S1", "L", 1, Circle(cx, cy, pr), Circle(cx, cy, sr), **kw)


def test_rescale_sets_reference_radius():
    img = GrayImage.constant(300, 280, 0.5)
    out, ann = rescale_to_reference(img, _ann())
    assert ann.sclera.r == pytest.approx(105.0)
    assert out.shape == (490, 525)
    assert ann.pupil.r == pytest.approx(35.0)


def test_align_crop_is_pupil_centred():
    data = np.zeros((300, 340))
    data[150, 170] = 1.0
    ann = IrisAnnotation("a", "S", "R", 1, Circle(170.2, 149.7, 35), Circle(170, 150, 105))
    crop, a = align_crop(GrayImage(data), ann)
    assert crop.shape == (231, 231)
    assert crop.data[115, 115] == 1.0
    assert a.pupil.cx == pytest.approx(115.2) and a.pupil.cy == pytest.approx(114.7)


def test_align_crop_rejects_near_edge():
    ann = IrisAnnotation("a", "S", "R", 1, Circle(30, 150, 20), Circle(30, 150, 25))
    out = align_crop(GrayImage.constant(340, 300, 0.5), ann)
    assert isinstance(out, Rejected) and "exceeds" in out.reason


def test_unwrap_shape_and_radial_profile():
    yy, xx = np.mgrid[0:231, 0:231]
    r = np.hypot(xx - 115, yy - 115)
    img = GrayImage(np.clip(r / 150, 0, 1))
    ann = IrisAnnotation("a", "S", "L", 1, Circle(115, 115, 35), Circle(115, 115, 105))
    n = unwrap(img, ann)
    assert n.texture.shape == (20, 240) and n.mask.shape == (20, 240)
    assert n.mask.all()
    expected = (35 + (np.arange(20) + 0.5) / 20 * 70) / 150
    assert np.allclose(n.texture.data, expected[:, None], atol=2e-3)


def test_sample_points_follow_boundaries():
    ann = _ann()
    x, y = sample_points(ann, rows=4, cols=8)
    # column 2 is theta = pi/2: straight up on screen
    assert x[:, 2] == pytest.approx(np.full(4, 150.0))
    assert y[0, 2] == pytest.approx(140 - (20 + 0.125 * 40))


def test_eyelid_masks_samples():
    lid = Circle(115, 115 - 60 - 300, 300)  # chord at y = 55
    ann = IrisAnnotation("a", "S", "L", 1, Circle(115, 115, 35), Circle(115, 115, 105), upper_eyelid=lid)
    n = unwrap(GrayImage.constant(231, 231, 0.5), ann)
    x, y = sample_points(ann)
    assert np.array_equal(n.mask, ~lid.contains(x, y))
    assert 0 < n.mask.mean() < 1
    assert not region_mask(ann, 115, 50) and region_mask(ann, 115, 170) and not region_mask(ann, 115, 115)


def test_annotation_validation():
    with pytest.raises(InvalidAnnotationError):
        _ann(pr=70)
    with pytest.raises(InvalidAnnotationError):
        IrisAnnotation("a", "S", "X", 1, Circle(0, 0, 1), Circle(0, 0, 2))
    with pytest.raises(InvalidAnnotationError):
        IrisAnnotation("a", "S", "L", 1, Circle(50, 0, 1), Circle(0, 0, 2))
    crossing = IrisAnnotation("a", "S", "L", 1, Circle(30, 0, 20), Circle(0, 0, 40))
    with pytest.raises(InvalidAnnotationError):
        check_annulus(crossing)
    assert _ann().user == "S1_L"


def test_annotation_csv_round_trip(tmp_path):
    anns = [_ann(), IrisAnnotation("b", "S2", "R", 2, Circle(1.5, 2.25, 3), Circle(1.5, 2, 9),
                                   upper_eyelid=Circle(1, -50, 55), lower_eyelid=None)]
    save_annotations(anns, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    assert load_annotations(tmp_path / "a.csv") == anns


def test_annotation_parse_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text(",".join(CSV_FIELDS) + "\n"
                 "ok,S1,L,1,10,10,3,10,10,9,,,,,,\n"
                 "bad,S1,L,one,10,10,3,10,10,9\n"
                 "short,S1,L,1,10\n"
                 "inv,S1,L,1,10,10,30,10,10,9\n")
    with pytest.raises(AnnotationParseError) as exc:
        load_annotations(p)
    assert exc.value.line == 3
    diags = []
    anns = load_annotations(p, strict=False, diagnostics=diags)
    assert [a.image_id for a in anns] == ["ok"]
    assert [d[0] for d in diags] == [3, 4, 5]
    (tmp_path / "nohdr.csv").write_text("ok,S1,L,1,10,10,3,10,10,9\n")
    with pytest.raises(AnnotationParseError):
        load_annotations(tmp_path / "nohdr.csv")
    with pytest.raises(MissingFileError):
        load_annotations(tmp_path / "none.csv")
