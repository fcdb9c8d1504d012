import csv
import shutil

import numpy as np
import pytest

from eigeniris import experiment as ex
from eigeniris.cli import main
from eigeniris.errors import ConfigError
from eigeniris.image import GrayImage, save_image

PLAN = """\
# reduced sweep over the mini corpus
dataset = data/images
annotations = data/annotations.csv
workdir = work
factors = 2, 18
reconstructions = eigenpatch, bilinear
matchers = lg, kp, fusion
train_subjects = 2
"""


@pytest.fixture(scope="module")
def project(mini_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("proj")
    shutil.copytree(mini_corpus[0], root / "data")
    (root / "plan.txt").write_text(PLAN)
    assert main(["prepare", "--plan", str(root / "plan.txt")]) == 0
    assert main(["train", "--plan", str(root / "plan.txt")]) == 0
    assert main(["run", "--plan", str(root / "plan.txt")]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_plan_parsing(tmp_path):
    raw = ex.parse_plan_text("factors = 2,4  # two\n\nmatchers = lg\n")
    assert raw == {"factors": "2,4", "matchers": "lg"}
    p = ex.plan_from_mapping(raw, tmp_path)
    assert p.factors == (2, 4) and p.matchers == ("lg",)
    assert ex.plan_from_mapping({"workdir": "w"}, tmp_path).workdir == tmp_path / "w"
    for bad in ("colour = red", "factors"):
        with pytest.raises(ConfigError):
            ex.parse_plan_text(bad)
    for bad in ({"factors": "3"}, {"factors": "two"}, {"scenarios": "3"}, {"enhancements": "gamma"},
                {"matchers": ""}, {"fusion_training": "test"}, {"tau": "-1"}, {"factors": "2,2"}):
        with pytest.raises(ConfigError):
            ex.plan_from_mapping(bad)


def test_plan_file_and_overrides(tmp_path):
    (tmp_path / "p.txt").write_text(PLAN)
    p = ex.load_plan(tmp_path / "p.txt", {"factors": "4"})
    assert p.factors == (4,) and p.dataset == tmp_path / "data/images"
    assert ex.load_plan(None, {}).train_subjects == 116
    with pytest.raises(ConfigError):
        ex.load_plan(tmp_path / "missing.txt")
    assert "factors = 2,4" in ex.format_plan(ex.plan_from_mapping({"factors": "2,4"}))


def test_prepare_manifest(project):
    rows = _rows(project / "work/manifest.csv")
    kept = [r for r in rows if r["status"] == "kept"]
    assert len(kept) == 16
    assert {r["subject_id"] for r in kept if r["partition"] == "train"} == {"S001", "S002"}
    assert {r["partition"] for r in kept if r["subject_id"] in ("S003", "S004")} == {"test"}
    for r in kept:
        img = ex.load_image(project / "work/aligned" / f"{r['image_id']}.pgm")
        assert img.shape == (231, 231)


def test_prepare_records_rejections(mini_corpus, tmp_path):
    shutil.copytree(mini_corpus[0], tmp_path / "data")
    save_image(GrayImage.constant(40, 40, 0.5), tmp_path / "data/images/orphan.pgm")
    lines = (tmp_path / "data/annotations.csv").read_text().splitlines()
    lines.append("ghost,S009,L,1,100,100,30,100,100,90,,,,,,")
    lines.append("edge,S009,R,1,20,150,30,20,150,90,,,,,,")
    lines.append("broken,S009,R,1,20")
    (tmp_path / "data/annotations.csv").write_text("\n".join(lines) + "\n")
    save_image(GrayImage.constant(340, 300, 0.5), tmp_path / "data/images/edge.pgm")
    plan = ex.plan_from_mapping({"dataset": "data/images", "annotations": "data/annotations.csv",
                                 "workdir": "work", "train_subjects": "2"}, tmp_path)
    s = ex.prepare(plan)
    assert (s.kept, s.rejected) == (16, 4)
    reasons = {r["image_id"]: r["reason"] for r in _rows(tmp_path / "work/manifest.csv") if r["status"] == "rejected"}
    assert reasons["orphan"] == "no annotation record"
    assert reasons["ghost"] == "image file not found"
    assert "exceeds" in reasons["edge"]
    assert any("bad annotation record" in v for k, v in reasons.items() if k == "")


def test_prepare_empty_dataset(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "a.csv").write_text("image_id\n")
    plan = ex.plan_from_mapping({"dataset": "images", "annotations": "a.csv", "workdir": "w"}, tmp_path)
    s = ex.prepare(plan)
    assert (s.kept, s.rejected) == (0, 0)
    assert _rows(tmp_path / "w/manifest.csv") == []


def test_train_outputs_and_idempotence(project, capsys):
    dicts = sorted((project / "work/dicts").glob("*.eigd"))
    assert len(dicts) == 2  # |factors| x |enhancements|
    f18 = [d for d in dicts if d.name.startswith("f18")][0]
    info = ex.read_dictionary_header(f18)
    assert info["lr_side"] == 13 and info["n_train"] == 8
    assert main(["train", "--plan", str(project / "plan.txt")]) == 0
    out = capsys.readouterr().out
    assert out.count("kept ") == 2 and "built" not in out


def test_run_results(project):
    rows = _rows(project / "work/results.csv")
    # lg, kp, fusion x 2 scenarios x 2 reconstructions x 2 factors
    assert len(rows) == 24
    assert all(r["status"] == "ok" for r in rows)
    assert {int(r["n_genuine"]) for r in rows} == {4} and {int(r["n_impostor"]) for r in rows} == {12}
    assert all(0 <= float(r["eer"]) <= 1 for r in rows)
    scores = _rows(project / "work/scores/lg-s2-f02-none-eigenpatch.csv")
    assert list(scores[0]) == list(ex.SCORE_FIELDS)
    assert len(scores) == 16
    assert (project / "work/scores/dev/lg-s2-f02-none-eigenpatch.csv").is_file()
    assert (project / "work/plots/eer_lg_s2.svg").read_text().startswith("<svg")
    assert (project / "work/plots/det_fusion_s1_none+none_bilinear.svg").is_file()
    q = _rows(project / "work/quality/f18-none-eigenpatch.csv")
    assert len(q) == 8 + 8
    # an 8-image dictionary may leave re-projection at the cap; the flag must say so
    assert all(r["converged"] == "1" or int(r["iterations"]) == 500 for r in q)


def test_rerun_is_noop_and_byte_identical(project, capsys):
    before = (project / "work/results.csv").read_bytes()
    assert main(["run", "--plan", str(project / "plan.txt")]) == 0
    assert "24 reused" in capsys.readouterr().out
    assert (project / "work/results.csv").read_bytes() == before


def test_parallel_run_matches(project, tmp_path):
    plan = ex.load_plan(project / "plan.txt", {"workdir": str(tmp_path / "w"), "matchers": "lg",
                                               "reconstructions": "bilinear"})
    ex.prepare(plan)
    s = ex.run(plan, jobs=2)
    assert s.failed == 0
    for r in s.rows:
        ref = (project / "work/scores" / f"{r['cell_id']}.csv").read_bytes()
        assert (tmp_path / "w/scores" / f"{r['cell_id']}.csv").read_bytes() == ref


def test_missing_dictionary_fails_only_its_cells(project, tmp_path, capsys):
    shutil.copytree(project / "work", tmp_path / "work")
    shutil.rmtree(tmp_path / "work/cells")
    for d in (tmp_path / "work/dicts").glob("f18*"):
        d.unlink()
    args = ["run", "--plan", str(project / "plan.txt"), "--workdir", str(tmp_path / "work")]
    assert main(args) == 1
    rows = _rows(tmp_path / "work/results.csv")
    failed = {r["cell_id"] for r in rows if r["status"] != "ok"}
    assert failed == {r["cell_id"] for r in rows if r["factor"] == "18" and r["reconstruction"] == "eigenpatch"}
    assert all("dictionary" in r["message"] or "input cells failed" in r["message"]
               for r in rows if r["status"] != "ok")
    assert main(["report", "--plan", str(project / "plan.txt"), "--workdir", str(tmp_path / "work")]) == 1
    assert "  fail" in capsys.readouterr().out


def test_report_and_dict_inspect(project, capsys):
    assert main(["report", "--plan", str(project / "plan.txt")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split()[:4] == ["matcher", "s", "enhancement", "recon"]
    assert len(out.splitlines()) == 2 + 12
    svg_before = (project / "work/plots/eer_lg_s1.svg").read_bytes()
    assert main(["report", "--plan", str(project / "plan.txt")]) == 0
    assert (project / "work/plots/eer_lg_s1.svg").read_bytes() == svg_before
    f18 = next((project / "work/dicts").glob("f18*"))
    assert main(["dict", "inspect", str(f18)]) == 0
    out = capsys.readouterr().out
    assert "lr_side       13" in out and "rank" in out
    assert main(["dict", "inspect", "--header-only", str(f18)]) == 0
    assert "rank" not in capsys.readouterr().out


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--set", "factors=3"]) == 2
    assert main(["run", "--set", "nonsense"]) == 2
    assert main(["run", "--jobs", "0"]) == 2
    assert main(["prepare", "--dataset", str(tmp_path / "none"), "--annotations", str(tmp_path / "a.csv"),
                 "--workdir", str(tmp_path / "w")]) == 3
    (tmp_path / "bad.eigd").write_bytes(b"garbage")
    assert main(["dict", "inspect", str(tmp_path / "bad.eigd")]) == 3
    assert main(["run", "--workdir", str(tmp_path / "empty")]) == 2  # no manifest yet
    assert main(["synth", str(tmp_path / "syn"), "--subjects", "0"]) == 2
    capsys.readouterr()


def test_cli_synth(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "syn"), "--subjects", "1", "--images", "2"]) == 0
    assert "wrote 4 images" in capsys.readouterr().out
    assert len(list((tmp_path / "syn/images").glob("*.pgm"))) == 4


def test_synthetic_corpus_is_deterministic(tmp_path):
    from eigeniris.synthetic import generate_corpus

    a = generate_corpus(tmp_path / "a", n_subjects=1, images_per_eye=2, seed=3)
    b = generate_corpus(tmp_path / "b", n_subjects=1, images_per_eye=2, seed=3)
    assert a == b
    for p in (tmp_path / "a/images").iterdir():
        assert p.read_bytes() == (tmp_path / "b/images" / p.name).read_bytes()
    img = ex.load_image(tmp_path / "a/images/S001L_01.pgm").data
    assert img.shape == (300, 340) and np.ptp(img) > 0.3
