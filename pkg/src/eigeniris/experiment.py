"""Experiment plan, dataset preparation, dictionary training and the evaluation sweep.

Work directory layout::

    manifest.csv                 kept / rejected images, reasons, partition
    aligned/<image_id>.pgm       231x231 pupil-centred crops
    aligned_annotations.csv      annotations in the crop frame
    dicts/fFF_<enh>_<hash>.eigd  one dictionary per (factor, enhancement)
    scores/<cell>.csv            per-trial scores (scores/dev/ for fusion development)
    det/<cell>.csv               DET operating points
    quality/<unit>.csv           per-image reconstruction PSNR and iterations
    cells/<cell>.json            completion markers keyed by input hashes
    results.csv                  one row per cell
    plots/*.svg
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import svg
from .eigenpatch import (HallucinationConfig, build_dictionary, degrade, load_dictionary, read_dictionary_header,
                         save_dictionary, super_resolve, training_hash)
from .enhance import METHODS, EnhanceMethod, enhance
from .errors import ConfigError, EigenIrisError, MissingFileError
from .evaluation import Polarity, ScoreSet, build_protocol, det_curve, eer, fuse_sets, kfold_fusion, train_fusion
from .geometry import (CROP_SIDE, Rejected, align_crop, check_annulus, load_annotations, rescale_to_reference,
                       save_annotations, unwrap)
from .image import BICUBIC, BILINEAR, load_image, psnr, resize, save_image
from .keypoints import DetectorParams, KeypointSet, KpMatchParams, detect, match_score, quantized
from .lg import LgParams, encode, hamming

log = logging.getLogger(__name__)

RECONSTRUCTIONS = ("eigenpatch", "bilinear", "bicubic")
MATCHERS = ("lg", "kp", "fusion")
POLARITY = {"lg": Polarity.LOWER_IS_BETTER, "kp": Polarity.HIGHER_IS_BETTER, "fusion": Polarity.HIGHER_IS_BETTER}
_SOURCE = {"test": "test", "dev": "train"}  # fusion development reuses the dictionary users
UNDEFINED_HAMMING = 1.0  # no jointly valid bits at any shift
FORMAT_VERSION = 1

MANIFEST_FIELDS = ("image_id", "subject_id", "eye", "user", "status", "reason", "partition", "source")
SCORE_FIELDS = ("pair_id", "user_a", "img_a", "user_b", "img_b", "label", "matcher", "factor", "scenario",
                "enhancement", "reconstruction", "score")
RESULT_FIELDS = ("cell_id", "matcher", "scenario", "factor", "enhancement", "reconstruction", "status", "eer",
                 "threshold", "n_genuine", "n_impostor", "scores_file", "scores_sha256", "dictionary_sha256",
                 "message")


# --- plan --------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    dataset: Path = Path("dataset")
    annotations: Path = Path("annotations.csv")
    workdir: Path = Path("work")
    factors: tuple[int, ...] = (2, 4, 6, 8, 10, 12, 14, 16, 18)
    scenarios: tuple[int, ...] = (1, 2)
    enhancements: tuple[str, ...] = ("none",)
    reconstructions: tuple[str, ...] = RECONSTRUCTIONS
    matchers: tuple[str, ...] = MATCHERS
    seed: int = 0
    train_subjects: int = 116
    fusion_training: str = "dev"  # "dev" or "kfold"
    fusion_folds: int = 5
    fusion_lg_enhancement: str = "none"
    det_points: int = 200
    tau: float = 0.02
    epsilon: float = 1e-5
    max_iters: int = 500

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)
        for name in ("factors", "scenarios", "enhancements", "reconstructions", "matchers"):
            need(len(getattr(self, name)) > 0, f"{name} must not be empty")
            need(len(set(getattr(self, name))) == len(getattr(self, name)), f"{name} has duplicates")
        need(all(f >= 2 and f % 2 == 0 for f in self.factors), "factors must be even and >= 2")
        need(set(self.scenarios) <= {1, 2}, "scenarios must be 1 and/or 2")
        need(set(self.enhancements) <= set(METHODS), f"enhancements must be among {METHODS}")
        need(self.fusion_lg_enhancement in METHODS, f"fusion_lg_enhancement must be among {METHODS}")
        need(set(self.reconstructions) <= set(RECONSTRUCTIONS), f"reconstructions must be among {RECONSTRUCTIONS}")
        need(set(self.matchers) <= set(MATCHERS), f"matchers must be among {MATCHERS}")
        need(self.fusion_training in ("dev", "kfold"), "fusion_training must be 'dev' or 'kfold'")
        need(self.fusion_folds >= 2, "fusion_folds must be >= 2")
        need(self.train_subjects >= 0, "train_subjects must be >= 0")
        need(self.det_points >= 2, "det_points must be >= 2")
        try:
            self.hallucination_config()
        except EigenIrisError as exc:
            raise ConfigError(str(exc)) from None

    def hallucination_config(self) -> HallucinationConfig:
        return HallucinationConfig(tau=self.tau, epsilon=self.epsilon, max_iters=self.max_iters)

    @property
    def fusion(self) -> bool:
        return "fusion" in self.matchers

    def all_enhancements(self) -> tuple[str, ...]:
        extra = (self.fusion_lg_enhancement,) if self.fusion and self.fusion_lg_enhancement not in self.enhancements else ()
        return tuple(self.enhancements) + extra


_LIST_INT = {"factors", "scenarios"}
_LIST_STR = {"enhancements", "reconstructions", "matchers"}
_PATHS = {"dataset", "annotations", "workdir"}
_INTS = {"seed", "train_subjects", "fusion_folds", "det_points", "max_iters"}
_FLOATS = {"tau", "epsilon"}
PLAN_KEYS = tuple(f.name for f in fields(ExperimentPlan))


def parse_plan_text(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"plan line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in PLAN_KEYS:
            raise ConfigError(f"plan line {n}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(raw: dict[str, str], base: Path | None) -> dict:
    kw = {}
    for key, value in raw.items():
        if key not in PLAN_KEYS:
            raise ConfigError(f"unknown plan key {key!r}")
        try:
            if key in _LIST_INT:
                kw[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif key in _LIST_STR:
                kw[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            elif key in _PATHS:
                p = Path(value).expanduser()
                kw[key] = p if p.is_absolute() or base is None else base / p
            elif key in _INTS:
                kw[key] = int(value)
            elif key in _FLOATS:
                kw[key] = float(value)
            else:
                kw[key] = value
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return kw


def plan_from_mapping(raw: dict[str, str], base: Path | None = None) -> ExperimentPlan:
    return ExperimentPlan(**_convert(raw, base))


def load_plan(path=None, overrides: dict[str, str] | None = None) -> ExperimentPlan:
    """Plan file values (paths relative to the file) updated by ``overrides`` (paths relative to cwd)."""
    kw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: plan file not found")
        kw.update(_convert(parse_plan_text(path.read_text()), path.resolve().parent))
    kw.update(_convert(overrides or {}, Path.cwd()))
    return ExperimentPlan(**kw)


def format_plan(plan: ExperimentPlan) -> str:
    lines = []
    for f in fields(plan):
        v = getattr(plan, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


# --- work directory ----------------------------------------------------------

@dataclass(frozen=True)
class Workspace:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    def __getattr__(self, name):
        paths = {
            "manifest": "manifest.csv", "aligned": "aligned", "aligned_annotations": "aligned_annotations.csv",
            "dicts": "dicts", "scores": "scores", "det": "det", "quality": "quality", "cells": "cells",
            "results": "results.csv", "plots": "plots",
        }
        if name in paths:
            return self.root / paths[name]
        raise AttributeError(name)


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, newline="")
    tmp.replace(path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return repr(float(v))


# --- prepare -----------------------------------------------------------------

@dataclass
class PrepareSummary:
    kept: int = 0
    rejected: int = 0
    train: int = 0
    test: int = 0
    train_subjects: list[str] = field(default_factory=list)


def find_images(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise MissingFileError(f"{root}: dataset directory not found")
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix.lower() in (".pgm", ".png"):
            if p.stem in out:
                log.warning("duplicate image id %s: keeping %s, ignoring %s", p.stem, out[p.stem], p)
                continue
            out[p.stem] = p
    return out


def prepare(plan: ExperimentPlan) -> PrepareSummary:
    """Rescale, crop and partition the dataset into the work directory."""
    ws = Workspace(plan.workdir)
    images = find_images(plan.dataset)
    diagnostics = []
    anns = load_annotations(plan.annotations, strict=False, diagnostics=diagnostics)
    if not images:
        log.warning("%s: no images found", plan.dataset)
    ws.aligned.mkdir(parents=True, exist_ok=True)
    rows = []
    kept = []
    seen = set()
    for line, msg in diagnostics:
        rows.append(["", "", "", "", "rejected", f"bad annotation record: {msg}", "", ""])
    for ann in sorted(anns, key=lambda a: a.image_id):
        base = [ann.image_id, ann.subject_id, ann.eye, ann.user]
        src = images.get(ann.image_id)
        if ann.image_id in seen:
            rows.append(base + ["rejected", "duplicate annotation record", "", ""])
            continue
        seen.add(ann.image_id)
        if src is None:
            rows.append(base + ["rejected", "image file not found", "", ""])
            continue
        try:
            img = load_image(src)
            img, a = rescale_to_reference(img, ann)
            res = align_crop(img, a, CROP_SIDE)
            if isinstance(res, Rejected):
                rows.append(base + ["rejected", res.reason, "", str(src)])
                continue
            crop, a = res
            check_annulus(a)
        except EigenIrisError as exc:
            rows.append(base + ["rejected", str(exc), "", str(src)])
            continue
        save_image(crop, ws.aligned / f"{ann.image_id}.pgm")
        kept.append((a, base, str(src)))
    for image_id in sorted(set(images) - seen):
        rows.append([image_id, "", "", "", "rejected", "no annotation record", "", str(images[image_id])])
    subjects = sorted({a.subject_id for a, _, _ in kept})
    train_subjects = set(subjects[:plan.train_subjects])
    summary = PrepareSummary(train_subjects=sorted(train_subjects))
    for a, base, src in kept:
        part = "train" if a.subject_id in train_subjects else "test"
        rows.append(base + ["kept", "", part, src])
        summary.kept += 1
        summary.train += part == "train"
        summary.test += part == "test"
    summary.rejected = len(rows) - summary.kept
    rows.sort(key=lambda r: (r[4] != "kept", r[0], r[5]))
    _write_text_atomic(ws.manifest, _csv_text(MANIFEST_FIELDS, rows))
    save_annotations([a for a, _, _ in kept], ws.aligned_annotations)
    log.info("prepare: %d kept (%d train / %d test), %d rejected", summary.kept, summary.train, summary.test,
             summary.rejected)
    return summary


def read_manifest(ws: Workspace) -> list[dict]:
    if not ws.manifest.is_file():
        raise ConfigError(f"{ws.manifest}: no manifest; run prepare first")
    with open(ws.manifest, newline="") as fh:
        return list(csv.DictReader(fh))


def _partitions(ws: Workspace):
    rows = read_manifest(ws)
    anns = {}
    if ws.aligned_annotations.is_file():
        anns = {a.image_id: a for a in load_annotations(ws.aligned_annotations)}
    parts = {"train": [], "test": []}
    for r in rows:
        if r["status"] == "kept":
            if r["image_id"] not in anns:
                raise ConfigError(f"manifest lists {r['image_id']} but its aligned annotation is missing")
            parts[r["partition"]].append(r["image_id"])
    return {k: sorted(v) for k, v in parts.items()}, anns


# --- train -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainRecord:
    factor: int
    enhancement: str
    path: Path
    built: bool


def _training_images(ws: Workspace, ids):
    return [load_image(ws.aligned / f"{i}.pgm") for i in ids]


def dictionary_path(ws: Workspace, factor: int, enhancement: str, source_hash: bytes) -> Path:
    return ws.dicts / f"f{factor:02d}_{enhancement}_{source_hash.hex()[:16]}.eigd"


def _expected_dictionaries(plan: ExperimentPlan, ws: Workspace, train_imgs):
    cfg = plan.hallucination_config()
    out = {}
    for f in plan.factors:
        for e in plan.all_enhancements():
            h = training_hash(train_imgs, f, EnhanceMethod(e), cfg)
            out[(f, e)] = (dictionary_path(ws, f, e, h), h)
    return out


def train(plan: ExperimentPlan) -> list[TrainRecord]:
    """Build one dictionary per (factor, enhancement); existing up-to-date files are kept."""
    ws = Workspace(plan.workdir)
    parts, _ = _partitions(ws)
    if len(parts["train"]) < 2:
        raise ConfigError(f"need at least 2 training images, found {len(parts['train'])}")
    imgs = _training_images(ws, parts["train"])
    cfg = plan.hallucination_config()
    ws.dicts.mkdir(parents=True, exist_ok=True)
    records = []
    for (f, e), (path, h) in _expected_dictionaries(plan, ws, imgs).items():
        if path.is_file():
            try:
                if read_dictionary_header(path)["source_hash"] == h.hex():
                    records.append(TrainRecord(f, e, path, False))
                    log.info("train: %s up to date", path.name)
                    continue
            except EigenIrisError:
                pass
        d = build_dictionary(imgs, f, EnhanceMethod(e), cfg)
        save_dictionary(d, path)
        lam = d.eigvals
        share = lam[:, 0] / np.maximum(lam.sum(axis=1), 1e-300)
        log.info("train: %s  LR %dx%d, %d positions, rank min/median/max %d/%d/%d, "
                 "first-component share %.3f, %d degenerate", path.name, d.grid.lr_side, d.grid.lr_side,
                 d.grid.n_positions, d.ranks.min(), int(np.median(d.ranks)), d.ranks.max(),
                 float(np.mean(share)), d.n_degenerate)
        records.append(TrainRecord(f, e, path, True))
    return records


# --- run ---------------------------------------------------------------------

@dataclass(frozen=True)
class UnitJob:
    """Images reconstructed one way, and the features extracted from them."""
    key: str
    name: str
    factor: int  # 0 for the original HR images
    enhancement: str
    reconstruction: str  # "hr" or one of RECONSTRUCTIONS
    ids: tuple[str, ...]
    aligned: str
    annotations: dict
    dictionary: str | None
    cfg: HallucinationConfig
    lg: bool
    kp: bool


@dataclass
class UnitFeatures:
    lg: dict
    kp: dict
    quality: list


def reconstruct(hr, factor, enhancement, reconstruction, cfg, dictionary=None):
    """Returns (image, re-projection result or None)."""
    method = EnhanceMethod(enhancement)
    if reconstruction == "hr":
        return enhance(hr, method), None
    lr = enhance(degrade(hr, factor, cfg), method)
    if reconstruction == "eigenpatch":
        res = super_resolve(lr, dictionary, cfg)
        return res.image, res
    kernel = BILINEAR if reconstruction == "bilinear" else BICUBIC
    return resize(lr, hr.width, hr.height, kernel), None


def compute_unit(job: UnitJob) -> UnitFeatures:
    d = load_dictionary(job.dictionary) if job.dictionary else None
    out = UnitFeatures({}, {}, [])
    for image_id in job.ids:
        ann = job.annotations[image_id]
        hr = load_image(Path(job.aligned) / f"{image_id}.pgm")
        img, res = reconstruct(hr, job.factor, job.enhancement, job.reconstruction, job.cfg, d)
        if job.reconstruction != "hr":
            ref = enhance(hr, EnhanceMethod(job.enhancement))
            out.quality.append([image_id, _num(psnr(img, ref)), res.iterations if res else 0,
                                int(res.converged) if res else 1])
        if job.lg:
            out.lg[image_id] = encode(unwrap(img, ann))
        if job.kp:
            out.kp[image_id] = KeypointSet.from_keypoints(quantized(detect(img, ann)))
    return out


@dataclass
class Cell:
    matcher: str
    scenario: int
    factor: int
    enhancement: str
    reconstruction: str
    gallery: str = ""  # unit names
    probe: str = ""
    inputs: tuple = ()  # fusion: (lg cell id, kp cell id)
    key: str = ""

    @property
    def cell_id(self) -> str:
        return f"{self.matcher}-s{self.scenario}-f{self.factor:02d}-{self.enhancement}-{self.reconstruction}"


@dataclass
class RunSummary:
    cells: int = 0
    failed: int = 0
    skipped: int = 0
    rows: list = field(default_factory=list)


def _unit_name(factor, enh, recon):
    return f"hr-{enh}" if recon == "hr" else f"f{factor:02d}-{enh}-{recon}"


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\0")
    return h.hexdigest()


def _plan_cells(plan: ExperimentPlan):
    lg_enhs = list(plan.enhancements) if "lg" in plan.matchers else []
    if plan.fusion and plan.fusion_lg_enhancement not in lg_enhs:
        lg_enhs.append(plan.fusion_lg_enhancement)
    kp_enhs = list(plan.enhancements) if ("kp" in plan.matchers or plan.fusion) else []
    cells = []
    for matcher, enhs in (("lg", lg_enhs), ("kp", kp_enhs)):
        for s in plan.scenarios:
            for e in enhs:
                for r in plan.reconstructions:
                    for f in plan.factors:
                        probe = _unit_name(f, e, r)
                        gallery = _unit_name(0, e, "hr") if s == 1 else probe
                        cells.append(Cell(matcher, s, f, e, r, gallery, probe))
    if plan.fusion:
        lg_e = plan.fusion_lg_enhancement
        for s in plan.scenarios:
            for e in plan.enhancements:
                for r in plan.reconstructions:
                    for f in plan.factors:
                        lg_id = Cell("lg", s, f, lg_e, r).cell_id
                        kp_id = Cell("kp", s, f, e, r).cell_id
                        cells.append(Cell("fusion", s, f, f"{lg_e}+{e}", r, inputs=(lg_id, kp_id)))
    return cells


def _score_pairs(matcher, trials, gallery: UnitFeatures, probe: UnitFeatures):
    scores = []
    for t in trials:
        if matcher == "lg":
            hd = hamming(gallery.lg[t.img_a], probe.lg[t.img_b])
            scores.append(UNDEFINED_HAMMING if hd is None else hd)
        else:
            scores.append(match_score(gallery.kp[t.img_a], probe.kp[t.img_b]))
    return scores


def _score_rows(cell: Cell, trials, scores):
    return [[t.pair_id, t.user_a, t.img_a, t.user_b, t.img_b, t.label, cell.matcher, cell.factor, cell.scenario,
             cell.enhancement, cell.reconstruction, _num(s)] for t, s in zip(trials, scores)]


def _scoreset(trials, scores, matcher) -> ScoreSet:
    g = [s for t, s in zip(trials, scores) if t.label == "G"]
    i = [s for t, s in zip(trials, scores) if t.label == "I"]
    return ScoreSet(g, i, POLARITY[matcher], matcher)


def _read_scores(path: Path):
    with open(path, newline="") as fh:
        return [float(r["score"]) for r in csv.DictReader(fh)]


class _Runner:
    def __init__(self, plan: ExperimentPlan, jobs: int):
        self.plan = plan
        self.jobs = max(1, int(jobs))
        self.ws = Workspace(plan.workdir)
        self.parts, self.anns = _partitions(self.ws)
        self.cfg = plan.hallucination_config()
        self.use_dev = plan.fusion and plan.fusion_training == "dev"
        test_anns = [self.anns[i] for i in self.parts["test"]]
        self.trials = {"test": build_protocol(test_anns)}
        if self.use_dev:
            self.trials["dev"] = build_protocol([self.anns[i] for i in self.parts["train"]])
        self.manifest_hash = _sha256_file(self.ws.manifest)
        self.ann_hash = _sha256_file(self.ws.aligned_annotations)
        self.dicts = {}
        if "eigenpatch" in plan.reconstructions and len(self.parts["train"]) >= 2:
            imgs = _training_images(self.ws, self.parts["train"])
            self.dicts = _expected_dictionaries(plan, self.ws, imgs)
        self.cells = _plan_cells(plan)
        self.units = {}
        self.unit_errors = {}
        self.params = (LgParams(), KpMatchParams(), DetectorParams())

    def partitions(self):
        return ("test", "dev") if self.use_dev else ("test",)

    def unit_job(self, name) -> UnitJob:
        cells = [c for c in self.cells if name in (c.gallery, c.probe)]
        c0 = cells[0]
        recon = "hr" if name.startswith("hr-") else c0.reconstruction
        factor = 0 if recon == "hr" else c0.factor
        dict_path, dict_hash = None, ""
        if recon == "eigenpatch":
            entry = self.dicts.get((factor, c0.enhancement))
            if entry is None or not entry[0].is_file():
                raise MissingFileError(f"dictionary for factor {factor} / {c0.enhancement} not found; run train first")
            dict_path, dict_hash = str(entry[0]), entry[1].hex()
        ids = tuple(i for p in self.partitions() for i in self.parts[_SOURCE[p]])
        lg = any(c.matcher == "lg" for c in cells)
        kp = any(c.matcher == "kp" for c in cells)
        key = _hash(FORMAT_VERSION, name, ids, self.manifest_hash, self.ann_hash, dict_hash, self.cfg, self.params,
                    lg, kp)
        return UnitJob(key, name, factor, c0.enhancement, recon, ids, str(self.ws.aligned),
                       {i: self.anns[i] for i in ids}, dict_path, self.cfg, lg, kp)

    def dictionary_hash(self, cell: Cell) -> str:
        if cell.reconstruction != "eigenpatch":
            return ""
        entry = self.dicts.get((cell.factor, cell.enhancement))
        return entry[1].hex() if entry else ""

    # paths
    def scores_path(self, cell, part="test"):
        return self.ws.scores / (f"{cell.cell_id}.csv" if part == "test" else f"dev/{cell.cell_id}.csv")

    def marker_path(self, cell):
        return self.ws.cells / f"{cell.cell_id}.json"

    def load_marker(self, cell):
        p = self.marker_path(cell)
        if not p.is_file():
            return None
        try:
            m = json.loads(p.read_text())
        except ValueError:
            return None
        if m.get("key") != cell.key or m.get("row", {}).get("status") != "ok":
            return None
        for part, digest in m.get("scores", {}).items():
            sp = self.scores_path(cell, part)
            if not sp.is_file() or _sha256_file(sp) != digest:
                return None
        return m

    def finish_cell(self, cell, sets: dict, rows: dict):
        """Write scores, DET points and the marker; returns the results row."""
        digests = {}
        for part, r in rows.items():
            path = self.scores_path(cell, part)
            _write_text_atomic(path, _csv_text(SCORE_FIELDS, r))
            digests[part] = _sha256_file(path)
        s = sets["test"]
        rate, thr = eer(s)
        det = det_curve(s, self.plan.det_points)
        _write_text_atomic(self.ws.det / f"{cell.cell_id}.csv",
                           _csv_text(("far", "frr"), [[_num(a), _num(b)] for a, b in det]))
        row = self.result_row(cell, "ok", _num(rate), _num(thr), s.genuine.size, s.impostor.size,
                              digests["test"], "")
        _write_text_atomic(self.marker_path(cell), json.dumps({"key": cell.key, "row": row, "scores": digests},
                                                              indent=1, sort_keys=True) + "\n")
        return row

    def result_row(self, cell, status, rate, thr, ng, ni, digest, message):
        if cell.matcher == "fusion":
            lg_c = next(c for c in self.cells if c.cell_id == cell.inputs[0])
            kp_c = next(c for c in self.cells if c.cell_id == cell.inputs[1])
            dh = "+".join(h for h in (self.dictionary_hash(lg_c), self.dictionary_hash(kp_c)) if h)
        else:
            dh = self.dictionary_hash(cell)
        return {"cell_id": cell.cell_id, "matcher": cell.matcher, "scenario": cell.scenario, "factor": cell.factor,
                "enhancement": cell.enhancement, "reconstruction": cell.reconstruction, "status": status,
                "eer": rate, "threshold": thr, "n_genuine": ng, "n_impostor": ni,
                "scores_file": f"scores/{cell.cell_id}.csv" if status == "ok" else "",
                "scores_sha256": digest, "dictionary_sha256": dh, "message": message}

    def failed_row(self, cell, message):
        log.error("cell %s failed: %s", cell.cell_id, message)
        return self.result_row(cell, "failed", "", "", 0, 0, "", message)

    def run(self) -> RunSummary:
        plan = self.plan
        summary = RunSummary()
        unit_names = []
        for c in self.cells:
            for n in (c.gallery, c.probe):
                if n and n not in unit_names:
                    unit_names.append(n)
        jobs = {}
        for n in unit_names:
            try:
                jobs[n] = self.unit_job(n)
            except EigenIrisError as exc:
                self.unit_errors[n] = str(exc)
        trial_key = _hash([tuple(t) for p in self.partitions() for t in self.trials[p]])
        for c in self.cells:
            if c.matcher != "fusion":
                if c.gallery in self.unit_errors or c.probe in self.unit_errors:
                    continue
                c.key = _hash(FORMAT_VERSION, c.cell_id, jobs[c.gallery].key, jobs[c.probe].key, trial_key)
        by_id = {c.cell_id: c for c in self.cells}
        for c in self.cells:
            if c.matcher == "fusion":
                keys = [by_id[i].key for i in c.inputs]
                if all(keys):
                    c.key = _hash(FORMAT_VERSION, c.cell_id, keys, plan.fusion_training, plan.fusion_folds, plan.seed)
        done = {c.cell_id: self.load_marker(c) for c in self.cells if c.key}
        pending_cells = [c for c in self.cells if c.matcher != "fusion" and c.key and done.get(c.cell_id) is None]
        needed = []
        for c in pending_cells:
            for n in (c.gallery, c.probe):
                if n not in needed:
                    needed.append(n)
        hr_units = [n for n in needed if n.startswith("hr-")]
        rec_units = [n for n in needed if not n.startswith("hr-")]
        rows = {}
        for c in self.cells:
            if done.get(c.cell_id) is not None:
                rows[c.cell_id] = done[c.cell_id]["row"]
                summary.skipped += 1
        for _ in self._compute(hr_units):
            pass
        for name in self._compute(rec_units):
            for c in pending_cells:
                if c.probe == name:
                    rows[c.cell_id] = self._score_cell(c)
            self.units.pop(name, None)
        for c in self.cells:
            if c.matcher != "fusion" and c.cell_id not in rows:
                bad = self.unit_errors.get(c.gallery) or self.unit_errors.get(c.probe) or "inputs unavailable"
                rows[c.cell_id] = self.failed_row(c, bad)
        for c in self.cells:
            if c.matcher == "fusion" and c.cell_id not in rows:
                rows[c.cell_id] = self._fuse_cell(c, rows)
        summary.rows = [rows[c.cell_id] for c in self.cells]
        summary.cells = len(summary.rows)
        summary.failed = sum(r["status"] != "ok" for r in summary.rows)
        _write_text_atomic(self.ws.results, _csv_text(RESULT_FIELDS, [[r[k] for k in RESULT_FIELDS]
                                                                       for r in summary.rows]))
        write_plots(self.ws, summary.rows)
        return summary

    def _compute(self, names):
        """Compute units into ``self.units``; yields each name as it becomes available."""
        todo = []
        for n in names:
            try:
                todo.append(self.unit_job(n))
            except EigenIrisError as exc:
                self.unit_errors[n] = str(exc)
        if self.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as ex:
                futures = [(job, ex.submit(compute_unit, job)) for job in todo]
                for job, fut in futures:
                    self._store(job, fut.result)
                    yield job.name
        else:
            for job in todo:
                self._store(job, lambda job=job: compute_unit(job))
                yield job.name

    def _store(self, job, get):
        log.info("run: unit %s (%d images)", job.name, len(job.ids))
        try:
            feats = get()
        except Exception as exc:  # isolate the failure to the cells of this unit
            log.exception("unit %s failed", job.name)
            self.unit_errors[job.name] = f"{type(exc).__name__}: {exc}"
            return
        self.units[job.name] = feats
        if feats.quality:
            _write_text_atomic(self.ws.quality / f"{job.name}.csv",
                               _csv_text(("image_id", "psnr", "iterations", "converged"), feats.quality))

    def _score_cell(self, c: Cell):
        if c.gallery in self.unit_errors or c.probe in self.unit_errors:
            return self.failed_row(c, self.unit_errors.get(c.gallery) or self.unit_errors[c.probe])
        try:
            g, p = self.units[c.gallery], self.units[c.probe]
            sets, rows = {}, {}
            for part in self.partitions():
                trials = self.trials[part]
                scores = _score_pairs(c.matcher, trials, g, p)
                sets[part] = _scoreset(trials, scores, c.matcher)
                rows[part] = _score_rows(c, trials, scores)
            return self.finish_cell(c, sets, rows)
        except Exception as exc:
            log.exception("cell %s failed", c.cell_id)
            return self.failed_row(c, f"{type(exc).__name__}: {exc}")

    def _fuse_cell(self, c: Cell, rows):
        bad = [i for i in c.inputs if rows.get(i, {}).get("status") != "ok"]
        if bad:
            return self.failed_row(c, f"input cells failed: {', '.join(bad)}")
        try:
            by_id = {x.cell_id: x for x in self.cells}
            inputs = [by_id[i] for i in c.inputs]
            labels = dict(matcher="fusion", factor=c.factor, scenario=c.scenario, enhancement=c.enhancement,
                          reconstruction=c.reconstruction)
            trials = self.trials["test"]

            def sets(part):
                return [_scoreset(self.trials[part], _read_scores(self.scores_path(x, part)), x.matcher)
                        for x in inputs]

            test_sets = sets("test")
            if self.plan.fusion_training == "dev":
                model = train_fusion(sets("dev"))
                fused = fuse_sets(model, test_sets, **labels)
            else:
                fused = kfold_fusion(test_sets, self.plan.fusion_folds, seed=self.plan.seed, **labels)
            gi, ii = iter(fused.genuine), iter(fused.impostor)
            scores = [next(gi) if t.label == "G" else next(ii) for t in trials]
            return self.finish_cell(c, {"test": fused}, {"test": _score_rows(c, trials, scores)})
        except Exception as exc:
            log.exception("cell %s failed", c.cell_id)
            return self.failed_row(c, f"{type(exc).__name__}: {exc}")


def run(plan: ExperimentPlan, jobs: int = 1) -> RunSummary:
    """Evaluate every cell of the plan; completed cells with unchanged inputs are skipped."""
    return _Runner(plan, jobs).run()


# --- report ------------------------------------------------------------------

def read_results(ws: Workspace) -> list[dict]:
    if not ws.results.is_file():
        raise ConfigError(f"{ws.results}: no results; run the sweep first")
    with open(ws.results, newline="") as fh:
        return list(csv.DictReader(fh))


def write_plots(ws: Workspace, rows, comment: str | None = None) -> list[Path]:
    ok = [r for r in rows if r["status"] == "ok"]
    written = []
    groups = {}
    for r in ok:
        groups.setdefault((int(r["scenario"]), r["matcher"]), {}).setdefault(
            f"{r['enhancement']}/{r['reconstruction']}", []).append((int(r["factor"]), float(r["eer"])))
    for (s, m), series in sorted(groups.items()):
        path = ws.plots / f"eer_{m}_s{s}.svg"
        svg.write_svg(svg.eer_vs_factor(series, f"{m.upper()} scenario {s}", comment), path)
        written.append(path)
    dets = {}
    for r in ok:
        det_path = ws.det / f"{r['cell_id']}.csv"
        if not det_path.is_file():
            continue
        with open(det_path, newline="") as fh:
            pts = [(float(d["far"]), float(d["frr"])) for d in csv.DictReader(fh)]
        key = (int(r["scenario"]), r["matcher"], r["enhancement"], r["reconstruction"])
        dets.setdefault(key, {})[f"factor {int(r['factor'])}"] = pts
    for (s, m, e, rec), curves in sorted(dets.items()):
        path = ws.plots / f"det_{m}_s{s}_{e}_{rec}.svg"
        svg.write_svg(svg.det_plot(curves, f"{m.upper()} s{s} {e} {rec}", comment), path)
        written.append(path)
    return written


def report_text(rows) -> str:
    """EER (%) table: one line per (matcher, scenario, enhancement, reconstruction), factors as columns."""
    factors = sorted({int(r["factor"]) for r in rows})
    series = {}
    for r in rows:
        key = (r["matcher"], int(r["scenario"]), r["enhancement"], r["reconstruction"])
        series.setdefault(key, {})[int(r["factor"])] = (f"{100 * float(r['eer']):6.2f}" if r["status"] == "ok"
                                                        else "  fail")
    head = f"{'matcher':8s} {'s':>1s} {'enhancement':14s} {'recon':10s} " + " ".join(f"{f:>6d}" for f in factors)
    lines = [head, "-" * len(head)]
    for (m, s, e, rec), vals in sorted(series.items()):
        lines.append(f"{m:8s} {s:1d} {e:14s} {rec:10s} " + " ".join(vals.get(f, "     -") for f in factors))
    return "\n".join(lines) + "\n"
