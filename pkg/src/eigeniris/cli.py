"""Command line entry point: ``eigeniris prepare|train|run|report|dict inspect|synth``.

Exit status: 0 on success, 1 when some experiment cells failed, 2 for usage
or configuration errors, 3 for unreadable or malformed inputs.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

from . import experiment as ex
from .eigenpatch import load_dictionary, read_dictionary_header
from .errors import ConfigError, EigenIrisError, InvalidArgumentError

EXIT_OK, EXIT_FAILED_CELLS, EXIT_CONFIG, EXIT_INPUT = 0, 1, 2, 3


def _plan_args(p):
    p.add_argument("--plan", help="key = value plan file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a plan entry")
    p.add_argument("--workdir", help="work directory (overrides the plan)")
    p.add_argument("--dataset", help="dataset root (overrides the plan)")
    p.add_argument("--annotations", help="annotation CSV (overrides the plan)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eigeniris", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="rescale, align and partition the dataset")
    _plan_args(p)
    p = sub.add_parser("train", help="build eigen-patch dictionaries")
    _plan_args(p)
    p = sub.add_parser("run", help="evaluate all plan cells")
    _plan_args(p)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for reconstruction and features")
    p = sub.add_parser("report", help="print the EER table and redraw plots")
    _plan_args(p)
    p.add_argument("--timestamp", action="store_true", help="stamp the generation time into the SVG files")

    p = sub.add_parser("dict", help="dictionary utilities")
    dsub = p.add_subparsers(dest="dict_command", required=True)
    q = dsub.add_parser("inspect", help="print a dictionary header and rank summary")
    q.add_argument("path")
    q.add_argument("--header-only", action="store_true")

    p = sub.add_parser("synth", help="write a procedural eye corpus")
    p.add_argument("out")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--images", type=int, default=4, help="images per eye")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for k in ("workdir", "dataset", "annotations"):
        if getattr(args, k, None):
            out[k] = getattr(args, k)
    return out


def _plan(args):
    return ex.load_plan(args.plan, _overrides(args))


def cmd_prepare(args) -> int:
    s = ex.prepare(_plan(args))
    print(f"kept {s.kept} ({s.train} train / {s.test} test), rejected {s.rejected}")
    return EXIT_OK


def cmd_train(args) -> int:
    recs = ex.train(_plan(args))
    for r in recs:
        print(f"{'built' if r.built else 'kept '} {r.path}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    s = ex.run(_plan(args), jobs=args.jobs)
    print(f"{s.cells} cells, {s.failed} failed, {s.skipped} reused")
    return EXIT_FAILED_CELLS if s.failed else EXIT_OK


def cmd_report(args) -> int:
    plan = _plan(args)
    ws = ex.Workspace(plan.workdir)
    rows = ex.read_results(ws)
    sys.stdout.write(ex.report_text(rows))
    comment = time.strftime("generated %Y-%m-%d %H:%M:%S") if args.timestamp else None
    ex.write_plots(ws, rows, comment)
    return EXIT_FAILED_CELLS if any(r["status"] != "ok" for r in rows) else EXIT_OK


def cmd_dict(args) -> int:
    info = read_dictionary_header(args.path)
    for k in ("version", "factor", "lr_side", "hr_side", "lr_patch", "lr_overlap", "n_train", "n_positions",
              "n_components", "blur_sigma", "enhancement", "source_hash"):
        print(f"{k:13s} {info[k]}")
    if not args.header_only:
        d = load_dictionary(args.path)
        lam = d.eigvals
        share = lam[:, 0] / np.maximum(lam.sum(axis=1), 1e-300)
        print(f"{'rank':13s} min {d.ranks.min()} / median {int(np.median(d.ranks))} / max {d.ranks.max()}")
        print(f"{'degenerate':13s} {d.n_degenerate}")
        print(f"{'first share':13s} {float(np.mean(share)):.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import generate_corpus

    if args.subjects < 1 or args.images < 1:
        raise InvalidArgumentError("--subjects and --images must be >= 1")
    anns = generate_corpus(args.out, args.subjects, args.images, args.seed)
    print(f"wrote {len(anns)} images to {args.out}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "run": cmd_run, "report": cmd_report, "dict": cmd_dict,
            "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"eigeniris: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EigenIrisError, OSError) as exc:
        print(f"eigeniris: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
