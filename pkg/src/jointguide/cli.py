"""Command-line entry point.

Exit status: 0 on success, 2 on usage errors, 1 on runtime failures. Runtime
failures print one line ``error: <category>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets
from .checkpoint import load_checkpoint
from .config import LADDER, PROFILES, apply_overrides, load_config
from .errors import JointGuideError
from .language import TranscriptCache
from .questioner import ConfusionMatrix, similar_set
from .trainer import evaluate, load_data, make_client, run_description_chain, run_training

log = logging.getLogger("jointguide")


def _common(p: argparse.ArgumentParser):
    p.add_argument("-c", "--config", help="INI config file")
    p.add_argument("-p", "--profile", default="desk", choices=sorted(PROFILES))
    p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.alpha=0 (repeatable)")
    p.add_argument("-o", "--out", help="run directory (overrides run.out_dir)")
    p.add_argument("--seed", type=int, help="shorthand for train.seed and data.seed")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/test dataset files")
    _common(p)

    p = sub.add_parser("describe", help="run the description chain for every class")
    _common(p)

    p = sub.add_parser("train", help="run the full training loop")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("inspect-confusion", help="print Top-k similar classes from a checkpoint")
    p.add_argument("checkpoint", help="checkpoint (.jgck) or JSON matrix file")
    p.add_argument("-k", type=int, default=10)
    p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("sweep", help="run a grid of (alpha, beta) or ladder configurations")
    _common(p)
    p.add_argument("--ladder", nargs="*", choices=LADDER, help="ladder configurations to run")
    p.add_argument("--alphas", type=float, nargs="*", default=[])
    p.add_argument("--betas", type=float, nargs="*", default=[])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    return parser


def _resolve(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    if args.out:
        overrides.append(f"run.out_dir={args.out}")
    return load_config(args.config, args.profile, overrides)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def cmd_gen_data(args):
    cfg = _resolve(args)
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    train, test = datasets.generate(cfg.synthetic_spec())
    datasets.save(train, out / "train.jgds")
    datasets.save(test, out / "test.jgds")
    _emit({"train": str(out / "train.jgds"), "test": str(out / "test.jgds"),
           "train_count": len(train), "test_count": len(test)})


def cmd_describe(args):
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    client = make_client(cfg)
    names = cfg.synthetic_spec().class_names if not cfg.data.dir else load_data(cfg)[0].class_names
    store = run_description_chain(client, names, TranscriptCache(out / cfg.guidance.cache))
    store.save(out / "descriptions.json")
    _emit({"descriptions": str(out / "descriptions.json"), "classes": len(names)})


def cmd_train(args):
    cfg = _resolve(args)
    result = run_training(cfg)
    _emit({"run_dir": str(result.out_dir), **result.final.to_dict()})


def cmd_eval(args):
    cfg = _resolve(args)
    ckpt = load_checkpoint(args.checkpoint)
    _, test = load_data(cfg)
    report = evaluate(ckpt.model, test, cfg.data.frames_out)
    _emit({"checkpoint": str(args.checkpoint), "epoch": ckpt.meta["epoch"], **report.to_dict()})


def _load_matrix(path) -> tuple[ConfusionMatrix, list[str]]:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        counts = np.array(doc["counts"], dtype=np.int64)
        names = doc.get("class_names") or [str(i) for i in range(len(counts))]
        return ConfusionMatrix(len(counts), doc.get("epoch", 0), counts), names
    ckpt = load_checkpoint(path)
    if ckpt.confusion is None:
        raise JointGuideError(f"{path} holds no confusion matrix")
    names = ckpt.meta.get("class_names") or [str(i) for i in range(ckpt.confusion.num_classes)]
    return ckpt.confusion, names


def cmd_inspect_confusion(args):
    cm, names = _load_matrix(args.checkpoint)
    print(f"# confusion matrix epoch {cm.epoch}, k={args.k}")
    for m in range(cm.num_classes):
        members = similar_set(cm, m, args.k).members
        listed = ", ".join(f"{n} ({names[n]}: {cm.counts[m, n]})" for n in members) or "-"
        print(f"{m}\t{names[m]}\t{listed}")


def cmd_sweep(args):
    base = _resolve(args)
    grid = []
    for name in args.ladder or []:
        grid.append((name, PROFILES[name]))
    for a, b in itertools.product(args.alphas, args.betas):
        grid.append((f"a{a:g}_b{b:g}", {"train.alpha": str(a), "train.beta": str(b)}))
    if not grid:
        raise JointGuideError("sweep needs --ladder names or --alphas/--betas grids")
    root = Path(base.out_dir)
    summary = []
    for (name, overrides), seed in itertools.product(grid, args.seeds):
        cfg = apply_overrides(base, {**overrides, "train.seed": str(seed), "data.seed": str(seed)})
        cfg = replace(cfg, out_dir=str(root / f"{name}_seed{seed}"))
        result = run_training(cfg)
        row = {"config": name, "seed": seed, "top1": result.final.top1,
               "mean_pair_accuracy": result.final.mean_pair_accuracy,
               "pair_accuracy": result.final.pair_accuracy}
        summary.append(row)
        print(json.dumps(row, sort_keys=True), flush=True)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for row in summary:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "describe": cmd_describe,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-confusion": cmd_inspect_confusion,
    "sweep": cmd_sweep,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except JointGuideError as exc:
        print(f"error: {exc.category}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
