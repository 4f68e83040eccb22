"""Batch entry points: gen | train | eval | score | gradcheck | bench.

Every run resolves its JSON config against full defaults, writes its
artifacts into --out, and finishes with a manifest (resolved config, seed,
sha256 of every artifact) sufficient to reproduce the run byte-exactly.
Existing run artifacts are never overwritten unless --force is passed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import gradcheck as gradcheck_mod
from . import report
from .data import (FEATURE_MAGIC, LABEL_MAGIC, GeneratorConfig, generate_synthetic,
                   load_dataset, read_class_names, read_labels, save_dataset)
from .losses import LossWeights
from .metrics import evaluate_all, score_sequences
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainingDiverged, train

GRADCHECK_FAILED_EXIT = 2


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    return doc


def _build_dataclass(cls, overrides: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ValueError(f"unknown {what} config keys: {', '.join(unknown)}")
    return cls(**overrides)


def build_generator_config(overrides: dict) -> GeneratorConfig:
    overrides = dict(overrides)
    if "duration_range" in overrides:
        overrides["duration_range"] = tuple(overrides["duration_range"])
    return _build_dataclass(GeneratorConfig, overrides, "generator")


def build_train_config(overrides: dict) -> TrainConfig:
    overrides = dict(overrides)
    weights = overrides.pop("weights", None)
    cfg = _build_dataclass(TrainConfig, overrides, "train")
    if weights is not None:
        cfg.weights = _build_dataclass(LossWeights, weights, "loss weights")
    return cfg


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise ValueError(f"{out} already holds run artifacts; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed: int | None) -> None:
    artifacts = {
        p.relative_to(out).as_posix(): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    doc = {"command": command, "config": config, "seed": seed, "artifacts": artifacts}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    overrides = _load_config(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = build_generator_config(overrides)
    out = _prepare_out(args)
    recordings, split, _ = generate_synthetic(cfg)
    names = [f"action_{i:02d}" for i in range(cfg.num_classes)]
    save_dataset(out, recordings, split, names)
    _write_manifest(out, "gen", asdict(cfg), cfg.seed)
    print(f"gen: wrote {len(recordings)} recordings "
          f"({cfg.num_sequences} sequences x {len(recordings) // cfg.num_sequences} views) "
          f"to {out}")
    return 0


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    data_dir = doc.pop("data_dir", None)
    if data_dir is None:
        raise ValueError("train config needs a 'data_dir' key pointing at a gen output")
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = build_train_config(doc)
    out = _prepare_out(args)
    recordings, split = load_dataset(data_dir)
    state, log = train(cfg, recordings, split)
    save_checkpoint(out / "checkpoint.ckpt", state)
    report.write_train_log_csv(out / "train_log.csv", log, split.group_names())
    report.plot_train_curves(out / "training_curves.png", log,
                             title=f"training ({cfg.method})")
    _write_manifest(out, "train", {"data_dir": str(data_dir), **asdict(cfg)}, cfg.seed)
    final = log.final_report()
    for name, gm in final.groups.items():
        print(f"train[{cfg.method}] {name}: f1_50={gm.f1_50:.2f} edit={gm.edit:.2f} "
              f"acc={gm.acc:.2f} (n={gm.count})")
    return 0


def cmd_eval(args) -> int:
    doc = _load_config(args.config)
    data_dir = doc.pop("data_dir", None)
    ckpt = doc.pop("checkpoint", None)
    ignore = tuple(doc.pop("ignore_labels", ()))
    if doc:
        raise ValueError(f"unknown eval config keys: {', '.join(sorted(doc))}")
    if data_dir is None or ckpt is None:
        raise ValueError("eval config needs 'data_dir' and 'checkpoint' keys")
    out = _prepare_out(args)
    recordings, split = load_dataset(data_dir)
    state = load_checkpoint(ckpt)
    rep = evaluate_all(state, recordings, split, ignore)
    report.write_eval_csv(out / "eval_report.csv", rep)
    report.plot_eval_report(out / "eval_report.png", rep)
    config = {"data_dir": str(data_dir), "checkpoint": str(ckpt),
              "ignore_labels": list(ignore)}
    _write_manifest(out, "eval", config, None)
    for name, gm in rep.groups.items():
        print(f"eval {name}: f1@10/25/50={gm.f1_10:.2f}/{gm.f1_25:.2f}/{gm.f1_50:.2f} "
              f"edit={gm.edit:.2f} acc={gm.acc:.2f} (n={gm.count})")
    for warning in rep.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


def _read_label_file(path: Path, text_vocab: dict[str, int] | None) -> np.ndarray:
    """TASL binary or plain text with one class name per frame line."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == LABEL_MAGIC:
        return read_labels(path)
    if magic == FEATURE_MAGIC:
        raise ValueError(f"{path} is a feature file, expected labels")
    names = [line for line in path.read_text().splitlines() if line]
    if text_vocab is None:
        raise ValueError(f"{path} is a text label file but no vocabulary was built")
    return np.array([text_vocab[n] for n in names], dtype=np.int64)


def _text_label_names(path: Path) -> list[str]:
    with open(path, "rb") as fh:
        if fh.read(4) == LABEL_MAGIC:
            return []
    return [line for line in path.read_text().splitlines() if line]


def cmd_score(args) -> int:
    doc = _load_config(args.config)
    pairs = doc.pop("pairs", None)
    class_names_path = doc.pop("class_names", None)
    ignore = tuple(doc.pop("ignore_labels", ()))
    if doc:
        raise ValueError(f"unknown score config keys: {', '.join(sorted(doc))}")
    if not pairs:
        raise ValueError("score config needs a nonempty 'pairs' list of "
                         "{'pred': ..., 'gt': ..., 'group': ...} entries")
    out = _prepare_out(args)

    if class_names_path is not None:
        vocab = {n: i for i, n in enumerate(read_class_names(class_names_path))}
    else:
        seen: set[str] = set()
        for pair in pairs:
            for key in ("pred", "gt"):
                seen.update(_text_label_names(Path(pair[key])))
        vocab = {n: i for i, n in enumerate(sorted(seen))}

    triples = []
    for pair in pairs:
        group = pair.get("group", "all")
        pred = _read_label_file(Path(pair["pred"]), vocab)
        gt = _read_label_file(Path(pair["gt"]), vocab)
        triples.append((group, pred, gt))
    groups = score_sequences(triples, ignore)
    report.write_group_metrics_csv(out / "score_report.csv", groups)
    report.plot_group_metrics(out / "score_report.png", groups, "score")
    config = {"pairs": pairs, "class_names": class_names_path, "ignore_labels": list(ignore)}
    _write_manifest(out, "score", config, None)
    for name, gm in groups.items():
        print(f"score {name}: f1@10/25/50={gm.f1_10:.2f}/{gm.f1_25:.2f}/{gm.f1_50:.2f} "
              f"edit={gm.edit:.2f} acc={gm.acc:.2f} (n={gm.count})")
    return 0


def cmd_gradcheck(args) -> int:
    doc = _load_config(args.config)
    seed = doc.pop("seed", 0)
    trials = doc.pop("trials", 100)
    if doc:
        raise ValueError(f"unknown gradcheck config keys: {', '.join(sorted(doc))}")
    if args.seed is not None:
        seed = args.seed
    results = gradcheck_mod.run_all(seed=seed, primitive_trials=trials)
    width = max(len(r.name) for r in results)
    for r in results:
        flag = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_error:.3e}  "
              f"trials={r.trials}  {flag}")
    all_ok = all(r.passed for r in results)
    print(f"gradcheck: {'all checks within' if all_ok else 'FAILURES above'} "
          f"{gradcheck_mod.TOLERANCE:g}")
    if args.out is not None:
        out = _prepare_out(args)
        import csv as _csv

        with open(out / "gradcheck.csv", "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["check", "max_rel_err", "trials", "passed"])
            for r in results:
                writer.writerow([r.name, f"{r.max_error:.12e}", r.trials, int(r.passed)])
        _write_manifest(out, "gradcheck", {"seed": seed, "trials": trials}, seed)
    return 0 if all_ok else GRADCHECK_FAILED_EXIT


def cmd_bench(args) -> int:
    doc = _load_config(args.config)
    gen_overrides = doc.pop("generator", {})
    train_overrides = doc.pop("train", {})
    methods = doc.pop("methods", list(bench_mod.BENCH_METHODS))
    if doc:
        raise ValueError(f"unknown bench config keys: {', '.join(sorted(doc))}")
    bad = [m for m in methods if m not in bench_mod.BENCH_METHODS]
    if bad:
        raise ValueError(f"unknown bench methods: {bad}")
    if args.seed is not None:
        gen_overrides["seed"] = args.seed
        train_overrides["seed"] = args.seed

    gen_cfg = build_generator_config({**asdict(bench_mod.default_generator_config()),
                                      **gen_overrides})
    base = asdict(bench_mod.default_train_config())
    base.pop("weights")
    train_cfg = build_train_config({**base, **train_overrides})

    out = _prepare_out(args)
    workers = int(os.environ.get("VIEWSEG_THREADS", "1"))
    recordings, split = bench_mod.generate_benchmark(gen_cfg)
    grid = bench_mod.run_grid(recordings, split, train_cfg, methods, max_workers=workers)

    for method, (state, log) in grid.items():
        cell = out / "cells" / method
        cell.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cell / "checkpoint.ckpt", state)
        report.write_train_log_csv(cell / "train_log.csv", log, split.group_names())
    reports = bench_mod.grid_reports(grid)
    report.write_bench_csv(out / "bench.csv", reports)
    report.plot_bench_f1(out / "bench_f1_50.png", reports)
    config = {"generator": asdict(gen_cfg), "train": asdict(train_cfg), "methods": methods}
    _write_manifest(out, "bench", config, train_cfg.seed)
    for method, rep in reports.items():
        for name, gm in rep.groups.items():
            print(f"bench {method:>15} {name:>12}: f1_50={gm.f1_50:6.2f} "
                  f"edit={gm.edit:6.2f} acc={gm.acc:6.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewseg",
        description="cross-view temporal action segmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "gen": (cmd_gen, "generate a synthetic multi-view dataset", True),
        "train": (cmd_train, "train a model on a generated dataset", True),
        "eval": (cmd_eval, "evaluate a checkpoint per view group", True),
        "score": (cmd_score, "score prediction label files against ground truth", True),
        "gradcheck": (cmd_gradcheck, "run the finite-difference suites", False),
        "bench": (cmd_bench, "run the method-comparison grid", True),
    }
    for name, (func, help_text, out_required) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing run artifacts")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
