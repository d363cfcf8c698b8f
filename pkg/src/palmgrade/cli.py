"""Command-line entry point: ``palmgrade <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite training values or a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import SplitManifest, load_merge_map, load_split, scan_and_split, synth_generate
from .errors import (ArchiveError, ConfigError, DataError, GraphError, NumericError, PalmError,
                     ShapeError)
from .gradcheck import gradient_check
from .metrics import confusion_csv, evaluate_scores, roc_csv, write_text
from .models import ARCHES, PRESETS, ArchitectureConfig, build
from .train import TrainConfig, evaluate, fit, one_hot
from .weights import load_weights, read_archive, save_weights

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

WEIGHTS_FILE = "weights.pfwt"
LOG_FILE = "train_log.csv"
SPLIT_FILE = "split.json"
RUN_CONFIG_FILE = "run_config.json"
EVAL_CONFIG_FILE = "eval_config.json"
REPORT_FILE = "report.json"
ROC_FILE = "roc.csv"
CONFUSION_FILE = "confusion.csv"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    arch: str = "baseline"
    preset: str = "mini"
    data_root: str | None = None
    split_path: str | None = None
    merge_map_path: str | None = None
    ratio: float = 0.8
    stratified: bool = True
    input_size: list | None = None
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    freeze_backbone: bool = False
    init_weights: str | None = None
    init_prefix: str | None = None
    weights: str | None = None
    skip_bad: bool = False
    out_dir: str = "out"

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ConfigError(f"--arch must be one of {ARCHES}, got {self.arch!r}")
        if self.preset not in PRESETS:
            raise ConfigError(f"--preset must be one of {PRESETS}, got {self.preset!r}")
        TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.seed)

    @classmethod
    def from_sources(cls, config_path, overrides: dict) -> "RunConfig":
        """Merge a JSON config file with explicitly given flags; flags win."""
        values = {}
        if config_path:
            try:
                with open(config_path) as fh:
                    values = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from None
            if not isinstance(values, dict):
                raise ConfigError(f"config {config_path} must be a JSON object")
            known = {f.name for f in fields(cls)}
            unknown = sorted(set(values) - known)
            if unknown:
                raise ConfigError(f"unknown config keys in {config_path}: {unknown}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.seed)

    def arch_config(self, num_classes: int) -> ArchitectureConfig:
        shape = None
        if self.input_size is not None:
            h, w = self.input_size
            shape = (h, w, 3)
        return ArchitectureConfig(self.preset, shape, num_classes, self.seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


class Outputs:
    """Tracks files written by a command so a failure can remove them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.created_dir = not self.dir.exists()
        self.files: list[Path] = []

    def path(self, name) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.files.append(p)
        return p

    def rollback(self):
        for p in self.files:
            p.unlink(missing_ok=True)
        if self.created_dir and self.dir.exists() and not any(self.dir.iterdir()):
            self.dir.rmdir()


def _size(value):
    parts = value.lower().replace("x", " ").split()
    if len(parts) == 1:
        parts = parts * 2
    try:
        h, w = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {value!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {value!r}")
    return [h, w]


def _add_run_flags(p, with_train=True):
    p.add_argument("--config", help="JSON RunConfig file; explicit flags override it")
    p.add_argument("--arch", choices=ARCHES)
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--data", dest="data_root", help="dataset root (one directory per class)")
    p.add_argument("--split", dest="split_path", help="split manifest JSON")
    p.add_argument("--merge-map", dest="merge_map_path", help="JSON source -> target class map")
    p.add_argument("--ratio", type=float, help="train fraction when no manifest is given")
    p.add_argument("--size", dest="input_size", type=_size, help="input size N or HxW")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", dest="batch_size", type=int)
    p.add_argument("--skip-bad", dest="skip_bad", action="store_const", const=True,
                   help="skip undecodable images instead of failing")
    p.add_argument("--out", dest="out_dir", help="output directory")
    if with_train:
        p.add_argument("--lr", dest="learning_rate", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_const",
                       const=True)
        p.add_argument("--init-weights", dest="init_weights",
                       help="archive to initialise from before training")
        p.add_argument("--init-prefix", dest="init_prefix",
                       help="only load archive tensors with this name prefix")
    else:
        p.add_argument("--weights", help="weight archive to evaluate")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="palmgrade", description="Train and evaluate ripeness classifiers.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="scan a dataset tree and write a split manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--merge-map")
    p.add_argument("--unstratified", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="write a synthetic color-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=_size, default=[32, 32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hue-offset", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.04)

    _add_run_flags(sub.add_parser("train", help="fit a model; writes weights and a log"))
    _add_run_flags(sub.add_parser("eval", help="score a model; writes metrics reports"),
                   with_train=False)

    p = sub.add_parser("gradcheck", help="finite-difference check of a small graph")
    p.add_argument("--arch", choices=ARCHES, default="baseline")
    p.add_argument("--preset", choices=PRESETS, default="mini")
    p.add_argument("--size", type=_size)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)

    p = sub.add_parser("inspect", help="list the tensors in a weight archive")
    p.add_argument("archive")
    return ap


def _run_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    return RunConfig.from_sources(args.config, overrides)


def _dataset(rc: RunConfig, outputs: Outputs | None):
    if not rc.data_root:
        raise ConfigError("--data is required")
    if rc.split_path:
        manifest = SplitManifest.load(rc.split_path)
    else:
        merge = load_merge_map(rc.merge_map_path) if rc.merge_map_path else None
        _, manifest = scan_and_split(rc.data_root, rc.ratio, rc.seed, merge, rc.stratified)
        if outputs is not None:
            manifest.save(outputs.path(SPLIT_FILE))
    return manifest


def _shape_for(rc, k):
    return rc.arch_config(k).input_shape[:2]


def cmd_split(args, out):
    merge = load_merge_map(args.merge_map) if args.merge_map else None
    _, manifest = scan_and_split(args.data, args.ratio, args.seed, merge, not args.unstratified)
    dest = Path(args.out)
    out.files.append(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    manifest.save(dest)
    total = manifest.counts["total"]
    print(f"{len(manifest.classes)} classes, {total['train']} train / {total['test']} test "
          f"-> {dest}")


def cmd_synth(args, out):
    names = synth_generate(args.out, args.classes, args.per_class, tuple(args.size), args.seed,
                           args.hue_offset, args.noise)
    print(f"wrote {len(names)} classes x {args.per_class} images to {args.out}")


def cmd_train(args, out):
    rc = _run_config(args)
    out.dir = Path(rc.out_dir)
    out.created_dir = not out.dir.exists()
    manifest = _dataset(rc, out)
    k = len(manifest.classes)
    size = _shape_for(rc, k)
    xtr, ytr, _ = load_split(rc.data_root, manifest, "train", size, rc.skip_bad)
    xte, yte, _ = load_split(rc.data_root, manifest, "test", size, rc.skip_bad)
    graph = build(rc.arch, rc.arch_config(k), rc.freeze_backbone)
    if rc.init_weights:
        n = load_weights(graph, rc.init_weights, rc.init_prefix)
        print(f"initialised {n} tensors from {rc.init_weights}", file=sys.stderr)
    write_text(out.path(RUN_CONFIG_FILE), rc.to_json())

    def progress(row):
        print(f"epoch {row.epoch:3d}  loss {row.train_loss:.4f}  acc {row.train_acc:.4f}  "
              f"eval_loss {row.eval_loss:.4f}  eval_acc {row.eval_acc:.4f}", file=sys.stderr)

    _, log = fit(graph, (xtr, one_hot(ytr, k)), (xte, one_hot(yte, k)), rc.train_config(),
                 progress)
    log.save(out.path(LOG_FILE))
    info = save_weights(graph, out.path(WEIGHTS_FILE))
    print(f"final eval accuracy {log.rows[-1].eval_acc:.4f}; weights -> {info.path}")


def cmd_eval(args, out):
    rc = _run_config(args)
    out.dir = Path(rc.out_dir)
    out.created_dir = not out.dir.exists()
    weights = rc.weights or str(Path(rc.out_dir) / WEIGHTS_FILE)
    manifest = _dataset(rc, None)
    k = len(manifest.classes)
    x, y, _ = load_split(rc.data_root, manifest, "test", _shape_for(rc, k), rc.skip_bad)
    graph = build(rc.arch, rc.arch_config(k))
    load_weights(graph, weights)
    res = evaluate(graph, (x, y), rc.batch_size)
    report = evaluate_scores(y, res.scores, manifest.classes)
    write_text(out.path(EVAL_CONFIG_FILE), rc.to_json())
    write_text(out.path(REPORT_FILE), report.to_json())
    write_text(out.path(ROC_FILE), roc_csv(report.roc))
    write_text(out.path(CONFUSION_FILE), confusion_csv(report.confusion))
    print(report.report.format())
    s = report.roc.summary
    print(f"AUC micro {s.micro:.4f}  macro {s.macro:.4f}")


def cmd_gradcheck(args, out):
    shape = None if args.size is None else (*args.size, 3)
    cfg = ArchitectureConfig(args.preset, shape, args.classes, args.seed)
    graph = build(args.arch, cfg)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.batch, *cfg.input_shape))
    y = one_hot(rng.integers(0, args.classes, args.batch), args.classes)
    report = gradient_check(graph, x, y, args.tolerance, seed=args.seed)
    print(report.format())
    if not report.passed:
        raise NumericError(f"gradient check failed: worst relative error {report.worst:.3e}")


def cmd_inspect(args, out):
    info, _ = read_archive(args.archive)
    print(info.format())


COMMANDS = {"split": cmd_split, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def _thread_limit():
    raw = os.environ.get("GRADER_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GRADER_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"GRADER_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    out = Outputs(".")
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            COMMANDS[args.command](args, out)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, GraphError) as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, ArchiveError) as exc:
        out.rollback()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        out.rollback()
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PalmError as exc:
        out.rollback()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
