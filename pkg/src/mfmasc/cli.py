"""Command-line entry point: ``mfmasc {ingest,features,train,evaluate,predict,synth}``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataset as ds
from . import lcnn
from .config import DCASE2020_LABELS, FeatureConfig, RunConfig
from .errors import ConfigError, ContractError, FormatError, ShapeError, TrainingError
from .features import NormStats, fit_stats, load_wav, logmel, normalize
from .synth import make_corpus
from .train import LabeledExample, evaluate, format_report, predict, train

log = logging.getLogger("mfmasc")


class CommandError(Exception):
    """Failure detected by a command itself (bad input, empty split, ...)."""


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _feature_config(args) -> FeatureConfig:
    return RunConfig.load(args.config).features if args.config else FeatureConfig()


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    labels = tuple(args.labels.split(",")) if args.labels else DCASE2020_LABELS
    problems, entries = [], []
    sources = [(m, args.split) for m in args.meta] + [(m, "test") for m in args.test_meta or []]
    for meta, split in sources:
        try:
            entries += ds.ingest(meta, args.audio_root, labels, default_split=split)
        except ds.IngestError as exc:
            problems += [f"{meta}: {p}" for p in exc.problems]
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        raise CommandError(f"{len(problems)} invalid metadata row(s)")
    ds.write_index(args.out, entries)
    counts = ds.class_counts(entries)
    for (split, label), n in sorted(counts.items()):
        print(f"{split}\t{label}\t{n}")
    print(f"wrote {len(entries)} entries to {args.out}")
    return 0


def _cache_dir(args, cfg_dir: str, index_path) -> Path:
    explicit = getattr(args, "cache_dir", None) or cfg_dir
    return ds.resolve_cache_dir(explicit, Path(index_path).parent / "cache")


def cmd_features(args) -> int:
    cfg = _load_config(args)
    entries = ds.read_index(args.index)
    cache = _cache_dir(args, cfg.paths.cache_dir, args.index)
    _, computed, failures = ds.extract_all([e.path for e in entries], cache, cfg.features, args.threads or 1)
    print(f"{len(entries)} clip(s), {computed} computed, {len(entries) - computed - len(failures)} cached")
    if failures:
        for path, msg in failures:
            print(f"{path}\t{msg}", file=sys.stderr)
        raise CommandError(f"{len(failures)} clip(s) failed to decode")
    return 0


def _load_examples(entries, labels, cache, feat, threads) -> list[LabeledExample]:
    specs, _, failures = ds.extract_all([e.path for e in entries], cache, feat, threads)
    if failures:
        raise CommandError(f"{len(failures)} clip(s) failed, first {failures[0][0]}: {failures[0][1]}")
    lookup = {name: i for i, name in enumerate(labels)}
    out = []
    for e, spec in zip(entries, specs):
        if e.label not in lookup:
            raise CommandError(f"label {e.label!r} of {e.path} not in the model's label set")
        out.append(LabeledExample(spec, lookup[e.label], {"path": e.path}))
    return out


def _apply_stats(examples, stats: NormStats) -> None:
    for ex in examples:
        ex.features = normalize(ex.features, stats)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    if not cfg.paths.index:
        raise ConfigError("paths.index is not set")
    entries = ds.read_index(cfg.paths.index)
    cache = _cache_dir(args, cfg.paths.cache_dir, cfg.paths.index)
    labels = cfg.model.labels
    train_set = _load_examples([e for e in entries if e.split == "train"], labels, cache, cfg.features, args.threads or 1)
    val_set = _load_examples([e for e in entries if e.split == "test"], labels, cache, cfg.features, args.threads or 1)
    if not train_set:
        raise CommandError("index has no training entries")
    stats = fit_stats([ex.features for ex in train_set])
    _apply_stats(train_set, stats)
    _apply_stats(val_set, stats)

    model = lcnn.build(cfg.model, seed=cfg.train.seed)
    model.norm_mean, model.norm_std = stats.mean, stats.std
    model_path = Path(cfg.paths.model)
    best_path = model_path.with_name(model_path.name + ".best")
    best = -math.inf

    with open(cfg.paths.log, "a", encoding="utf-8") as log_fh:

        def on_epoch(entry, m, cycle_end):
            nonlocal best
            log_fh.write(entry.line() + "\n")
            log_fh.flush()
            print(entry.line())
            if cycle_end:
                lcnn.save(m, model_path)
            if not math.isnan(entry.val_acc) and entry.val_acc > best:
                best = entry.val_acc
                lcnn.save(m, best_path)

        train(model, train_set, cfg.train, cfg.augment, val_set or None, on_epoch)
    lcnn.save(model, model_path)
    print(f"saved {model_path}")
    return 0


def _load_model(path) -> lcnn.LCNNModel:
    model = lcnn.load(path)
    if model.norm_mean is None:
        raise FormatError(f"{path}: model file carries no normalization statistics")
    return model


def _check_compatible(model, feat: FeatureConfig) -> None:
    if feat.n_mels != model.cfg.input_bins:
        raise ShapeError(f"features have {feat.n_mels} mel bins, model expects {model.cfg.input_bins}")


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    feat = _feature_config(args)
    _check_compatible(model, feat)
    entries = [e for e in ds.read_index(args.index) if e.split == args.split]
    if not entries:
        raise CommandError(f"index has no {args.split!r} entries")
    cache = _cache_dir(args, "", args.index)
    examples = _load_examples(entries, model.cfg.labels, cache, feat, args.threads or 1)
    _apply_stats(examples, NormStats(model.norm_mean, model.norm_std))
    metrics = evaluate(model, examples)
    sys.stdout.write(format_report(metrics, model.cfg.labels, args.k))
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    feat = _feature_config(args)
    _check_compatible(model, feat)
    spec = normalize(logmel(load_wav(args.wav), feat), NormStats(model.norm_mean, model.norm_std))
    probs = predict(model, spec)
    label = model.cfg.labels[int(np.argmax(probs))]
    print(f"{label}\t" + ",".join(f"{p:.9f}" for p in probs))
    return 0


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    meta = make_corpus(args.out_dir, args.n_per_class, seed, args.test_per_class)
    n = (args.n_per_class + args.test_per_class) * len(DCASE2020_LABELS)
    print(f"wrote {n} clip(s) and {meta}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run configuration file (key = value)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="mfmasc", description="LCNN acoustic scene classification")
    parser.add_argument("--config", default=None, help="run configuration file (key = value)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None, help="BLAS and worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate metadata and write a dataset index")
    p.add_argument("meta", nargs="+", help="tab-separated metadata with filename and scene_label columns")
    p.add_argument("--audio-root", required=True)
    p.add_argument("--out", required=True, help="index file to write")
    p.add_argument("--split", default="train", choices=ds.SPLITS, help="split for rows without a split column")
    p.add_argument("--test-meta", action="append", help="metadata whose rows all belong to the test split")
    p.add_argument("--labels", help="comma-separated label set (default: DCASE2020 scenes)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("features", parents=[common], help="precompute log-mel feature cache files")
    p.add_argument("index")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common], help="train a model from a run configuration")
    p.add_argument("--cache-dir")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy, confusion matrix and confused pairs")
    p.add_argument("model")
    p.add_argument("index")
    p.add_argument("--split", default="test", choices=ds.SPLITS)
    p.add_argument("--k", type=int, default=5, help="number of confused pairs to list")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common], help="classify one WAV file")
    p.add_argument("model")
    p.add_argument("wav")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic 10-class corpus")
    p.add_argument("out_dir")
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--test-per-class", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


_FAILURES = (
    CommandError, ConfigError, ContractError, FormatError, TrainingError, ds.IngestError, OSError, KeyError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except _FAILURES as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
