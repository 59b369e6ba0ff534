"""Dataset index files and the per-clip feature cache."""

from __future__ import annotations

import csv
import hashlib
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import FeatureConfig, to_text
from .errors import FormatError
from .features import load_wav, logmel, read_cache, write_cache

SPLITS = ("train", "test")
INDEX_HEADER = ("path", "label", "split")


@dataclass(frozen=True)
class IndexEntry:
    path: str
    label: str
    split: str


class IngestError(ValueError):
    """Metadata rows that could not be ingested; ``problems`` lists them all."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} problem(s), first: {problems[0]}")


def _read_tsv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty metadata file")
        return list(reader)


def ingest(meta_path, audio_root, labels: Sequence[str], default_split: str = "train") -> list[IndexEntry]:
    """Validate a metadata TSV (``filename``, ``scene_label``, optional ``split``)."""
    rows = _read_tsv(meta_path)
    problems = []
    entries = []
    root = Path(audio_root)
    for lineno, row in enumerate(rows, 2):
        name = (row.get("filename") or "").strip()
        label = (row.get("scene_label") or "").strip()
        split = (row.get("split") or default_split).strip()
        if not name or not label:
            problems.append(f"line {lineno}: missing filename or scene_label")
            continue
        if label not in labels:
            problems.append(f"line {lineno}: unknown label {label!r}")
        if split not in SPLITS:
            problems.append(f"line {lineno}: unknown split {split!r}")
        path = root / name
        if not path.is_file():
            problems.append(f"line {lineno}: missing audio file {path}")
        entries.append(IndexEntry(str(path.resolve()), label, split))
    if problems:
        raise IngestError(problems)
    return entries


def write_index(path, entries: Sequence[IndexEntry]) -> None:
    lines = ["\t".join(INDEX_HEADER)] + [f"{e.path}\t{e.label}\t{e.split}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_index(path) -> list[IndexEntry]:
    rows = _read_tsv(path)
    if rows and set(INDEX_HEADER) - set(rows[0]):
        raise FormatError(f"{path}: index header must be {' '.join(INDEX_HEADER)}")
    return [IndexEntry(r["path"], r["label"], r["split"]) for r in rows]


def class_counts(entries: Sequence[IndexEntry]) -> Counter:
    return Counter((e.split, e.label) for e in entries)


def resolve_cache_dir(configured: str | os.PathLike | None, fallback) -> Path:
    env = os.environ.get("MFMASC_CACHE")
    if env:
        return Path(env)
    return Path(configured) if configured else Path(fallback)


def content_key(wav_path, feat: FeatureConfig) -> str:
    h = hashlib.sha256(to_text(feat).encode("utf-8"))
    with open(wav_path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:24]


def cache_path(cache_dir, wav_path, feat: FeatureConfig) -> Path:
    return Path(cache_dir) / f"{content_key(wav_path, feat)}.msp"


def extract_one(wav_path, cache_dir, feat: FeatureConfig) -> tuple[np.ndarray, bool]:
    """Features for one clip; returns (spec, computed) where computed=False means a cache hit."""
    target = cache_path(cache_dir, wav_path, feat)
    if target.is_file():
        return read_cache(target), False
    spec = logmel(load_wav(wav_path), feat)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(".tmp")
    write_cache(tmp, spec)
    tmp.replace(target)
    return spec, True


def extract_all(paths: Sequence[str], cache_dir, feat: FeatureConfig, threads: int = 1):
    """Features for every path, in input order.

    Returns (specs, n_computed, failures) where failures lists
    ``(path, message)`` and the matching spec slot is None.
    """

    def job(p):
        try:
            spec, computed = extract_one(p, cache_dir, feat)
            return spec, computed, None
        except (OSError, ValueError) as exc:
            return None, False, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, paths))
    else:
        results = [job(p) for p in paths]
    specs = [r[0] for r in results]
    failures = [(p, r[2]) for p, r in zip(paths, results) if r[2] is not None]
    return specs, sum(r[1] for r in results), failures
