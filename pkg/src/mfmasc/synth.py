"""Synthetic ten-class scene corpus for desk-scale runs.

Each class is band-limited noise around its own centre frequency,
amplitude-modulated at its own rate, over a faint broadband floor.  Clips
jitter the centre, the rate, the modulation phase and the level.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DCASE2020_LABELS
from .features import write_wav16

SAMPLE_RATE = 44100
DURATION_S = 10.0


@dataclass(frozen=True)
class Recipe:
    center_hz: float
    am_rate_hz: float
    bandwidth_oct: float = 1 / 3


def class_recipes(n_classes: int = 10) -> list[Recipe]:
    centers = np.geomspace(250.0, 12000.0, n_classes)
    # rates interleaved so neighbouring bands do not also share a rhythm
    rates = np.array([0.5, 4.0, 1.0, 6.0, 1.5, 8.0, 2.0, 3.0, 5.0, 0.75])[:n_classes]
    return [Recipe(float(c), float(r)) for c, r in zip(centers, rates)]


def render_clip(recipe: Recipe, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                duration: float = DURATION_S) -> np.ndarray:
    n = int(round(sample_rate * duration))
    center = recipe.center_hz * rng.uniform(0.95, 1.05)
    rate = recipe.am_rate_hz * rng.uniform(0.9, 1.1)
    half_band = 2 ** (recipe.bandwidth_oct / 2)

    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    spec[(freqs < center / half_band) | (freqs > center * half_band)] = 0
    band = np.fft.irfft(spec, n)
    band /= np.sqrt(np.mean(band**2)) + 1e-12

    t = np.arange(n) / sample_rate
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    floor = rng.standard_normal(n) * 0.02
    x = band * envelope * 0.15 * rng.uniform(0.6, 1.0) + floor
    return np.clip(x, -1.0, 1.0 - 1.0 / 32768)


def make_corpus(out_dir, n_per_class: int, seed: int = 0, n_test_per_class: int = 0,
                labels=DCASE2020_LABELS) -> Path:
    """Write WAVs under ``out_dir/audio`` and ``out_dir/meta.tsv``; returns the TSV path."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    recipes = class_recipes(len(labels))
    rows = ["filename\tscene_label\tsplit"]
    for ci, (label, recipe) in enumerate(zip(labels, recipes)):
        for k in range(n_per_class + n_test_per_class):
            rng = np.random.default_rng([seed, ci, k])
            split = "train" if k < n_per_class else "test"
            name = f"audio/{label}-synth-{seed}-{k:04d}-a.wav"
            write_wav16(out / name, render_clip(recipe, rng), SAMPLE_RATE)
            rows.append(f"{name}\t{label}\t{split}")
    meta = out / "meta.tsv"
    meta.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return meta
