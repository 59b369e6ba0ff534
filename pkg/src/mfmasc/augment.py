"""Mix-up and SpecAugment time/frequency masking."""

from __future__ import annotations

import logging

import numpy as np

from .config import AugmentConfig
from .errors import ContractError

log = logging.getLogger(__name__)


def mixup(
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
    perm: np.ndarray | None = None,
    per_example: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Blend each example with a shuffled partner: ``lam * a + (1 - lam) * b``.

    One ``lam ~ Beta(alpha, alpha)`` is shared by the batch unless
    ``per_example`` is set.  ``lam`` and ``perm`` may be forced for testing.
    """
    n = x.shape[0]
    if y.shape[0] != n:
        raise ContractError(f"mixup: {n} inputs but {y.shape[0]} labels")
    if n < 2:
        log.warning("mixup needs at least two examples; batch of %d passed through", n)
        return x, y
    if np.any(np.abs(y.sum(axis=1) - 1) > 1e-5):
        raise ContractError("mixup: label rows must sum to 1")
    if perm is None:
        perm = rng.permutation(n)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=n if per_example else None)
    lam_arr = np.asarray(lam, dtype=np.float64)
    lx = lam_arr.reshape((-1,) + (1,) * (x.ndim - 1)) if lam_arr.ndim else lam_arr
    ly = lam_arr.reshape(-1, 1) if lam_arr.ndim else lam_arr
    x_mix = (lx * x + (1 - lx) * x[perm]).astype(x.dtype)
    y_mix = (ly * y + (1 - ly) * y[perm]).astype(y.dtype)
    return x_mix, y_mix


def _masks(extent: int, count: int, max_width: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    max_width = min(max_width, extent)
    out = []
    for _ in range(count):
        w = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, extent - w + 1))
        out.append((start, w))
    return out


def draw_masks(n_frames: int, n_bins: int, cfg: AugmentConfig, rng: np.random.Generator):
    """Time and frequency bands, each as (start, width)."""
    if cfg.max_time_width > n_frames or cfg.max_freq_width > n_bins:
        raise ContractError(
            f"mask widths ({cfg.max_time_width}, {cfg.max_freq_width}) exceed extents ({n_frames}, {n_bins})"
        )
    time = _masks(n_frames, cfg.n_time_masks, cfg.max_time_width, rng)
    freq = _masks(n_bins, cfg.n_freq_masks, cfg.max_freq_width, rng)
    return time, freq


def apply_masks(spec: np.ndarray, time, freq) -> np.ndarray:
    out = spec.copy()
    for start, w in time:
        out[start : start + w, :] = 0
    for start, w in freq:
        out[:, start : start + w] = 0
    return out


def spec_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero random time-frame and frequency-bin bands.

    ``x`` is one (T, F) spectrogram or a batch whose last two axes are
    (T, F); every example draws its own masks.
    """
    if x.ndim == 2:
        return apply_masks(x, *draw_masks(x.shape[0], x.shape[1], cfg, rng))
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + x.shape[-2:])
    out = np.stack([apply_masks(s, *draw_masks(s.shape[0], s.shape[1], cfg, rng)) for s in flat])
    return out.reshape(lead + x.shape[-2:])


def augment_batch(x: np.ndarray, y: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """SpecAugment first, then mix-up, each only if enabled."""
    if cfg.use_specaug:
        x = spec_augment(x, cfg, rng)
    if cfg.use_mixup:
        x, y = mixup(x, y, cfg.mixup_alpha, rng, per_example=cfg.mixup_per_example)
    return x, y
