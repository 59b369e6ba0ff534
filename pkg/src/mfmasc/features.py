"""WAV ingestion, log-mel features, normalization and crop policies."""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .config import FeatureConfig
from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

LOG_EPS = 1e-10
CACHE_MAGIC = b"MSP1"


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        if self.samples.size == 0:
            raise ContractError("audio clip is empty")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("audio clip has non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


def load_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file, downmix to mono and scale to [-1, 1]."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, struct.error, UnboundLocalError) as exc:
        # scipy surfaces some header defects as UnboundLocalError
        raise FormatError(f"{path}: {exc}") from None
    if data.size == 0:
        raise FormatError(f"{path}: no audio frames")
    kind = data.dtype
    if kind == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif kind == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif kind == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif kind.kind == "f":
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample type {kind}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(rate))


def write_wav16(path, samples: np.ndarray, sample_rate: int = 44100) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), sample_rate, pcm)


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def stft_power(clip: AudioClip, n_fft: int = 2048, win_samples: int = 1764, hop_samples: int = 882) -> np.ndarray:
    """Power spectrogram, shape (T, n_fft // 2 + 1).

    Frames are Hann-windowed, not centered, and zero-padded to ``n_fft``.
    """
    x = clip.samples
    if x.shape[0] < win_samples:
        raise ContractError(f"clip has {x.shape[0]} samples, fewer than one {win_samples}-sample window")
    if win_samples > n_fft:
        raise ContractError(f"window {win_samples} longer than n_fft {n_fft}")
    n_frames = frame_count(x.shape[0], win_samples, hop_samples)
    frames = np.lib.stride_tricks.sliding_window_view(x, win_samples)[::hop_samples][:n_frames]
    window = np.hanning(win_samples + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate: int = 44100, n_fft: int = 2048, n_mels: int = 128, fmin: float = 0.0, fmax=None):
    """Triangular filters on the Slaney mel scale, each of unit area in Hz."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)
    return weights


def mel_project(power: np.ndarray, n_mels: int = 128, fmin: float = 0.0, fmax: float | None = 22050.0,
                sample_rate: int = 44100) -> np.ndarray:
    if np.any(power < 0):
        raise ContractError("mel_project: power spectrum must be non-negative")
    n_fft = 2 * (power.shape[1] - 1)
    fb = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    return power @ fb.T


def log_compress(mel: np.ndarray) -> np.ndarray:
    return np.log(mel + LOG_EPS)


def logmel(clip: AudioClip, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Full extraction, (T, n_mels) float32."""
    cfg = cfg or FeatureConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise FormatError(f"sample rate {clip.sample_rate} Hz, expected {cfg.sample_rate} Hz (no resampling)")
    power = stft_power(clip, cfg.n_fft, cfg.win_samples, cfg.hop_samples)
    mel = mel_project(power, cfg.n_mels, cfg.fmin, cfg.fmax, cfg.sample_rate)
    return log_compress(mel).astype(np.float32)


# ---------------------------------------------------------------------------
# normalization


def fit_stats(specs) -> NormStats:
    """Per-bin mean/std pooled over every frame of the training specs."""
    specs = list(specs)
    total = None
    count = 0
    for s in specs:
        s = np.asarray(s, dtype=np.float64)
        total = s.sum(axis=0) if total is None else total + s.sum(axis=0)
        count += s.shape[0]
    if total is None:
        raise ContractError("fit_stats needs at least one spectrogram")
    mean = total / count
    sq = None
    for s in specs:
        d = np.asarray(s, dtype=np.float64) - mean
        sq = (d * d).sum(axis=0) if sq is None else sq + (d * d).sum(axis=0)
    std = np.sqrt(sq / count)
    low = std < 1e-6
    if np.any(low):
        log.warning("clamping std of %d constant bin(s) to 1e-6", int(low.sum()))
        std = np.where(low, 1e-6, std)
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def normalize(spec: np.ndarray, stats: NormStats) -> np.ndarray:
    std = np.maximum(stats.std, 1e-6)
    return ((spec - stats.mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# crops


def _pad_to(spec: np.ndarray, frames: int) -> np.ndarray:
    if spec.shape[0] >= frames:
        return spec
    return np.pad(spec, ((0, frames - spec.shape[0]), (0, 0)), mode="edge")


def random_crop(spec: np.ndarray, frames: int = 250, rng: np.random.Generator | None = None) -> np.ndarray:
    """Contiguous window with start uniform in [0, T - frames]; short specs are edge-padded."""
    if spec.shape[0] <= frames:
        return _pad_to(spec, frames)
    rng = rng or np.random.default_rng()
    start = int(rng.integers(0, spec.shape[0] - frames + 1))
    return spec[start : start + frames]


def crop_starts(n_frames: int, frames: int = 250) -> tuple[int, int, int]:
    if n_frames < frames:
        return (0, 0, 0)
    span = n_frames - frames
    return (0, span // 2, span)


def fixed_crops(spec: np.ndarray, frames: int = 250) -> list[np.ndarray]:
    """Start, middle and end windows used at inference time."""
    if spec.shape[0] < frames:
        padded = _pad_to(spec, frames)
        return [padded, padded, padded]
    return [spec[s : s + frames] for s in crop_starts(spec.shape[0], frames)]


# ---------------------------------------------------------------------------
# feature cache


def write_cache(path, spec: np.ndarray) -> None:
    spec = np.ascontiguousarray(spec, dtype="<f4")
    t, f = spec.shape
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<II", t, f) + spec.tobytes())


def read_cache(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte offset 0")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header at byte offset {len(buf)}")
    t, f = struct.unpack("<II", buf[4:12])
    need = 12 + 4 * t * f
    if len(buf) != need:
        raise FormatError(f"{path}: expected {need} bytes, file ends at byte offset {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(t, f).astype(np.float32)
