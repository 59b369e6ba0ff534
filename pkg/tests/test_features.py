import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfmasc import features as F
from mfmasc.config import FeatureConfig
from mfmasc.errors import ContractError, FormatError

SR = 44100


# -- wav ---------------------------------------------------------------------


def write_raw(path, pcm, rate=SR):
    from scipy.io import wavfile

    wavfile.write(path, rate, pcm)


def test_pcm16_scaling(tmp_path):
    write_raw(tmp_path / "a.wav", np.array([16384, -32768, 0, 32767], dtype=np.int16))
    clip = F.load_wav(tmp_path / "a.wav")
    assert clip.samples[0] == 0.5
    assert clip.samples[1] == -1.0
    assert clip.sample_rate == SR


def test_pcm32_and_float(tmp_path):
    write_raw(tmp_path / "i.wav", np.array([2**30, -(2**31)], dtype=np.int32))
    np.testing.assert_array_equal(F.load_wav(tmp_path / "i.wav").samples, [0.5, -1.0])
    write_raw(tmp_path / "f.wav", np.array([0.25, -0.75], dtype=np.float32))
    np.testing.assert_array_equal(F.load_wav(tmp_path / "f.wav").samples, [0.25, -0.75])


def test_stereo_downmix(tmp_path, rng):
    mono = (rng.uniform(-0.5, 0.5, 1000) * 32768).astype(np.int16)
    write_raw(tmp_path / "s.wav", np.stack([mono, mono], axis=1))
    np.testing.assert_array_equal(F.load_wav(tmp_path / "s.wav").samples, mono / 32768.0)


def test_wav_round_trip_within_one_lsb(tmp_path, rng):
    x = rng.uniform(-0.9, 0.9, 4410)
    F.write_wav16(tmp_path / "r.wav", x)
    back = F.load_wav(tmp_path / "r.wav").samples
    assert np.max(np.abs(back - x)) <= 1 / 32768


def test_malformed_wav(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00\x00\x00WAVEjunk")
    with pytest.raises(FormatError):
        F.load_wav(tmp_path / "bad.wav")
    (tmp_path / "txt.wav").write_bytes(b"hello world, not audio")
    with pytest.raises(FormatError):
        F.load_wav(tmp_path / "txt.wav")


def test_other_rate_rejected(rng):
    clip = F.AudioClip(rng.uniform(-1, 1, 22050), 22050)
    with pytest.raises(FormatError, match="resampling"):
        F.logmel(clip)


def test_empty_or_nonfinite_clip():
    with pytest.raises(ContractError):
        F.AudioClip(np.zeros(0), SR)
    with pytest.raises(ContractError):
        F.AudioClip(np.array([0.0, np.nan]), SR)


# -- stft --------------------------------------------------------------------


def test_ten_seconds_gives_499_frames():
    p = F.stft_power(F.AudioClip(np.zeros(441000), SR))
    assert p.shape == (499, 1025)
    assert F.frame_count(441000, 1764, 882) == 499


def test_zero_signal_zero_power():
    assert not np.any(F.stft_power(F.AudioClip(np.zeros(5000), SR)))


def test_short_clip_rejected():
    with pytest.raises(ContractError):
        F.stft_power(F.AudioClip(np.zeros(1763), SR))


def dft_power_oracle(x, start, win=1764, n_fft=2048):
    """Direct O(N^2) DFT of one periodic-Hann frame, zero padded."""
    n = np.arange(win)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / win)
    frame = x[start : start + win] * w
    k = np.arange(n_fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * n[None] / n_fft)
    return np.abs(basis @ frame) ** 2


def test_stft_matches_direct_dft(rng):
    x = rng.uniform(-1, 1, 4000)
    p = F.stft_power(F.AudioClip(x, SR))
    assert p.shape[0] == (4000 - 1764) // 882 + 1
    for t in range(p.shape[0]):
        np.testing.assert_allclose(p[t], dft_power_oracle(x, t * 882), rtol=1e-9, atol=1e-9)


def test_bin_exact_sine_concentrates(rng):
    k0 = 100
    n = np.arange(SR)
    x = 0.5 * np.sin(2 * np.pi * k0 * SR / 2048 * n / SR)
    p = F.stft_power(F.AudioClip(x, SR))
    for row in p[:5]:
        assert np.argmax(row) == k0
        far = np.abs(np.arange(row.size) - k0) >= 3
        assert row[far].max() < 0.01 * row[k0]


# -- mel ---------------------------------------------------------------------


def test_slaney_scale_points():
    np.testing.assert_allclose(F.hz_to_mel([0, 1000, 500]), [0, 15, 7.5])
    f = np.array([0.0, 440.0, 1000.0, 4000.0, 22050.0])
    np.testing.assert_allclose(F.mel_to_hz(F.hz_to_mel(f)), f, rtol=1e-12)


def test_filterbank_construction():
    fb = F.mel_filterbank()
    assert fb.shape == (128, 1025)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    for row in fb:
        nz = np.flatnonzero(row)
        assert nz[-1] - nz[0] + 1 == nz.size  # contiguous support


def test_filters_have_unit_area_in_hz():
    fb = F.mel_filterbank(n_fft=2 ** 16)
    df = SR / 2 ** 16
    areas = fb.sum(axis=1) * df
    np.testing.assert_allclose(areas[10:], 1.0, rtol=0.02)


def test_flat_spectrum_gives_smooth_vector():
    mel = F.mel_project(np.ones((1, 1025)))[0]
    assert np.all(mel > 0)
    # unit-area filters on a flat spectrum all read about 1/df; the narrow
    # low filters see only a few FFT bins, hence the looser band there
    np.testing.assert_allclose(mel, 2048 / SR, rtol=0.15)
    np.testing.assert_allclose(mel[40:], 2048 / SR, rtol=0.03)


def test_mel_energy_bounded_by_power(rng):
    for _ in range(10):
        p = F.stft_power(F.AudioClip(rng.uniform(-1, 1, 8000), SR))
        assert F.mel_project(p).sum() <= p.sum()


def test_negative_power_rejected():
    with pytest.raises(ContractError):
        F.mel_project(-np.ones((1, 1025)))


# -- log ---------------------------------------------------------------------


def test_log_compress():
    np.testing.assert_allclose(F.log_compress(np.array([0.0])), [np.log(1e-10)])
    assert abs(F.log_compress(np.array([0.0]))[0] + 23.03) < 0.01


@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=20))
@settings(max_examples=50, deadline=None)
def test_log_monotone_and_invertible(values):
    x = np.sort(np.array(values))
    out = F.log_compress(x)
    shifted = x + 1e-10
    assert np.all(np.diff(out)[np.diff(shifted) > 0] > 0)
    np.testing.assert_allclose(np.exp(out) - 1e-10, x, rtol=1e-6, atol=1e-15)


def test_logmel_deterministic(tmp_path, rng):
    F.write_wav16(tmp_path / "c.wav", rng.uniform(-0.5, 0.5, SR))
    a = F.logmel(F.load_wav(tmp_path / "c.wav"))
    b = F.logmel(F.load_wav(tmp_path / "c.wav"))
    assert a.shape == (49, 128) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(a))


# -- normalization -----------------------------------------------------------


def test_fit_set_standardizes(rng):
    specs = [rng.normal(3, 2, (50, 128)) for _ in range(4)]
    stats = F.fit_stats(specs)
    z = np.concatenate([F.normalize(s, stats) for s in specs])
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-5)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-4)
    held = F.normalize(rng.normal(3, 2, (50, 128)), stats)
    assert np.all(np.isfinite(held))


def test_constant_bin_clamped(rng, caplog):
    spec = rng.normal(size=(20, 128))
    spec[:, 5] = 7.0
    with caplog.at_level(logging.WARNING):
        stats = F.fit_stats([spec])
    assert stats.std[5] == np.float32(1e-6)
    assert "clamp" in caplog.text
    assert np.all(np.isfinite(F.normalize(spec, stats)))


def test_fit_stats_needs_data():
    with pytest.raises(ContractError):
        F.fit_stats([])


# -- crops -------------------------------------------------------------------


def test_random_crop_identity_at_250(rng):
    s = rng.normal(size=(250, 128))
    assert np.array_equal(F.random_crop(s, 250, rng), s)


def test_random_crop_starts_cover_range(rng):
    s = np.arange(260, dtype=np.float64)[:, None] * np.ones((1, 4))
    starts = [int(F.random_crop(s, 250, rng)[0, 0]) for _ in range(10_000)]
    assert min(starts) == 0 and max(starts) == 10
    counts = np.bincount(starts, minlength=11)
    assert counts.min() > 10_000 / 11 * 0.8


def test_random_crop_content_is_slice(rng):
    s = rng.normal(size=(499, 128))
    c = F.random_crop(s, 250, rng)
    hits = [i for i in range(250) if np.array_equal(s[i : i + 250], c)]
    assert len(hits) == 1


def test_random_crop_pads_short(rng):
    s = rng.normal(size=(100, 8))
    c = F.random_crop(s, 250, rng)
    assert c.shape == (250, 8)
    assert np.array_equal(c[:100], s)
    assert np.all(c[100:] == s[-1])


def test_fixed_crop_starts():
    assert F.crop_starts(499) == (0, 124, 249)
    s = np.arange(499)[:, None] * np.ones((1, 3))
    crops = F.fixed_crops(s)
    assert [int(c[0, 0]) for c in crops] == [0, 124, 249]
    assert all(c.shape == (250, 3) for c in crops)
    assert crops[0][0, 0] == 0 and crops[-1][-1, 0] == 498


def test_fixed_crops_at_250_identical(rng):
    s = rng.normal(size=(250, 4))
    a, b, c = F.fixed_crops(s)
    assert np.array_equal(a, s) and np.array_equal(b, s) and np.array_equal(c, s)


def test_fixed_crops_short_repeat(rng):
    s = rng.normal(size=(30, 4))
    a, b, c = F.fixed_crops(s)
    assert a.shape == (250, 4) and np.array_equal(a, b) and np.array_equal(b, c)


@given(st.integers(250, 2000))
def test_fixed_crops_cover_ends(t):
    starts = F.crop_starts(t)
    assert starts[0] == 0 and starts[-1] + 250 == t
    assert starts[1] == (t - 250) // 2


# -- cache -------------------------------------------------------------------


def test_cache_round_trip(tmp_path, rng):
    s = rng.normal(size=(17, 128)).astype(np.float32)
    F.write_cache(tmp_path / "c.msp", s)
    buf = (tmp_path / "c.msp").read_bytes()
    assert buf[:4] == b"MSP1" and len(buf) == 12 + 4 * 17 * 128
    assert np.array_equal(F.read_cache(tmp_path / "c.msp"), s)


def test_cache_corruption(tmp_path, rng):
    F.write_cache(tmp_path / "c.msp", rng.normal(size=(4, 128)))
    buf = (tmp_path / "c.msp").read_bytes()
    (tmp_path / "m.msp").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="offset 0"):
        F.read_cache(tmp_path / "m.msp")
    (tmp_path / "t.msp").write_bytes(buf[:-5])
    with pytest.raises(FormatError, match="offset"):
        F.read_cache(tmp_path / "t.msp")


def test_feature_config_defaults():
    cfg = FeatureConfig()
    assert (cfg.n_fft, cfg.win_samples, cfg.hop_samples, cfg.n_mels) == (2048, 1764, 882, 128)
