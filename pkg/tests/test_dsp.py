import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fsasd.dataset import AudioClip
from fsasd.dsp import (
    FeatureMatrix,
    MelConfig,
    StftConfig,
    extract_features,
    fit_normalizer,
    log_mel,
    mel_filterbank,
    read_feature_cache,
    stack_frames,
    stft_power,
    write_feature_cache,
)
from fsasd.errors import ClipTooShort, CorruptFile, InsufficientData, ShapeMismatch

FS = 16000


def dft_power_oracle(x, n, hop, win):
    """Frame-by-frame DFT with an explicit exponential matrix."""
    k = np.arange(n // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)
    frames = [(x[s:s + n] * win) for s in range(0, len(x) - n + 1, hop)]
    return np.array([np.abs(basis @ f) ** 2 for f in frames])


def hann(n):
    return np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / n) for i in range(n)])


def mel_oracle(sr, n_fft, n_mels, f_min, f_max):
    """Scalar re-derivation of HTK triangular filters with unit peaks."""
    def to_mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    lo, hi = to_mel(f_min), to_mel(f_max)
    pts = [to_hz(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, centre, right = pts[m], pts[m + 1], pts[m + 2]
        for k in range(n_fft // 2 + 1):
            f = k * sr / n_fft
            if left < f <= centre:
                fb[m, k] = (f - left) / (centre - left)
            elif centre < f < right:
                fb[m, k] = (right - f) / (right - centre)
    return fb


def test_silence_gives_zero_power():
    p = stft_power(np.zeros(4096))
    assert p.shape == (7, 513) and np.all(p == 0)


def test_frame_count_ten_seconds():
    assert stft_power(np.zeros(160000)).shape[0] == 311


def test_too_short():
    with pytest.raises(ClipTooShort):
        stft_power(np.zeros(1000))


def test_matches_dft_oracle():
    x = np.random.default_rng(0).standard_normal(3000)
    for window in ("hann", "rect"):
        cfg = StftConfig(window=window)
        win = hann(1024) if window == "hann" else np.ones(1024)
        ref = dft_power_oracle(x, 1024, 512, win)
        np.testing.assert_allclose(stft_power(x, cfg), ref, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("k0", [16, 100, 300])
def test_bin_centred_sinusoid(k0):
    t = np.arange(8192)
    x = np.sin(2 * np.pi * k0 * FS / 1024 * t / FS + 0.3)
    rect = stft_power(x, StftConfig(window="rect"))
    assert np.all(rect[:, k0] / rect.sum(axis=1) >= 0.99)
    p = stft_power(x)
    assert np.all(np.argmax(p, axis=1) == k0)
    # Hann main lobe: bin k0 holds 2/3 of the power, its neighbours the rest
    np.testing.assert_allclose(p[:, k0] / p.sum(axis=1), 2 / 3, atol=1e-9)
    assert np.all(p[:, k0 - 1:k0 + 2].sum(axis=1) / p.sum(axis=1) >= 0.99)


def test_filterbank_matches_oracle():
    fb = mel_filterbank(MelConfig(), 1024)
    ref = mel_oracle(FS, 1024, 128, 0.0, 8000.0)
    assert fb.shape == (128, 513)
    np.testing.assert_allclose(fb, ref, atol=1e-12)
    assert np.all(fb.sum(axis=1) > 0)


def test_log_mel_white_noise_matches_oracle():
    x = np.random.default_rng(1).standard_normal(16000) * 0.1
    power = stft_power(x)
    ref = 10 * np.log10(power @ mel_oracle(FS, 1024, 128, 0.0, 8000.0).T + 1e-12)
    np.testing.assert_allclose(log_mel(power), ref, atol=1e-6)


def test_log_mel_floor():
    out = log_mel(np.zeros((3, 513)))
    assert np.all(out == 10 * np.log10(1e-12))


def test_log_mel_doubling_adds_3db():
    power = stft_power(np.random.default_rng(2).standard_normal(4096))
    diff = log_mel(2 * power) - log_mel(power)
    np.testing.assert_allclose(diff, 10 * np.log10(2), atol=1e-6)


def test_mel_config_validation():
    with pytest.raises(ValueError):
        MelConfig(f_min=4000, f_max=3000)
    with pytest.raises(ValueError):
        MelConfig(f_max=9000)
    with pytest.raises(ValueError):
        StftConfig(frame_length=1000)
    with pytest.raises(ValueError):
        StftConfig(hop=2048)


def test_stack_five_frames():
    logmel = np.arange(5 * 128, dtype=float).reshape(5, 128)
    fm = stack_frames(logmel)
    assert fm.values.shape == (1, 640)
    np.testing.assert_array_equal(fm.values[0], logmel.ravel())


def test_stack_row_count():
    assert stack_frames(np.zeros((311, 128))).rows == 307


def test_stack_constant():
    fm = stack_frames(np.full((9, 128), -42.5))
    assert np.all(fm.values == -42.5) and fm.cols == 640


def test_stack_too_short():
    with pytest.raises(ClipTooShort):
        stack_frames(np.zeros((4, 128)))


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 40), st.integers(0, 2**32 - 1))
def test_stack_shift_invariance(t, seed):
    L = np.random.default_rng(seed).standard_normal((t, 128))
    S = stack_frames(L).values
    for i in range(t - 4):
        for j in range(5):
            np.testing.assert_array_equal(S[i, j * 128:(j + 1) * 128], L[i + j])


def test_pipeline_deterministic():
    x = np.random.default_rng(3).uniform(-0.5, 0.5, 16000)
    a = extract_features(AudioClip(x, FS)).values
    b = extract_features(AudioClip(x.copy(), FS)).values
    assert a.tobytes() == b.tobytes()
    assert a.shape == (26, 640) and np.all(np.isfinite(a))


def test_pipeline_rejects_other_rates():
    with pytest.raises(ShapeMismatch):
        extract_features(AudioClip(np.zeros(20000), 22050))


@settings(max_examples=25, deadline=None)
@given(st.floats(1.0001, 50.0), st.integers(0, 2**32 - 1))
def test_energy_monotone(alpha, seed):
    x = np.random.default_rng(seed).uniform(-0.02, 0.02, 4096)
    lo = log_mel(stft_power(x))
    hi = log_mel(stft_power(alpha * x))
    assert np.all(hi >= lo)


def test_normalizer_identical_rows():
    norm = fit_normalizer([np.ones((4, 640)) * 3.0])
    assert np.all(norm.std == 1e-8)
    assert np.all(norm(np.ones((2, 640)) * 3.0) == 0.0)


def test_normalizer_population_convention():
    x = np.zeros((2, 640))
    x[1, 0] = 2.0
    norm = fit_normalizer([x[:1], x[1:]])
    assert norm.mean[0] == 1.0 and norm.std[0] == 1.0


def test_normalizer_output_statistics():
    x = np.random.default_rng(4).normal(5.0, 3.0, (500, 640))
    norm = fit_normalizer([x[:200], FeatureMatrix(x[200:])])
    z = norm(x)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-10
    assert np.max(np.abs(z.std(axis=0) - 1.0)) < 1e-10


def test_normalizer_needs_two_rows():
    with pytest.raises(InsufficientData):
        fit_normalizer([np.zeros((1, 640))])


def test_feature_cache_roundtrip(tmp_path):
    x = np.random.default_rng(5).standard_normal((7, 640))
    write_feature_cache(tmp_path / "f.bin", x)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == (7).to_bytes(4, "little") + (640).to_bytes(4, "little")
    assert len(raw) == 8 + 4 * 7 * 640
    np.testing.assert_array_equal(read_feature_cache(tmp_path / "f.bin"),
                                  x.astype(np.float32).astype(np.float64))
    (tmp_path / "f.bin").write_bytes(raw[:-4])
    with pytest.raises(CorruptFile):
        read_feature_cache(tmp_path / "f.bin")
