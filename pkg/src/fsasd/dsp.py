"""Log-mel front end: STFT power, mel pooling, 5-frame context stacking and
per-dimension standardization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import AudioClip, SAMPLE_RATE
from .errors import ClipTooShort, InsufficientData, ShapeMismatch, CorruptFile
from .io import atomic_write_bytes

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    frame_length: int = 1024
    hop: int = 512
    window: str = "hann"

    def __post_init__(self):
        n = self.frame_length
        if n <= 0 or n & (n - 1):
            raise ValueError("frame_length must be a power of two")
        if not 0 < self.hop <= n:
            raise ValueError("hop must be in (0, frame_length]")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def fft_size(self) -> int:
        return self.frame_length


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-12
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass
class FeatureMatrix:
    values: np.ndarray
    source_clip: str = ""

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def window(cfg: StftConfig) -> np.ndarray:
    n = cfg.frame_length
    if cfg.window == "rect":
        return np.ones(n)
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def stft_power(samples, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """|rfft(window * frame)|^2, frames at t*hop, trailing partial frame dropped."""
    x = np.asarray(samples.samples if isinstance(samples, AudioClip) else samples,
                   dtype=np.float64)
    if len(x) < cfg.frame_length:
        raise ClipTooShort(f"{len(x)} samples < frame length {cfg.frame_length}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_length)[::cfg.hop]
    spec = np.fft.rfft(frames * window(cfg), n=cfg.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _filterbank(n_mels, f_min, f_max, sample_rate, n_fft):
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (mid - lo)
    falling = (hi - bins[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError("mel filterbank has empty bands; raise fft size or n_mels down")
    fb.setflags(write=False)
    return fb


def mel_filterbank(mel_cfg: MelConfig = MelConfig(), n_fft: int = 1024) -> np.ndarray:
    """HTK-mel triangular filters with unit peaks, shape (n_mels, n_fft//2 + 1)."""
    return _filterbank(mel_cfg.n_mels, float(mel_cfg.f_min), float(mel_cfg.f_max),
                       mel_cfg.sample_rate, n_fft)


def log_mel(power_spec, mel_cfg: MelConfig = MelConfig()) -> np.ndarray:
    power_spec = np.asarray(power_spec, dtype=np.float64)
    n_fft = 2 * (power_spec.shape[1] - 1)
    fb = mel_filterbank(mel_cfg, n_fft)
    return 10.0 * np.log10(power_spec @ fb.T + mel_cfg.log_floor)


def stack_frames(logmel, context: int = 5, source_clip: str = "") -> FeatureMatrix:
    logmel = np.asarray(logmel, dtype=np.float64)
    if logmel.shape[0] < context:
        raise ClipTooShort(f"{logmel.shape[0]} frames < context {context}")
    win = np.lib.stride_tricks.sliding_window_view(logmel, context, axis=0)
    # win: (T-context+1, n_mels, context) -> row i = concat(frames i..i+context-1)
    rows = win.transpose(0, 2, 1).reshape(win.shape[0], context * logmel.shape[1])
    return FeatureMatrix(np.ascontiguousarray(rows), source_clip)


def extract_features(clip: AudioClip, stft_cfg: StftConfig = StftConfig(),
                     mel_cfg: MelConfig = MelConfig(), context: int = 5,
                     source_clip: str = "") -> FeatureMatrix:
    if clip.sample_rate != mel_cfg.sample_rate:
        raise ShapeMismatch(f"clip at {clip.sample_rate} Hz, pipeline expects "
                            f"{mel_cfg.sample_rate} Hz")
    return stack_frames(log_mel(stft_power(clip, stft_cfg), mel_cfg), context, source_clip)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ShapeMismatch(f"feature width {x.shape[-1]} != {self.mean.shape[0]}")
        return (x - self.mean) / self.std


def fit_normalizer(matrices) -> Normalizer:
    """Population mean/std per dimension over all rows; std floored at 1e-8."""
    mats = [m.values if isinstance(m, FeatureMatrix) else np.asarray(m) for m in matrices]
    if not mats or sum(m.shape[0] for m in mats) < 2:
        raise InsufficientData("need at least 2 feature rows to fit a normalizer")
    x = np.concatenate(mats, axis=0)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return Normalizer(mean, std)


# Optional on-disk cache: {rows, cols} as little-endian uint32, then float32 row-major.
_CACHE_HEADER = struct.Struct("<II")


def write_feature_cache(path, matrix):
    values = matrix.values if isinstance(matrix, FeatureMatrix) else np.asarray(matrix)
    rows, cols = values.shape
    payload = _CACHE_HEADER.pack(rows, cols) + values.astype("<f4").tobytes(order="C")
    atomic_write_bytes(Path(path), payload)


def read_feature_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise CorruptFile(f"{path}: truncated feature cache header")
    rows, cols = _CACHE_HEADER.unpack_from(data)
    body = data[_CACHE_HEADER.size:]
    if len(body) != 4 * rows * cols:
        raise CorruptFile(f"{path}: expected {rows}x{cols} floats, got {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)
