"""STFT front-end: compressed magnitude / phase features and resynthesis.

Framing reflect-pads ``window_len // 2`` samples at both ends, so a signal of
``n`` samples gives ``1 + n // hop`` frames.  Resynthesis is weighted
overlap-add divided by the summed squared window, which inverts the analysis
exactly wherever that sum is non-zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

from .autodiff import ops
from .autodiff.ops import register
from .autodiff.tensor import Tensor


class InputTooShortError(ValueError):
    pass


class NumericalDegeneracyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 400
    hop: int = 100
    fft_len: int = 400
    window: str = "hann_periodic"
    sample_rate: int = 16000
    compression: float = 0.3

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ValueError("need 0 < hop <= window_len")
        if self.fft_len < self.window_len:
            raise ValueError("need fft_len >= window_len")
        if self.window != "hann_periodic":
            raise ValueError(f"unsupported window {self.window!r}")
        if not 0 < self.compression <= 1:
            raise ValueError("compression exponent must be in (0, 1]")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def pad(self) -> int:
        return self.window_len // 2

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples + 2 * self.pad - self.window_len) // self.hop

    def to_dict(self) -> dict:
        return asdict(self)


def analysis_window(cfg: StftConfig) -> np.ndarray:
    """Periodic Hann of ``window_len`` samples (frames are zero-extended to ``fft_len``)."""
    n = np.arange(cfg.window_len)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.window_len)


def cola_deviation(cfg: StftConfig) -> float:
    """Relative ripple of the hop-shifted window sum (0 for an exact COLA window)."""
    win = analysis_window(cfg)
    acc = np.zeros(cfg.hop)
    for start in range(0, len(win), cfg.hop):
        seg = win[start:start + cfg.hop]
        acc[:len(seg)] += seg
    return float((acc.max() - acc.min()) / acc.mean())


def stft(wave, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """One-sided spectrum ``(T, F)`` of a 1-D waveform."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError("stft expects a single-channel waveform")
    if len(wave) < cfg.window_len:
        raise InputTooShortError(f"need at least {cfg.window_len} samples, got {len(wave)}")
    padded = np.pad(wave, cfg.pad, mode="reflect")
    n_frames = cfg.n_frames(len(wave))
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.window_len)[::cfg.hop][:n_frames]
    return np.fft.rfft(frames * analysis_window(cfg), n=cfg.fft_len, axis=-1)


def _ola_norm(cfg: StftConfig, n_frames: int) -> np.ndarray:
    win = analysis_window(cfg)
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    norm = np.zeros(total)
    for t in range(n_frames):
        norm[t * cfg.hop:t * cfg.hop + cfg.window_len] += win ** 2
    return norm


def _overlap_add(frames: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = frames.shape[0]
    w = frames.shape[1]
    out = np.zeros((n_frames - 1) * cfg.hop + w, dtype=frames.dtype)
    for t in range(n_frames):
        out[t * cfg.hop:t * cfg.hop + w] += frames[t]
    return out


def _retained_norm(cfg: StftConfig, n_frames: int, out_len: int) -> np.ndarray:
    norm = _ola_norm(cfg, n_frames)[cfg.pad:cfg.pad + out_len]
    if len(norm) and norm.min() < 1e-11:
        raise NumericalDegeneracyError("overlap-add normalisation vanishes inside the output span")
    return norm


def istft(spec, cfg: StftConfig = StftConfig(), out_len: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft`; output cut or zero-extended to ``out_len`` samples."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise ValueError(f"spectrum must be (T, {cfg.n_bins}), got {spec.shape}")
    n_frames = spec.shape[0]
    if out_len is None:
        out_len = (n_frames - 1) * cfg.hop
    frames = np.fft.irfft(spec, n=cfg.fft_len, axis=-1)[:, :cfg.window_len] * analysis_window(cfg)
    wave = _overlap_add(frames, cfg)[cfg.pad:cfg.pad + out_len]
    avail = len(wave)
    norm = _retained_norm(cfg, n_frames, avail)
    out = np.zeros(out_len)
    out[:avail] = wave / norm
    return out


@register("istft")
def istft_op(real, imag, cfg: StftConfig = StftConfig(), out_len: int | None = None) -> Tensor:
    """Differentiable :func:`istft` of ``real + 1j * imag``, each ``(T, F)``."""
    real, imag = ops._t(real), ops._t(imag, real)
    dtype = real.dtype
    n_frames = real.shape[0]
    if out_len is None:
        out_len = (n_frames - 1) * cfg.hop
    win = analysis_window(cfg)
    frames = np.fft.irfft(real.data + 1j * imag.data, n=cfg.fft_len, axis=-1)[:, :cfg.window_len] * win
    full = _overlap_add(frames, cfg)
    avail = min(out_len, len(full) - cfg.pad)
    norm = _retained_norm(cfg, n_frames, avail)
    out = np.zeros(out_len)
    out[:avail] = full[cfg.pad:cfg.pad + avail] / norm
    n = cfg.fft_len
    scale = np.full(cfg.n_bins, 2.0 / n)
    scale[0] = 1.0 / n
    if n % 2 == 0:
        scale[-1] = 1.0 / n

    def backward(g):
        gfull = np.zeros(len(full))
        gfull[cfg.pad:cfg.pad + avail] = g[:avail] / norm
        gframes = np.lib.stride_tricks.sliding_window_view(gfull, cfg.window_len)[::cfg.hop][:n_frames] * win
        gspec = np.fft.rfft(gframes, n=n, axis=-1) * scale
        return gspec.real.astype(dtype), gspec.imag.astype(dtype)
    return Tensor.from_op(out.astype(dtype), (real, imag), backward, "istft",
                          {"cfg": cfg, "out_len": out_len})


def compress_mag(mag, c: float = 0.3) -> np.ndarray:
    mag = np.asarray(mag)
    if np.any(mag < 0):
        raise ValueError("compress_mag: magnitudes must be non-negative")
    if not 0 < c <= 1:
        raise ValueError("compression exponent must be in (0, 1]")
    return np.power(mag, c)


def decompress_mag(cmag, c: float = 0.3) -> np.ndarray:
    cmag = np.asarray(cmag)
    if np.any(cmag < 0):
        raise ValueError("decompress_mag: magnitudes must be non-negative")
    return np.power(cmag, 1.0 / c)


@dataclass
class SpectroPair:
    cmag: np.ndarray
    pha: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.cmag.shape

    def to_complex(self, c: float = 0.3) -> np.ndarray:
        return decompress_mag(self.cmag, c) * np.exp(1j * self.pha)


def analyze(wave, cfg: StftConfig = StftConfig()) -> SpectroPair:
    """Waveform -> (compressed magnitude, phase); zero bins get phase 0."""
    spec = stft(wave, cfg)
    mag = np.abs(spec)
    pha = np.where(mag > 0, np.angle(spec), 0.0)
    pha[pha <= -np.pi] = np.pi
    return SpectroPair(compress_mag(mag, cfg.compression), pha)


def synthesize(pair: SpectroPair, cfg: StftConfig = StftConfig(), out_len: int | None = None) -> np.ndarray:
    return istft(pair.to_complex(cfg.compression), cfg, out_len)


def pack_features(specs: Sequence[SpectroPair]) -> np.ndarray:
    """M pairs -> ``(2M, T, F)`` laid out as [cmag0, pha0, cmag1, pha1, ...]."""
    if not specs:
        raise ValueError("pack_features: need at least one channel")
    shape = specs[0].cmag.shape
    for i, s in enumerate(specs):
        if s.cmag.shape != shape or s.pha.shape != shape:
            raise ValueError(f"pack_features: channel {i} has shape {s.cmag.shape}, expected {shape}")
    out = np.empty((2 * len(specs),) + shape, dtype=np.result_type(*(s.cmag for s in specs)))
    for m, s in enumerate(specs):
        out[2 * m] = s.cmag
        out[2 * m + 1] = s.pha
    return out


def unpack_features(features: np.ndarray) -> list[SpectroPair]:
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[0] % 2:
        raise ValueError(f"features must be (2M, T, F), got {features.shape}")
    return [SpectroPair(features[2 * m].copy(), features[2 * m + 1].copy())
            for m in range(features.shape[0] // 2)]


def multichannel_features(noisy: np.ndarray, cfg: StftConfig = StftConfig()) -> tuple[np.ndarray, list[SpectroPair]]:
    """``noisy``: ``(M, n)`` -> packed features and the per-channel pairs."""
    pairs = [analyze(ch, cfg) for ch in np.atleast_2d(noisy)]
    return pack_features(pairs), pairs


# -- WAV ---------------------------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """Returns ``(samples, rate)``; samples are float64 ``(channels, n)`` in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    data = data.T if data.ndim == 2 else data[None, :]
    return np.ascontiguousarray(data), int(rate)


def write_wav(path, samples, rate: int = 16000, pcm16: bool = False) -> None:
    """Write ``(channels, n)`` or ``(n,)`` samples as float32 (default) or 16-bit PCM."""
    samples = np.asarray(samples)
    data = samples.T if samples.ndim == 2 else samples
    if pcm16:
        data = np.clip(np.round(data * 32768.0), -32768, 32767).astype("<i2")
    else:
        data = data.astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), rate, data)
