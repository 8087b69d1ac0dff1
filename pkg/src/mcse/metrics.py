"""Objective scores: SI-SDR, plain SDR and STOI, plus split-level evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from math import gcd
from typing import Callable, Sequence

import numpy as np
from scipy import signal

log = logging.getLogger(__name__)

DB_CAP = 100.0


class MetricError(ValueError):
    pass


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise MetricError(f"length mismatch: ref {ref.size}, est {est.size}")
    return ref, est


def _ratio_db(num: float, den: float) -> float:
    if den <= num * 10 ** (-DB_CAP / 10):
        return DB_CAP
    return float(min(DB_CAP, 10 * np.log10(num / den)))


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB.

    Signals are used as given (no mean removal), so ``si_sdr([1, 0], [1, 0.1])``
    is exactly 20 dB.  Callers with DC offsets should subtract them first.
    """
    ref, est = _pair(ref, est)
    e_ref = ref @ ref
    if e_ref <= 0:
        raise MetricError("si_sdr: reference has zero energy")
    target = (est @ ref) / e_ref * ref
    resid = est - target
    return _ratio_db(target @ target, resid @ resid)


def sdr(ref, est) -> float:
    """Plain signal-to-error ratio against the unscaled reference (no filtered projection)."""
    ref, est = _pair(ref, est)
    e_ref = ref @ ref
    if e_ref <= 0:
        raise MetricError("sdr: reference has zero energy")
    err = est - ref
    return _ratio_db(e_ref, err @ err)


# -- STOI ----------------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
TAPS_PER_PHASE = 64


def resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    """Polyphase resampling with a Kaiser-windowed sinc of 64 taps per phase."""
    if fs_in == fs_out:
        return np.asarray(x, dtype=np.float64)
    g = gcd(int(fs_in), int(fs_out))
    up, down = fs_out // g, fs_in // g
    # odd length keeps the filter centred; resample_poly applies the gain of ``up`` itself
    taps = TAPS_PER_PHASE * up + 1
    h = signal.firwin(taps, 1.0 / max(up, down), window=("kaiser", 5.0))
    return signal.resample_poly(np.asarray(x, dtype=np.float64), up, down, window=h)


def _hann(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    if len(x) < n:
        return np.zeros((0, n))
    return np.lib.stride_tricks.sliding_window_view(x, n)[::hop]


def _remove_silence(x, y, dyn_range, n, hop):
    w = _hann(n)
    xf = _frames(x, n, hop) * w
    yf = _frames(y, n, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    count = len(xf)
    length = (count - 1) * hop + n if count else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(count):
        xs[i * hop:i * hop + n] += xf[i]
        ys[i * hop:i * hop + n] += yf[i]
    return xs, ys


def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, n_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    """Rectangular band-selection matrix ``(n_bands, nfft // 2 + 1)``."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _stft_mag(x: np.ndarray) -> np.ndarray:
    frames = _frames(x, STOI_FRAME, STOI_FRAME // 2) * _hann(STOI_FRAME)
    return np.abs(np.fft.rfft(frames, n=STOI_NFFT, axis=1)).T     # (bins, frames)


def stoi(ref, est, fs: int = 16000) -> float:
    """Short-time objective intelligibility of ``est`` against ``ref`` (standard, non-extended)."""
    ref, est = _pair(ref, est)
    if len(ref) < 0.5 * fs:
        raise MetricError("stoi: need at least 0.5 s of signal")
    x = resample(ref, fs, STOI_FS)
    y = resample(est, fs, STOI_FS)
    x, y = _remove_silence(x, y, STOI_DYN_RANGE, STOI_FRAME, STOI_FRAME // 2)
    obm = third_octave_matrix()
    xb = np.sqrt(obm @ _stft_mag(x) ** 2) if len(x) else np.zeros((STOI_BANDS, 0))
    yb = np.sqrt(obm @ _stft_mag(y) ** 2) if len(y) else np.zeros((STOI_BANDS, 0))
    n_frames = xb.shape[1]
    if n_frames < STOI_SEGMENT:
        raise MetricError(f"stoi: only {n_frames} frames left after silence removal, need {STOI_SEGMENT}")
    clip = 10 ** (-STOI_BETA / 20)
    eps = np.finfo(float).eps
    scores = []
    for m in range(STOI_SEGMENT, n_frames + 1):
        xs = xb[:, m - STOI_SEGMENT:m]
        ys = yb[:, m - STOI_SEGMENT:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + eps)
        yp = np.minimum(ys * alpha, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        num = (xc * yc).sum(axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + eps
        scores.append(num / den)
    return float(np.clip(np.mean(scores), -1.0, 1.0))


# -- reports -----------------------------------------------------------------------

METRIC_KEYS = ("si_sdr_db", "sdr_db", "stoi")
PESQ_CELL = "n/a (out of scope)"


def score_pair(ref, est, fs: int = 16000) -> dict[str, float]:
    return {"si_sdr_db": si_sdr(ref, est), "sdr_db": sdr(ref, est), "stoi": stoi(ref, est, fs)}


@dataclass
class MetricReport:
    noisy: dict[str, dict[str, float]] = field(default_factory=dict)
    enhanced: dict[str, dict[str, float]] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    label: str = ""

    @staticmethod
    def _mean(rows: dict) -> dict[str, float]:
        if not rows:
            return {k: float("nan") for k in METRIC_KEYS}
        return {k: float(np.mean([r[k] for r in rows.values()])) for k in METRIC_KEYS}

    @property
    def noisy_mean(self) -> dict[str, float]:
        return self._mean(self.noisy)

    @property
    def enhanced_mean(self) -> dict[str, float]:
        return self._mean(self.enhanced)

    @property
    def count(self) -> int:
        return len(self.enhanced)

    def to_dict(self) -> dict:
        return {"label": self.label, "count": self.count, "failures": self.failures,
                "sdr_definition": "plain SNR against the unscaled reference",
                "pesq": PESQ_CELL,
                "aggregate": {"noisy": self.noisy_mean, "enhanced": self.enhanced_mean},
                "items": {k: {"noisy": self.noisy[k], "enhanced": self.enhanced[k]} for k in self.enhanced}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def render_table(self) -> str:
        head = ["", "PESQ", "STOI", "SI-SDR", "SDR"]
        rows = [head]
        for name, agg in (("Noisy", self.noisy_mean), ("Enhanced", self.enhanced_mean)):
            rows.append([name, PESQ_CELL, f"{agg['stoi']:.3f}", f"{agg['si_sdr_db']:.2f}", f"{agg['sdr_db']:.2f}"])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = [f"# {self.label} items={self.count} failures={len(self.failures)}; "
                 "SDR = plain SNR vs unscaled reference"]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        return "\n".join(lines)


def evaluate_items(items: Sequence[dict], enhance: Callable[[np.ndarray], np.ndarray], reference_index: int,
                   fs: int = 16000, label: str = "") -> MetricReport:
    """Score noisy reference and ``enhance(noisy)`` against each item's clean reference."""
    report = MetricReport(label=label)
    for it in items:
        try:
            clean = it["clean"]
            est = enhance(it["noisy"])
            report.noisy[it["id"]] = score_pair(clean, it["noisy"][reference_index], fs)
            report.enhanced[it["id"]] = score_pair(clean, est, fs)
        except Exception as exc:  # noqa: BLE001 - failures are tallied, not fatal
            report.failures[it["id"]] = f"{type(exc).__name__}: {exc}"
            report.noisy.pop(it["id"], None)
    if report.failures:
        log.warning("%d item(s) failed and are excluded from the aggregate", len(report.failures))
    return report


def evaluate_model(model, items: Sequence[dict], label: str = "", fs: int = 16000) -> MetricReport:
    from .enhance import enhance_waveform
    if not items:
        raise MetricError("evaluate_model: empty split")
    return evaluate_items(items, lambda noisy: enhance_waveform(model, noisy), model.cfg.reference_index,
                          fs, label)
