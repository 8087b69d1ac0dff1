"""Synthetic microphone-array mixtures with a known clean reference channel.

Free-field (anechoic) propagation: every microphone receives the source
delayed by ``distance / 343 m/s`` through a windowed-sinc fractional-delay
filter and scaled by ``1 / distance`` relative to the reference microphone.
Noise is independent per channel but shares one slow amplitude envelope,
and is scaled so the reference channel hits the requested SNR exactly.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from . import dsp

SPEED_OF_SOUND = 343.0
SINC_HALF_TAPS = 32
MIN_DISTANCE = 0.05
SOURCE_KINDS = ("harmonic_am", "filtered_noise_burst", "wav_file")
NOISE_KINDS = ("white", "pink", "babble")


class ManifestError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: tuple[tuple[float, float, float], ...]
    reference_index: int = 0
    name: str = "custom"

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise ValueError("mic_positions must be a non-empty list of 3-D points")
        if not 0 <= self.reference_index < len(pos):
            raise ValueError("reference_index out of range")
        if len({tuple(p) for p in pos.round(9)}) != len(pos):
            raise ValueError("microphone positions must be distinct")

    @property
    def n_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.mic_positions, dtype=float)

    def subset(self, indices: Sequence[int]) -> "ArrayGeometry":
        indices = list(indices)
        if self.reference_index not in indices:
            raise ValueError("subset must keep the reference microphone")
        return ArrayGeometry(tuple(self.mic_positions[i] for i in indices),
                             indices.index(self.reference_index), f"{self.name}[{','.join(map(str, indices))}]")

    def to_dict(self) -> dict:
        return {"name": self.name, "mic_positions": [list(p) for p in self.mic_positions],
                "reference_index": self.reference_index}

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        return cls(tuple(tuple(p) for p in d["mic_positions"]), d.get("reference_index", 0), d.get("name", "custom"))


def rectangular_six() -> ArrayGeometry:
    """Stand-in for a tablet array: 2 rows x 3 mics on a 0.20 m x 0.10 m rectangle, reference = index 4."""
    xs = (-0.10, 0.0, 0.10)
    top = tuple((x, 0.05, 0.0) for x in xs)
    bottom = tuple((x, -0.05, 0.0) for x in xs)
    return ArrayGeometry(top + bottom, reference_index=4, name="rect6-standin")


# mic subsets per count; each keeps the reference (index 4)
MIC_SUBSETS = {1: (4,), 2: (3, 4), 3: (3, 4, 5), 4: (0, 3, 4, 5), 5: (0, 1, 3, 4, 5), 6: (0, 1, 2, 3, 4, 5)}

DEFAULT_SOURCE_POSITION = (0.0, -0.35, 0.30)


# -- sources ------------------------------------------------------------------


def _peak_normalize(x: np.ndarray, peak: float = 0.5) -> np.ndarray:
    m = np.abs(x).max()
    return x * (peak / m) if m > 0 else x


def _syllable_envelope(n: int, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth on/off envelope with ~4 Hz syllable rate and occasional pauses."""
    env = np.zeros(n)
    t = 0
    while t < n:
        seg = int(fs * rng.uniform(0.12, 0.30))
        gap = int(fs * rng.uniform(0.02, 0.12))
        stop = min(n, t + seg)
        if stop > t:
            env[t:stop] = np.sin(np.pi * np.arange(stop - t) / (stop - t)) ** 0.7 * rng.uniform(0.5, 1.0)
        t = stop + gap
    return env


def gen_source(kind: str, duration: float, seed: int, fs: int = 16000, f0: Optional[float] = None,
               path: Optional[str] = None) -> np.ndarray:
    """Deterministic test source, peak-normalized to 0.5.

    ``harmonic_am``: harmonic series (fundamental ``f0``, random in 100-250 Hz
    if not given) under a random two-formant envelope, amplitude-modulated
    by syllable-like bursts.  ``filtered_noise_burst``: band-pass noise
    bursts.  ``wav_file``: first channel of ``path`` looped/cut to length.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * fs))
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    if kind == "harmonic_am":
        f0 = float(f0) if f0 is not None else rng.uniform(100.0, 250.0)
        formants = rng.uniform([300, 900], [900, 2500])
        x = np.zeros(n)
        for k in range(1, int(4000 // f0) + 1):
            fk = k * f0
            amp = sum(np.exp(-0.5 * ((fk - fm) / 250.0) ** 2) for fm in formants) + 0.15 / k
            x += amp * np.sin(2 * np.pi * fk * t + rng.uniform(0, 2 * np.pi))
        x *= _syllable_envelope(n, fs, rng)
    elif kind == "filtered_noise_burst":
        lo = rng.uniform(200, 1500)
        hi = min(lo * rng.uniform(1.5, 4.0), 0.45 * fs)
        sos = signal.butter(4, [lo, hi], btype="band", fs=fs, output="sos")
        x = signal.sosfilt(sos, rng.standard_normal(n)) * _syllable_envelope(n, fs, rng)
    elif kind == "wav_file":
        if path is None:
            raise ValueError("wav_file source needs a path")
        try:
            data, rate = dsp.read_wav(path)
        except (OSError, ValueError) as exc:
            raise OSError(f"cannot read source wav {path}: {exc}") from exc
        if rate != fs:
            raise ValueError(f"{path}: sample rate {rate} != {fs}")
        x = np.resize(data[0], n)
    else:
        raise ValueError(f"unknown source kind {kind!r}; expected one of {SOURCE_KINDS}")
    return _peak_normalize(x)


# -- propagation --------------------------------------------------------------------


def fractional_delay(x: np.ndarray, delay: float, half_taps: int = SINC_HALF_TAPS) -> np.ndarray:
    """Delay ``x`` by ``delay`` samples (>= 0) with a Blackman-windowed sinc; output keeps ``len(x)``."""
    if delay < 0:
        raise ValueError("delay must be non-negative")
    whole = int(np.floor(delay))
    frac = delay - whole
    j = np.arange(-half_taps, half_taps + 1)
    taps = np.sinc(j - frac) * np.blackman(2 * half_taps + 3)[1:-1]
    y = np.convolve(x, taps)[half_taps:half_taps + len(x)]
    out = np.zeros_like(x)
    if whole < len(x):
        out[whole:] = y[:len(x) - whole]
    return out


def _check_source_position(pos: np.ndarray, src: np.ndarray) -> None:
    if len(pos) < 3:
        return
    centred = pos - pos.mean(axis=0)
    _, sv, vt = np.linalg.svd(centred)
    if sv[1] < 1e-9:          # collinear array: no plane to test against
        return
    normal = vt[2]
    if abs(np.dot(src - pos.mean(axis=0), normal)) < 0.1:
        raise ValueError("source must sit at least 0.1 m off the array plane")


def _noise(kind: str, shape: tuple[int, int], fs: int, rng: np.random.Generator) -> np.ndarray:
    m, n = shape
    if kind == "white":
        return rng.standard_normal(shape)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(shape), axis=1)
        f = np.fft.rfftfreq(n, 1.0 / fs)
        spec /= np.sqrt(np.maximum(f, 20.0))
        return np.fft.irfft(spec, n=n, axis=1)
    if kind == "babble":
        out = np.zeros(shape)
        for ch in range(m):
            for _ in range(4):
                out[ch] += gen_source("harmonic_am", n / fs, int(rng.integers(2 ** 31)), fs)
        return out
    raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")


@dataclass
class MixtureItem:
    noisy: np.ndarray            # (M, n)
    clean_ref: np.ndarray        # (n,)
    snr_db: float
    meta: dict = field(default_factory=dict)


def energy_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return float(10 * np.log10(np.sum(clean ** 2) / np.sum(noise ** 2)))


def simulate_array(src: np.ndarray, geom: ArrayGeometry, src_position=DEFAULT_SOURCE_POSITION,
                   noise: Optional[dict] = None, seed: int = 0, fs: int = 16000,
                   source_kind: str = "unknown") -> MixtureItem:
    """Propagate ``src`` to every microphone and add per-channel noise.

    ``noise`` is ``{"kind": white|pink|babble, "snr_db": float}``; an
    infinite or missing SNR gives a noise-free mixture.  Delays are relative
    to the closest microphone, so the earliest channel is not shifted.
    """
    src = np.asarray(src, dtype=np.float64)
    pos = geom.positions
    sp = np.asarray(src_position, dtype=float)
    _check_source_position(pos, sp)
    dist = np.maximum(np.linalg.norm(pos - sp, axis=1), MIN_DISTANCE)
    delays = (dist - dist.min()) / SPEED_OF_SOUND * fs
    gains = dist[geom.reference_index] / dist
    clean = np.stack([g * fractional_delay(src, d) for g, d in zip(gains, delays)])
    clean_ref = clean[geom.reference_index].copy()

    noise = noise or {}
    snr_db = float(noise.get("snr_db", np.inf))
    kind = noise.get("kind", "white")
    rng = np.random.default_rng(seed)
    noisy = clean.copy()
    if np.isfinite(snr_db):
        e_clean = np.sum(clean_ref ** 2)
        if e_clean <= 0:
            raise ValueError("cannot set an SNR for a zero-energy source")
        n = clean.shape[1]
        nz = _noise(kind, clean.shape, fs, rng)
        # shared slow envelope; per-channel realisations stay independent
        knots = rng.uniform(0.4, 1.0, size=max(2, int(n / fs * 3) + 2))
        env = np.interp(np.linspace(0, len(knots) - 1, n), np.arange(len(knots)), knots)
        nz *= env
        e_noise = np.sum(nz[geom.reference_index] ** 2)
        nz *= np.sqrt(e_clean / (e_noise * 10 ** (snr_db / 10)))
        noisy = clean + nz
    meta = {"source_kind": source_kind, "noise_kind": kind, "seed": seed, "geometry": geom.name,
            "source_position": list(map(float, sp)), "geometry_note": "rectangular stand-in, not a measured array"}
    return MixtureItem(noisy=noisy, clean_ref=clean_ref, snr_db=snr_db, meta=meta)


# -- datasets / manifests ----------------------------------------------------------


def simulate_dataset(out_dir, n_items: int, seed: int = 0, duration: float = 1.0,
                     geometry: Optional[ArrayGeometry] = None, snr_grid=(0.0, 5.0, 10.0),
                     source_kinds=("harmonic_am",), noise_kinds=("white", "pink", "babble"),
                     position_jitter: float = 0.05, fs: int = 16000,
                     split_fractions=(0.8, 0.1, 0.1)) -> Path:
    """Write ``n_items`` mixtures as float32 WAV + JSON sidecars and build the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geometry = geometry or rectangular_six()
    rng = np.random.default_rng(seed)
    for i in range(n_items):
        item_seed = int(rng.integers(2 ** 31))
        irng = np.random.default_rng(item_seed)
        kind = source_kinds[i % len(source_kinds)]
        src = gen_source(kind, duration, item_seed, fs)
        position = np.asarray(DEFAULT_SOURCE_POSITION) + irng.uniform(-position_jitter, position_jitter, 3)
        snr = float(snr_grid[i % len(snr_grid)])
        noise = {"kind": noise_kinds[i % len(noise_kinds)], "snr_db": snr}
        item = simulate_array(src, geometry, position, noise, seed=item_seed + 1, fs=fs, source_kind=kind)
        stem = f"item_{i:05d}"
        dsp.write_wav(out / f"{stem}_noisy.wav", item.noisy, fs)
        dsp.write_wav(out / f"{stem}_clean.wav", item.clean_ref, fs)
        meta = dict(item.meta, snr_db=snr, geometry_spec=geometry.to_dict())
        (out / f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return build_manifest(out, split_fractions, seed=seed)


def _split_counts(n: int, fractions) -> list[int]:
    fr = np.asarray(fractions, dtype=float)
    if len(fr) != 3 or np.any(fr < 0) or fr.sum() <= 0:
        raise ValueError("split_fractions must be three non-negative numbers")
    fr = fr / fr.sum()
    counts = np.floor(fr * n + 1e-9).astype(int)
    # hand leftovers to the largest remainders, earliest split first on ties
    rem = fr * n - counts
    for k in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def build_manifest(directory, split_fractions=(0.8, 0.1, 0.1), seed: int = 0,
                   filename: str = "manifest.json") -> Path:
    """Index ``item_*.json`` sidecars and their WAVs; fails without writing if anything is missing."""
    directory = Path(directory)
    metas = sorted(directory.glob("item_*.json"))
    if not metas:
        raise ManifestError(f"{directory}: no items found (empty manifest)")
    problems = []
    items = []
    for mp in metas:
        stem = mp.stem
        try:
            meta = json.loads(mp.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            problems.append(f"{mp.name}: {exc}")
            continue
        entry = {"id": stem, "noisy_path": f"{stem}_noisy.wav", "clean_path": f"{stem}_clean.wav",
                 "snr_db": meta.get("snr_db"), "seed": meta.get("seed")}
        for key in ("noisy_path", "clean_path"):
            try:
                dsp.read_wav(directory / entry[key])
            except Exception as exc:  # noqa: BLE001 - any unreadable file is reported
                problems.append(f"{entry[key]}: {exc}")
        items.append(entry)
    if problems:
        raise ManifestError("manifest build failed:\n  " + "\n  ".join(problems))
    counts = _split_counts(len(items), split_fractions)
    order = np.random.default_rng(seed).permutation(len(items))
    ids = [items[i]["id"] for i in order]
    splits = {"train": sorted(ids[:counts[0]]), "val": sorted(ids[counts[0]:counts[0] + counts[1]]),
              "test": sorted(ids[counts[0] + counts[1]:])}
    manifest = {"version": 1, "seed": seed, "split_fractions": list(split_fractions), "items": items,
                "splits": splits}
    target = directory / filename
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    os.replace(tmp, target)
    return target


def load_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_split(manifest: dict, split: str, mic_indices: Optional[Sequence[int]] = None) -> list[dict]:
    """Load ``{"id", "noisy", "clean"}`` records for one split, optionally selecting microphones."""
    root = Path(manifest["root"])
    by_id = {it["id"]: it for it in manifest["items"]}
    out = []
    for item_id in manifest["splits"][split]:
        it = by_id[item_id]
        noisy, _ = dsp.read_wav(root / it["noisy_path"])
        clean, _ = dsp.read_wav(root / it["clean_path"])
        if mic_indices is not None:
            noisy = noisy[list(mic_indices)]
        out.append({"id": item_id, "noisy": noisy, "clean": clean[0], "snr_db": it["snr_db"]})
    return out
