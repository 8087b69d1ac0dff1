"""Waveform-in, waveform-out enhancement with a trained generator."""

from __future__ import annotations

import numpy as np

from . import dsp
from .autodiff.tensor import no_grad
from .network import ConfigError, Generator


def enhance_waveform(model: Generator, noisy: np.ndarray) -> np.ndarray:
    """``noisy``: ``(M, n)`` -> enhanced reference-channel waveform of ``n`` samples.

    The enhanced magnitude (mask times the reference's compressed magnitude,
    then decompressed) is combined with the predicted phase and inverted.
    """
    noisy = np.atleast_2d(np.asarray(noisy, dtype=np.float64))
    cfg = model.cfg
    if noisy.shape[0] != cfg.n_mics:
        raise ConfigError(f"input has {noisy.shape[0]} channels, model expects {cfg.n_mics}")
    features, _ = dsp.multichannel_features(noisy, cfg.stft)
    with no_grad():
        out = model(features)
    pair = dsp.SpectroPair(out.y_cmag.data.astype(np.float64), out.y_pha.data.astype(np.float64))
    return dsp.synthesize(pair, cfg.stft, out_len=noisy.shape[1])
