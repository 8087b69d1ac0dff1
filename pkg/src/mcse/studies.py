"""End-to-end training studies: single-set overfit and the microphone-count comparison."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from . import arraysim
from .enhance import enhance_waveform
from .metrics import si_sdr
from .network import Generator, ModelConfig
from .trainer import Trainer, TrainConfig, load_checkpoint


def mean_improvement(model: Generator, items, reference_index: int) -> float:
    """Mean SI-SDR gain of the enhanced output over the noisy reference channel."""
    gains = [si_sdr(it["clean"], enhance_waveform(model, it["noisy"]))
             - si_sdr(it["clean"], it["noisy"][reference_index]) for it in items]
    return float(np.mean(gains))


def mean_si_sdr(model: Generator, items) -> float:
    return float(np.mean([si_sdr(it["clean"], enhance_waveform(model, it["noisy"])) for it in items]))


def overfit_study(n_items: int = 10, steps: int = 200, duration: float = 1.0, lr: float = 5e-4,
                  seed: int = 1, data_dir=None) -> dict:
    """Train a desk-scale 6-mic model on ``n_items`` items and score it on the same items."""
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(data_dir or tmp)
        man = arraysim.simulate_dataset(root, n_items, seed=seed, duration=duration, split_fractions=(1, 0, 0))
        items = arraysim.load_split(arraysim.load_manifest(man), "train")
        cfg = ModelConfig.desk()
        model = Generator(cfg, seed=seed)
        trainer = Trainer(model, TrainConfig(seed=seed, lr=lr))
        done = 0
        while done < steps:
            stats = trainer.train_epoch(items, max_steps=steps - done)
            done += stats["steps"]
        return {"steps": done, "improvement_db": mean_improvement(model, items, cfg.reference_index),
                "final_loss": stats["total"]}


def mic_trend_study(data_dir, n_items: int = 40, duration: float = 1.0, epochs: int = 8, lr: float = 5e-4,
                    seed: int = 0, mics=(1, 6), run_root: Optional[str] = None) -> dict[int, float]:
    """Train one desk model per microphone count on the same simulated set.

    Returns mean test-split SI-SDR for each count, using the checkpoint with
    the best validation SI-SDR.
    """
    data_dir = Path(data_dir)
    man_path = data_dir / "manifest.json"
    if not man_path.exists():
        arraysim.simulate_dataset(data_dir, n_items, seed=seed, duration=duration)
    manifest = arraysim.load_manifest(man_path)
    scores = {}
    for m in mics:
        subset = arraysim.MIC_SUBSETS[m]
        cfg = ModelConfig.desk(m, reference_index=subset.index(4))
        train = arraysim.load_split(manifest, "train", subset)
        val = arraysim.load_split(manifest, "val", subset)
        test = arraysim.load_split(manifest, "test", subset)
        run = Path(run_root or data_dir) / f"mics{m}"
        trainer = Trainer(Generator(cfg, seed=seed), TrainConfig(seed=seed, lr=lr, epochs=epochs), run)
        trainer.fit(train, val)
        scores[m] = mean_si_sdr(load_checkpoint(run / "best.ckpt"), test)
    return scores
