"""Signal-domain losses, AdamW, the epoch loop and binary checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dsp
from .autodiff import ops
from .autodiff.tensor import ShapeError, Tensor, get_default_dtype
from .metrics import si_sdr
from .network import Generator, ModelConfig

log = logging.getLogger(__name__)

LOSS_KEYS = ("mag", "phase", "complex", "time")


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.8, 0.99)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    lr_decay_per_epoch: float = 0.99
    epochs: int = 50
    batch_size: int = 1
    loss_weights: dict = field(default_factory=lambda: {"mag": 1.0, "phase": 0.3, "complex": 0.1, "time": 0.2})
    seed: int = 0
    validation_metric: str = "si_sdr"
    grad_clip: float = 5.0
    crop_seconds: float = 2.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1]")
        if set(self.loss_weights) != set(LOSS_KEYS):
            raise ValueError(f"loss_weights needs exactly the keys {LOSS_KEYS}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ValueError("loss weights must be non-negative")
        if self.validation_metric != "si_sdr":
            raise ValueError("only si_sdr validation is supported")
        if self.batch_size != 1:
            raise ValueError("batch_size must be 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_per_epoch ** epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


# -- losses ------------------------------------------------------------------------


def _mse(a, b) -> Tensor:
    return ops.mean(ops.square(ops.sub(a, b)))


def _anti_wrap_cost(d: Tensor) -> Tensor:
    return ops.mean(ops.sub(1.0, ops.cos(d)))


def phase_loss(pred, target) -> Tensor:
    """Mean of ``1 - cos`` on the phase error, its frequency difference and its time difference.

    Inputs are ``(..., T, F)``; the cosine makes every term invariant to 2*pi wraps.
    """
    pred = ops._t(pred)
    target = ops._t(target, pred)
    err = ops.sub(pred, target)
    t_ax, f_ax = err.ndim - 2, err.ndim - 1
    n_t, n_f = err.shape[t_ax], err.shape[f_ax]
    ip = _anti_wrap_cost(err)
    gd = _anti_wrap_cost(ops.sub(ops.slice(err, f_ax, 1, n_f), ops.slice(err, f_ax, 0, n_f - 1)))
    iaf = _anti_wrap_cost(ops.sub(ops.slice(err, t_ax, 1, n_t), ops.slice(err, t_ax, 0, n_t - 1)))
    return ops.mul(ops.add(ops.add(ip, gd), iaf), 1.0 / 3.0)


@dataclass
class CleanTarget:
    cmag: np.ndarray         # (T, F)
    pha: np.ndarray          # (T, F)
    wave: np.ndarray         # (n,)


def total_loss(out, clean: CleanTarget, cfg: TrainConfig, stft_cfg: dsp.StftConfig = dsp.StftConfig()
               ) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of magnitude MSE, phase loss, compressed-complex MSE and waveform MAE.

    The complex term is the MSE over real and imaginary parts pooled
    together.  Terms with zero weight are skipped entirely.
    """
    w = cfg.loss_weights
    y_cmag, y_pha = out.y_cmag, out.y_pha
    dtype = y_cmag.dtype
    c_cmag = Tensor(clean.cmag, dtype=dtype)
    c_pha = Tensor(clean.pha, dtype=dtype)
    parts: dict[str, Tensor] = {}
    if w["mag"]:
        parts["mag"] = _mse(y_cmag, c_cmag)
    if w["phase"]:
        parts["phase"] = phase_loss(y_pha, c_pha)
    need_trig = w["complex"] or w["time"]
    if need_trig:
        cos_p, sin_p = ops.cos(y_pha), ops.sin(y_pha)
    if w["complex"]:
        yr, yi = ops.mul(y_cmag, cos_p), ops.mul(y_cmag, sin_p)
        cr = Tensor(clean.cmag * np.cos(clean.pha), dtype=dtype)
        ci = Tensor(clean.cmag * np.sin(clean.pha), dtype=dtype)
        parts["complex"] = ops.mul(ops.add(_mse(yr, cr), _mse(yi, ci)), 0.5)
    if w["time"]:
        mag = ops.power(y_cmag, 1.0 / stft_cfg.compression)
        wave = dsp.istft_op(ops.mul(mag, cos_p), ops.mul(mag, sin_p), stft_cfg, len(clean.wave))
        parts["time"] = ops.mean(ops.abs(ops.sub(wave, Tensor(clean.wave, dtype=dtype))))
    total = None
    for k, v in parts.items():
        term = ops.mul(v, float(w[k]))
        total = term if total is None else ops.add(total, term)
    if total is None:
        total = Tensor(np.zeros((), dtype=dtype))
    comps = {k: float(parts[k].data) if k in parts else 0.0 for k in LOSS_KEYS}
    return total, comps


# -- optimizer ---------------------------------------------------------------------------


class AdamW:
    """Adaptive moments with weight decay applied directly to the weights (decoupled)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas=(0.8, 0.99), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            w = p.data.astype(np.float64) * (1 - self.lr * self.weight_decay)
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = w.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- data -------------------------------------------------------------------------


@dataclass
class PreparedItem:
    item_id: str
    features: np.ndarray     # (2M, T, F)
    target: CleanTarget


def prepare_item(item_id: str, noisy: np.ndarray, clean: np.ndarray, stft_cfg: dsp.StftConfig,
                 dtype=None) -> PreparedItem:
    dtype = dtype or get_default_dtype()
    feats, _ = dsp.multichannel_features(noisy, stft_cfg)
    pair = dsp.analyze(clean, stft_cfg)
    return PreparedItem(item_id, feats.astype(dtype), CleanTarget(pair.cmag, pair.pha, np.asarray(clean, float)))


def crop(item: dict, seconds: float, rng: np.random.Generator, fs: int) -> dict:
    n = item["noisy"].shape[1]
    size = int(round(seconds * fs))
    if n <= size:
        return item
    start = int(rng.integers(0, n - size + 1))
    return dict(item, noisy=item["noisy"][:, start:start + size], clean=item["clean"][start:start + size])


# -- checkpoints ----------------------------------------------------------------------

MAGIC = b"MCSECKPT"
FORMAT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(model: Generator, path, extra: Optional[dict] = None) -> Path:
    """Length-prefixed JSON header (config + tensor index) followed by little-endian tensor bytes."""
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, p in model.named_parameters():
        code = "f64" if p.dtype == np.float64 else "f32"
        raw = np.ascontiguousarray(p.data, dtype=_DTYPES[code]).tobytes()
        index.append({"name": name, "shape": list(p.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "model_config": model.cfg.to_dict(),
                         "extra": extra or {}, "tensors": index}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(header, tensors)``; raises :class:`CheckpointError` on any format problem."""
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC or len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header parse error: {exc}") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version') if isinstance(header, dict) else None!r}")
    body = memoryview(blob)[start + hlen:]
    tensors = {}
    for t in header["tensors"]:
        end = t["offset"] + t["nbytes"]
        if end > len(body):
            raise CheckpointError(f"{path}: truncated data for {t['name']}")
        arr = np.frombuffer(body[t["offset"]:end], dtype=_DTYPES[t["dtype"]])
        tensors[t["name"]] = arr.reshape(t["shape"]).copy()
    return header, tensors


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> Generator:
    """Rebuild the generator stored at ``path``.

    With ``cfg`` the weights are loaded into a model built from that config,
    and any disagreement raises ``ShapeError`` naming the first offending tensor.
    """
    header, tensors = read_checkpoint(path)
    stored = ModelConfig.from_dict(header["model_config"])
    model = Generator(cfg or stored)
    own = dict(model.named_parameters())
    for name, p in own.items():
        if name not in tensors:
            raise ShapeError(f"{name}: missing from checkpoint")
        if tensors[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} does not match model {p.shape}")
    extra = sorted(set(tensors) - set(own))
    if extra:
        raise ShapeError(f"{extra[0]}: present in checkpoint but not in model")
    for name, p in own.items():
        p.data = tensors[name].astype(p.dtype)
    return model


# -- training loop -----------------------------------------------------------------------


class Trainer:
    """Owns the model, optimizer and bookkeeping for successive epochs."""

    def __init__(self, model: Generator, cfg: TrainConfig, run_dir=None):
        self.model = model
        self.cfg = cfg
        self.opt = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.best_val = -math.inf
        self.epoch = 0
        self.history: list[dict] = []

    def step(self, item: PreparedItem) -> dict[str, float]:
        out = self.model(item.features)
        loss, comps = total_loss(out, item.target, self.cfg, self.model.cfg.stft)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite loss {value} on item {item.item_id!r}")
        self.opt.zero_grad()
        loss.backward()
        comps["grad_norm"] = clip_grad_norm(self.opt.params, self.cfg.grad_clip)
        if not math.isfinite(comps["grad_norm"]):
            raise TrainingAborted(f"non-finite gradient on item {item.item_id!r}")
        self.opt.step()
        comps["total"] = value
        return comps

    def prepare(self, item: dict, rng: np.random.Generator) -> PreparedItem:
        stft_cfg = self.model.cfg.stft
        item = crop(item, self.cfg.crop_seconds, rng, stft_cfg.sample_rate)
        return prepare_item(item["id"], item["noisy"], item["clean"], stft_cfg)

    def train_epoch(self, items: Sequence[dict], val_items: Sequence[dict] = (), max_steps: Optional[int] = None
                    ) -> dict:
        if not items:
            raise ValueError("train_epoch: no training items")
        t0 = time.perf_counter()
        epoch = self.epoch
        rng = np.random.default_rng([self.cfg.seed, epoch])
        self.opt.lr = self.cfg.lr_at(epoch)
        order = rng.permutation(len(items))
        if max_steps is not None:
            order = order[:max_steps]
        sums = {k: 0.0 for k in LOSS_KEYS + ("total",)}
        for idx in order:
            comps = self.step(self.prepare(items[idx], rng))
            for k in sums:
                sums[k] += comps[k]
        stats = {"epoch": epoch, "lr": self.opt.lr, "steps": len(order)}
        stats.update({k: v / len(order) for k, v in sums.items()})
        stats["val_si_sdr"] = self.validate(val_items) if val_items else None
        stats["wall_seconds"] = time.perf_counter() - t0
        if stats["val_si_sdr"] is not None and stats["val_si_sdr"] > self.best_val:
            self.best_val = stats["val_si_sdr"]
            if self.run_dir is not None:
                save_checkpoint(self.model, self.run_dir / "best.ckpt", {"epoch": epoch, "val_si_sdr": self.best_val,
                                                                        "train_config": self.cfg.to_dict()})
        if self.run_dir is not None:
            save_checkpoint(self.model, self.run_dir / "last.ckpt", {"epoch": epoch,
                                                                    "train_config": self.cfg.to_dict()})
            with open(self.run_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(stats, sort_keys=True) + "\n")
        self.history.append(stats)
        self.epoch += 1
        log.info("epoch %d lr %.3g loss %.4f val_si_sdr %s", epoch, stats["lr"], stats["total"], stats["val_si_sdr"])
        return stats

    def validate(self, items: Sequence[dict]) -> float:
        from .enhance import enhance_waveform
        return float(np.mean([si_sdr(it["clean"], enhance_waveform(self.model, it["noisy"])) for it in items]))

    def fit(self, items, val_items=(), epochs: Optional[int] = None) -> list[dict]:
        for _ in range(epochs if epochs is not None else self.cfg.epochs):
            self.train_epoch(items, val_items)
        return self.history


def train_epoch(trainer: Trainer, items, val_items=(), epoch_idx: Optional[int] = None) -> dict:
    if epoch_idx is not None:
        trainer.epoch = epoch_idx
    return trainer.train_epoch(items, val_items)
