"""Multi-channel generator: input projection, dense encoder, TF-Mamba stack, mask and phase decoders."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv2d, ConvTranspose2d, InstanceNorm2d, Module, PReLU
from .autodiff.tensor import ShapeError, Tensor, get_default_dtype, no_grad, parameter
from .blocks import MambaUnitConfig, TFBlock
from .dsp import StftConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_mics: int = 6
    c_mid: int = 64
    n_tf_blocks: int = 4
    densenet_depth: int = 4
    densenet_dilations: tuple[int, ...] = (1, 2, 4, 8)
    mask_beta: float = 2.0
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    tconv_kernel: int = 4
    reference_index: int = 4
    scan_mode: str = "sequential"
    chunk: int = 16
    share_direction_weights: bool = False
    desk_scale: bool = False
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if min(self.n_mics, self.c_mid, self.n_tf_blocks, self.densenet_depth, self.d_state) < 1:
            raise ConfigError("all counts must be >= 1")
        if len(self.densenet_dilations) != self.densenet_depth:
            raise ConfigError("densenet_dilations must have densenet_depth entries")
        if not 0 <= self.reference_index < self.n_mics:
            raise ConfigError(f"reference_index {self.reference_index} outside 0..{self.n_mics - 1}")
        if self.share_direction_weights:
            raise ConfigError("shared forward/backward weights are not implemented")

    @classmethod
    def full(cls, n_mics: int = 6, **kw) -> "ModelConfig":
        kw.setdefault("reference_index", min(4, n_mics - 1))
        return cls(n_mics=n_mics, **kw)

    @classmethod
    def desk(cls, n_mics: int = 6, **kw) -> "ModelConfig":
        kw.setdefault("reference_index", min(4, n_mics - 1))
        base = dict(c_mid=16, n_tf_blocks=2, d_state=8, desk_scale=True)
        base.update(kw)
        return cls(n_mics=n_mics, **base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["densenet_dilations"] = list(self.densenet_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("stft"), dict):
            d["stft"] = StftConfig(**d["stft"])
        if "densenet_dilations" in d:
            d["densenet_dilations"] = tuple(d["densenet_dilations"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    @property
    def n_bins(self) -> int:
        return self.stft.n_bins

    @property
    def n_bins_coarse(self) -> int:
        return (self.n_bins - 1) // 2 + 1


@dataclass
class GeneratorOutput:
    y_cmag: Tensor
    y_pha: Tensor
    mask: Tensor


class DenseLayer(Module):
    def __init__(self, c_in, c_out, dilation, rng):
        self.conv = Conv2d(c_in, c_out, (3, 3), dilation=(dilation, 1), padding=(dilation, 1), rng=rng)
        self.norm = InstanceNorm2d(c_out)
        self.act = PReLU(c_out)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DilatedDenseNet(Module):
    """Layer i sees the concatenation of the input and all earlier layer outputs."""

    def __init__(self, channels: int, dilations: Sequence[int], rng=None):
        rng = rng or np.random.default_rng(0)
        self.layers = [DenseLayer(channels * (i + 1), channels, d, rng) for i, d in enumerate(dilations)]

    def forward(self, x):
        skip = x
        out = x
        for i, layer in enumerate(self.layers):
            out = layer(skip)
            if i + 1 < len(self.layers):
                skip = ops.concat([out, skip], axis=1)
        return out


def dilated_densenet(x: Tensor, net: DilatedDenseNet) -> Tensor:
    return net(x)


class DenseEncoder(Module):
    """``g_cnn`` (1x1, 2M -> c) + IN + PReLU, dilated DenseNet, then a (1, 3) stride-(1, 2) conv halving frequency."""

    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        c = cfg.c_mid
        self.g_cnn = Conv2d(2 * cfg.n_mics, c, (1, 1), rng=rng)
        self.norm_in = InstanceNorm2d(c)
        self.act_in = PReLU(c)
        self.densenet = DilatedDenseNet(c, cfg.densenet_dilations, rng=rng)
        self.conv_out = Conv2d(c, c, (1, 3), stride=(1, 2), padding=(0, 1), rng=rng)
        self.norm_out = InstanceNorm2d(c)
        self.act_out = PReLU(c)

    def project(self, features: Tensor) -> Tensor:
        return self.g_cnn(features)

    def forward(self, projected: Tensor) -> Tensor:
        x = self.act_in(self.norm_in(projected))
        x = self.densenet(x)
        return self.act_out(self.norm_out(self.conv_out(x)))


class _DecoderTrunk(Module):
    def __init__(self, cfg: ModelConfig, rng):
        c = cfg.c_mid
        self.densenet = DilatedDenseNet(c, cfg.densenet_dilations, rng=rng)
        self.up = ConvTranspose2d(c, c, (1, 3), stride=(1, 2), padding=(0, 1), rng=rng)
        self.norm = InstanceNorm2d(c)
        self.act = PReLU(c)
        self._n_bins = cfg.n_bins

    def trunk(self, h: Tensor) -> Tensor:
        x = self.up(self.densenet(h))
        if x.shape[3] != self._n_bins:
            x = ops.slice(x, 3, 0, self._n_bins)
        return self.act(self.norm(x))


class MaskDecoder(_DecoderTrunk):
    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        super().__init__(cfg, rng)
        self.head = Conv2d(cfg.c_mid, 1, (1, 1), rng=rng)
        self.slope = parameter(np.ones(cfg.n_bins, dtype=get_default_dtype()))
        self._beta = cfg.mask_beta

    def forward(self, h: Tensor, x_cmag_ref: Tensor) -> tuple[Tensor, Tensor]:
        z = self.head(self.trunk(h))                               # (B, 1, T, F)
        z = ops.reshape(z, (z.shape[0], z.shape[2], z.shape[3]))
        mask = ops.mul(ops.sigmoid(ops.mul(z, self.slope)), self._beta)
        return mask, ops.mul(mask, x_cmag_ref)


class PhaseDecoder(_DecoderTrunk):
    def __init__(self, cfg: ModelConfig, rng=None):
        rng = rng or np.random.default_rng(0)
        super().__init__(cfg, rng)
        self.head_r = Conv2d(cfg.c_mid, 1, (1, 1), rng=rng)
        self.head_i = Conv2d(cfg.c_mid, 1, (1, 1), rng=rng)

    def forward(self, h: Tensor) -> Tensor:
        x = self.trunk(h)
        r, i = self.head_r(x), self.head_i(x)
        b, _, t, f = r.shape
        return ops.atan2(ops.reshape(i, (b, t, f)), ops.reshape(r, (b, t, f)))


def mask_decoder(h: Tensor, x_cmag_ref: Tensor, dec: MaskDecoder) -> tuple[Tensor, Tensor]:
    return dec(h, x_cmag_ref)


def phase_decoder(h: Tensor, dec: PhaseDecoder) -> Tensor:
    return dec(h)


class Generator(Module):
    """Maps packed multi-channel features ``(B, 2M, T, F)`` to the reference channel's (cmag, phase)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        unit = MambaUnitConfig(cfg.c_mid, cfg.expand, cfg.d_conv, cfg.d_state, cfg.scan_mode, cfg.chunk)
        self.encoder = DenseEncoder(cfg, rng=rng)
        self.tf_blocks = [TFBlock(cfg.c_mid, unit, cfg.tconv_kernel, rng=rng) for _ in range(cfg.n_tf_blocks)]
        self.mask_decoder = MaskDecoder(cfg, rng=rng)
        self.phase_decoder = PhaseDecoder(cfg, rng=rng)

    def input_proj(self, features) -> Tensor:
        features = _batched(features)
        if features.shape[1] != 2 * self.cfg.n_mics:
            raise ConfigError(f"features carry {features.shape[1] // 2} microphones, model expects {self.cfg.n_mics}")
        return self.encoder.project(features)

    def forward(self, features, x_cmag_ref=None) -> GeneratorOutput:
        """``features``: ``(2M, T, F)`` or ``(B, 2M, T, F)``.

        ``x_cmag_ref`` defaults to the reference microphone's cmag plane of
        ``features``.  Unbatched input gives ``(T, F)`` outputs.
        """
        single = _ndim(features) == 3
        features = _batched(features)
        if x_cmag_ref is None:
            r = self.cfg.reference_index
            x_cmag_ref = Tensor(features.data[:, 2 * r], dtype=features.dtype)
        else:
            x_cmag_ref = _as(x_cmag_ref, features.dtype)
            if x_cmag_ref.ndim == 2:
                x_cmag_ref = ops.reshape(x_cmag_ref, (1,) + x_cmag_ref.shape)
        if features.shape[3] != self.cfg.n_bins:
            raise ShapeError(f"expected {self.cfg.n_bins} frequency bins, got {features.shape[3]}")
        h = self.encoder(self.input_proj(features))
        for block in self.tf_blocks:
            h = block(h)
        mask, y_cmag = self.mask_decoder(h, x_cmag_ref)
        y_pha = self.phase_decoder(h)
        if single:
            mask, y_cmag, y_pha = (ops.reshape(t, t.shape[1:]) for t in (mask, y_cmag, y_pha))
        return GeneratorOutput(y_cmag=y_cmag, y_pha=y_pha, mask=mask)


def _ndim(x) -> int:
    return x.ndim if isinstance(x, Tensor) else np.ndim(x)


def _as(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _batched(features) -> Tensor:
    features = _as(features, get_default_dtype())
    if features.ndim == 3:
        features = ops.reshape(features, (1,) + features.shape)
    if features.ndim != 4:
        raise ShapeError(f"features must be (2M, T, F) or (B, 2M, T, F), got {features.shape}")
    return features


def model_forward(features, x_cmag_ref, model: Generator) -> GeneratorOutput:
    return model(features, x_cmag_ref)


def input_proj(features, model: Generator) -> Tensor:
    return model.input_proj(features)


def dense_encoder(x: Tensor, model: Generator) -> Tensor:
    return model.encoder(x)


def param_count(cfg: ModelConfig) -> dict[str, int]:
    """Parameter count per top-level module path plus ``total``."""
    model = Generator(cfg)
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("encoder", "tf_blocks") else parts[0]
        out[key] = out.get(key, 0) + p.size
    out["total"] = sum(v for k, v in out.items())
    return out


def enhance_spectra(model: Generator, features: np.ndarray) -> GeneratorOutput:
    with no_grad():
        return model(features)
