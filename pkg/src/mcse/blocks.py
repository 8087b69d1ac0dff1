"""Gated Mamba unit and the bidirectional time/frequency block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ops
from .autodiff.nn import ConvTranspose1d, DepthwiseConv1d, Linear, Module
from .autodiff.tensor import ShapeError, Tensor
from .ssm import S6


@dataclass(frozen=True)
class MambaUnitConfig:
    d_model: int
    expand: int = 2
    d_conv: int = 4
    d_state: int = 16
    scan_mode: str = "sequential"
    chunk: int = 16

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


class MambaUnit(Module):
    """in_proj -> (h, z); h: causal depthwise conv -> SiLU -> S6; gate with SiLU(z); out_proj."""

    def __init__(self, cfg: MambaUnitConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.in_proj = Linear(cfg.d_model, 2 * cfg.d_inner, rng=rng)
        self.conv1d = DepthwiseConv1d(cfg.d_inner, cfg.d_conv, causal=True, rng=rng)
        self.s6 = S6(cfg.d_inner, cfg.d_state, scan_mode=cfg.scan_mode, chunk=cfg.chunk, rng=rng)
        self.out_proj = Linear(cfg.d_inner, cfg.d_model, rng=rng)
        self._cfg = cfg

    def forward(self, x: Tensor) -> Tensor:
        """``x``: ``(S, L, d_model)`` -> same shape."""
        if x.shape[-1] != self._cfg.d_model:
            raise ShapeError(f"MambaUnit expects {self._cfg.d_model} channels, got {x.shape[-1]}")
        di = self._cfg.d_inner
        hz = self.in_proj(x)
        h = ops.slice(hz, 2, 0, di)
        z = ops.slice(hz, 2, di, 2 * di)
        h = ops.silu(self.conv1d(h))
        h = self.s6(h)
        return self.out_proj(ops.mul(h, ops.silu(z)))


def mamba_unit(x: Tensor, unit: MambaUnit) -> Tensor:
    return unit(x)


def bidirectional_mamba(x: Tensor, fwd: MambaUnit, bwd: MambaUnit) -> Tensor:
    """Concatenate a forward pass and a time-reversed backward pass along channels."""
    a = fwd(x)
    b = ops.flip(bwd(ops.flip(x, 1)), 1)
    return ops.concat([a, b], axis=2)


class BiMambaPass(Module):
    """One axis of a TF block: bidirectional Mamba, 2C -> C transposed conv, residual."""

    def __init__(self, d_model: int, unit_cfg: MambaUnitConfig, tconv_kernel: int = 4,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.fwd = MambaUnit(unit_cfg, rng=rng)
        self.bwd = MambaUnit(unit_cfg, rng=rng)
        self.tconv = ConvTranspose1d(2 * d_model, d_model, tconv_kernel, rng=rng)

    def forward(self, seq: Tensor) -> Tensor:
        return ops.add(self.tconv(bidirectional_mamba(seq, self.fwd, self.bwd)), seq)


class TFBlock(Module):
    """Time pass over each frequency bin's frame sequence, then frequency pass over each frame."""

    def __init__(self, d_model: int, unit_cfg: Optional[MambaUnitConfig] = None, tconv_kernel: int = 4,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        unit_cfg = unit_cfg or MambaUnitConfig(d_model)
        self.time = BiMambaPass(d_model, unit_cfg, tconv_kernel, rng=rng)
        self.freq = BiMambaPass(d_model, unit_cfg, tconv_kernel, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        """``x``: ``(B, C, T, F)`` -> same shape."""
        b, c, t, f = x.shape
        seq = ops.reshape(ops.permute(x, (0, 3, 2, 1)), (b * f, t, c))
        seq = self.time(seq)
        x = ops.permute(ops.reshape(seq, (b, f, t, c)), (0, 2, 1, 3))     # (B, T, F, C)
        seq = ops.reshape(x, (b * t, f, c))
        seq = self.freq(seq)
        return ops.permute(ops.reshape(seq, (b, t, f, c)), (0, 3, 1, 2))


def tf_block(x: Tensor, block: TFBlock) -> Tensor:
    return block(x)
