"""Named-parameter containers and the handful of layers the generator uses."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, get_default_dtype, parameter


class Module:
    """Parameter container.

    Parameters are the ``requires_grad`` tensors found in instance attributes,
    recursively through sub-modules and lists of sub-modules.  Names are dotted
    attribute paths (``encoder.g_cnn.weight``) and follow attribute
    assignment order, so they are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=(1, 1), stride=1, dilation=1, padding=0,
                 bias=True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        kh, kw = ops._pair(kernel)
        bound = 1.0 / math.sqrt(c_in * kh * kw)
        self.weight = parameter(_uniform(rng, bound, (c_out, c_in, kh, kw)))
        self.bias = parameter(_uniform(rng, bound, (c_out,))) if bias else None
        self._conf = dict(stride=stride, dilation=dilation, padding=padding)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, **self._conf)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel=(1, 3), stride=(1, 2), padding=(0, 1),
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        kh, kw = ops._pair(kernel)
        bound = 1.0 / math.sqrt(c_out * kh * kw)
        self.weight = parameter(_uniform(rng, bound, (c_in, c_out, kh, kw)))
        self.bias = parameter(_uniform(rng, bound, (c_out,)))
        self._conf = dict(stride=stride, padding=padding)

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, **self._conf)


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(d_in)
        self.weight = parameter(_uniform(rng, bound, (d_in, d_out)))
        self.bias = parameter(_uniform(rng, bound, (d_out,))) if bias else None

    def forward(self, x):
        return ops.dense(x, self.weight, self.bias)


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5):
        dt = get_default_dtype()
        self.weight = parameter(np.ones(channels, dtype=dt))
        self.bias = parameter(np.zeros(channels, dtype=dt))
        self._eps = eps

    def forward(self, x):
        return ops.instance_norm(x, self.weight, self.bias, eps=self._eps)


class PReLU(Module):
    def __init__(self, channels, init=0.25, axis=1):
        self.weight = parameter(np.full(channels, init, dtype=get_default_dtype()))
        self._axis = axis

    def forward(self, x):
        return ops.prelu(x, self.weight, axis=self._axis)


class DepthwiseConv1d(Module):
    def __init__(self, channels, kernel, causal=True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(kernel)
        self.weight = parameter(_uniform(rng, bound, (channels, kernel)))
        self.bias = parameter(_uniform(rng, bound, (channels,)))
        self._causal = causal

    def forward(self, x):
        return ops.depthwise_conv1d(x, self.weight, self.bias, causal=self._causal)


class ConvTranspose1d(Module):
    """Length-preserving stride-1 transposed conv; odd total crop puts the extra sample on the right."""

    def __init__(self, c_in, c_out, kernel, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(c_out * kernel)
        self.weight = parameter(_uniform(rng, bound, (c_in, c_out, kernel)))
        self.bias = parameter(_uniform(rng, bound, (c_out,)))
        left = (kernel - 1) // 2
        self._crop = (left, kernel - 1 - left)

    def forward(self, x):
        return ops.conv_transpose1d(x, self.weight, self.bias, crop=self._crop)
