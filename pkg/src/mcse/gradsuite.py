"""Finite-difference suite covering every registered operator and the main composite subgraphs."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import OPS, ops
from .autodiff.gradcheck import GradCheckReport, grad_check
from .autodiff.tensor import Tensor, parameter, precision
from .blocks import MambaUnit, MambaUnitConfig, TFBlock
from .dsp import StftConfig, istft_op
from .network import Generator, ModelConfig
from .ssm import selective_scan

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], dict]]


def _p(rng, *shape, low=None, high=None):
    if low is not None:
        return parameter(rng.uniform(low, high, size=shape))
    return parameter(rng.standard_normal(shape))


def _away_from_zero(rng, *shape, margin=0.2):
    v = rng.uniform(margin, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return parameter(v)


def _unary(fn, **kw):
    def case(rng):
        a = _p(rng, 3, 4, **kw)
        return (lambda: fn(a)), {"a": a}
    return case


def _binary(fn, broadcast=False):
    def case(rng):
        a = _p(rng, 3, 4)
        b = _p(rng, 4) if broadcast else _p(rng, 3, 4)
        return (lambda: fn(a, b)), {"a": a, "b": b}
    return case


def _case_reciprocal(rng):
    a = _away_from_zero(rng, 3, 4, margin=0.5)
    return (lambda: ops.reciprocal(a)), {"a": a}


def _case_abs(rng):
    a = _away_from_zero(rng, 3, 4)
    return (lambda: ops.abs(a)), {"a": a}


def _case_prelu(rng):
    x = _away_from_zero(rng, 2, 3, 4)
    s = _p(rng, 3)
    return (lambda: ops.prelu(x, s, axis=1)), {"x": x, "slope": s}


def _case_atan2(rng):
    y = _p(rng, 3, 4)
    x = _p(rng, 3, 4)
    x.data = np.abs(x.data) + 0.3      # stay clear of the branch cut
    return (lambda: ops.atan2(y, x)), {"y": y, "x": x}


def _case_reshape(rng):
    a = _p(rng, 3, 4)
    return (lambda: ops.reshape(a, (2, 6)) * Tensor(np.arange(12.0).reshape(2, 6))), {"a": a}


def _case_permute(rng):
    a = _p(rng, 2, 3, 4)
    return (lambda: ops.permute(a, (2, 0, 1))), {"a": a}


def _case_flip(rng):
    a = _p(rng, 3, 4)
    return (lambda: ops.flip(a, 1)), {"a": a}


def _case_concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    return (lambda: ops.concat([a, b], axis=1)), {"a": a, "b": b}


def _case_getitem(rng):
    a = _p(rng, 4, 5)
    return (lambda: ops.getitem(a, (slice(1, 3), slice(None, None, 2)))), {"a": a}


def _case_pad(rng):
    a = _p(rng, 3, 4)
    return (lambda: ops.pad(a, ((1, 0), (2, 1)))), {"a": a}


def _case_reduce(fn):
    def case(rng):
        a = _p(rng, 3, 4)
        return (lambda: fn(a, axis=1, keepdims=True)), {"a": a}
    return case


def _case_matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return (lambda: ops.matmul(a, b)), {"a": a, "b": b}


def _case_dense(rng):
    x, w, b = _p(rng, 2, 3, 4), _p(rng, 4, 5), _p(rng, 5)
    return (lambda: ops.dense(x, w, b)), {"x": x, "w": w, "b": b}


def _case_instance_norm(rng):
    x, w, b = _p(rng, 2, 3, 4, 5), _p(rng, 3), _p(rng, 3)
    return (lambda: ops.instance_norm(x, w, b)), {"x": x, "w": w, "b": b}


def _case_conv2d(rng):
    x, w, b = _p(rng, 2, 3, 6, 7), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    return (lambda: ops.conv2d(x, w, b, stride=(1, 2), dilation=(2, 1), padding=((2, 2), (1, 1)))), \
        {"x": x, "w": w, "b": b}


def _case_conv_transpose2d(rng):
    x, w, b = _p(rng, 2, 3, 4, 5), _p(rng, 3, 2, 1, 3), _p(rng, 2)
    return (lambda: ops.conv_transpose2d(x, w, b, stride=(1, 2), padding=(0, 1))), {"x": x, "w": w, "b": b}


def _case_depthwise_conv1d(rng):
    x, w, b = _p(rng, 2, 6, 3), _p(rng, 3, 4), _p(rng, 3)
    return (lambda: ops.depthwise_conv1d(x, w, b, causal=True)), {"x": x, "w": w, "b": b}


def _case_conv_transpose1d(rng):
    x, w, b = _p(rng, 2, 6, 4), _p(rng, 4, 3, 4), _p(rng, 3)
    return (lambda: ops.conv_transpose1d(x, w, b, crop=(1, 2))), {"x": x, "w": w, "b": b}


def _case_selective_scan(mode):
    def case(rng):
        u = _p(rng, 2, 9, 3)
        delta = _p(rng, 2, 9, 3, low=0.05, high=0.8)
        A = _p(rng, 3, 4, low=-2.0, high=-0.2)
        B, C = _p(rng, 2, 9, 4), _p(rng, 2, 9, 4)
        return (lambda: selective_scan(u, delta, A, B, C, mode=mode, chunk=4)), \
            {"u": u, "delta": delta, "A": A, "B": B, "C": C}
    return case


def _case_istft(rng):
    cfg = StftConfig(window_len=8, hop=2, fft_len=8)
    re, im = _p(rng, 6, 5), _p(rng, 6, 5)
    return (lambda: istft_op(re, im, cfg, 10)), {"real": re, "imag": im}


OP_CASES: dict[str, Case] = {
    "add": _binary(ops.add, broadcast=True),
    "sub": _binary(ops.sub, broadcast=True),
    "mul": _binary(ops.mul, broadcast=True),
    "reciprocal": _case_reciprocal,
    "power": lambda rng: (lambda a: ((lambda: ops.power(a, 1.0 / 0.3)), {"a": a}))(_p(rng, 3, 4, low=0.2, high=2.0)),
    "square": _unary(ops.square),
    "abs": _case_abs,
    "exp": _unary(ops.exp),
    "cos": _unary(ops.cos),
    "sin": _unary(ops.sin),
    "sigmoid": _unary(ops.sigmoid),
    "softplus": _unary(ops.softplus),
    "silu": _unary(ops.silu),
    "prelu": _case_prelu,
    "atan2": _case_atan2,
    "reshape": _case_reshape,
    "permute": _case_permute,
    "flip": _case_flip,
    "concat": _case_concat,
    "getitem": _case_getitem,
    "pad": _case_pad,
    "sum": _case_reduce(ops.sum),
    "mean": _case_reduce(ops.mean),
    "matmul": _case_matmul,
    "dense": _case_dense,
    "instance_norm": _case_instance_norm,
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "depthwise_conv1d": _case_depthwise_conv1d,
    "conv_transpose1d": _case_conv_transpose1d,
    "selective_scan": _case_selective_scan("sequential"),
    "selective_scan[chunked]": _case_selective_scan("chunked"),
    "istft": _case_istft,
}


def _named(module) -> dict:
    return dict(module.named_parameters())


def _case_mamba_unit(rng):
    unit = MambaUnit(MambaUnitConfig(d_model=3, expand=2, d_conv=4, d_state=4), rng=rng)
    x = _p(rng, 2, 7, 3)
    return (lambda: unit(x)), dict(_named(unit), x=x)


def _case_tf_block(rng):
    block = TFBlock(3, MambaUnitConfig(d_model=3, d_state=3), tconv_kernel=4, rng=rng)
    x = _p(rng, 1, 3, 5, 4)
    return (lambda: block(x)), dict(_named(block), x=x)


def toy_generator_config() -> ModelConfig:
    return ModelConfig(n_mics=2, c_mid=3, n_tf_blocks=1, densenet_depth=2, densenet_dilations=(1, 2),
                       d_state=3, reference_index=1, stft=StftConfig(window_len=8, hop=2, fft_len=8))


def _case_generator(rng):
    model = Generator(toy_generator_config(), seed=int(rng.integers(1 << 31)))
    feats = np.abs(rng.standard_normal((4, 6, 5))) + 0.1

    def fn():
        out = model(feats)
        return ops.concat([out.y_cmag, out.y_pha], axis=0)
    return fn, _named(model)


COMPOSITE_CASES: dict[str, Case] = {
    "composite:mamba_unit": _case_mamba_unit,
    "composite:tf_block": _case_tf_block,
    "composite:generator": _case_generator,
}


def missing_op_cases() -> list[str]:
    covered = {k.split("[")[0] for k in OP_CASES}
    return sorted(set(OPS) - covered)


def run_case(name: str, case: Case, seed: int = 0, max_elems=None) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        fn, params = case(rng)
        return grad_check(fn, params, seed=seed, max_elems=max_elems)


def run_suite(seed: int = 0, composite_elems: int = 6) -> dict[str, GradCheckReport]:
    """Every registered op plus the Mamba unit, TF block and a toy generator, in float64."""
    missing = missing_op_cases()
    if missing:
        raise RuntimeError(f"no gradient case for registered op(s): {missing}")
    reports = {name: run_case(name, case, seed) for name, case in OP_CASES.items()}
    for name, case in COMPOSITE_CASES.items():
        reports[name] = run_case(name, case, seed, max_elems=composite_elems)
    return reports
