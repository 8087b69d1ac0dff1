"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ops import OPS
from .tensor import Tensor, graph_nodes, no_grad

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_op: Optional[str]
    passed: bool
    per_parameter: dict[str, float] = field(default_factory=dict)
    per_op: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        state = "PASS" if self.passed else f"FAIL (op: {self.failing_op})"
        return f"{state} max relative error {self.max_rel_error:.3e}"


def _rel(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation relative to the gradient's own scale."""
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _sample(n: int, k: Optional[int], rng) -> np.ndarray:
    if k is None or n <= k:
        return np.arange(n)
    return rng.choice(n, size=k, replace=False)


def _projected_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    from . import ops
    return ops.sum(ops.mul(out, Tensor(weights, dtype=out.dtype)))


def check_node(node: Tensor, rng, step: float = STEP, max_elems: Optional[int] = 12) -> float:
    """Compare one recorded op's backward against central differences of its own forward."""
    fn = OPS[node.op]
    parents = node.parents
    cot = rng.standard_normal(node.shape)

    def replay(values: Sequence[np.ndarray]) -> np.ndarray:
        args = [Tensor(v, dtype=v.dtype) for v in values]
        with no_grad():
            out = fn(args, **node.attrs) if fn.variadic else fn(*args, **node.attrs)
        return out.data

    base = [p.data.astype(np.float64) for p in parents]
    analytic = node.backward_fn(cot.astype(node.dtype))
    worst = 0.0
    for i, p in enumerate(parents):
        if not p.requires_grad or analytic[i] is None:
            continue
        flat_idx = _sample(p.size, max_elems, rng)
        num = np.empty(len(flat_idx))
        for j, k in enumerate(flat_idx):
            vals = [b.copy() for b in base]
            vals[i].flat[k] += step
            fp = (replay(vals) * cot).sum()
            vals[i].flat[k] -= 2 * step
            fm = (replay(vals) * cot).sum()
            num[j] = (fp - fm) / (2 * step)
        worst = max(worst, _rel(np.asarray(analytic[i], dtype=np.float64).flat[flat_idx], num))
    return worst


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[tuple[str, Tensor]],
               seed: int = 0, step: float = STEP, tol: float = TOLERANCE,
               max_elems: Optional[int] = None, check_ops: bool = True,
               op_elems: Optional[int] = 12) -> GradCheckReport:
    """Check every parameter gradient of ``fn()`` against central differences.

    ``fn`` rebuilds the graph from the current parameter values; its output
    is reduced with a fixed random projection to a scalar.  Run it under
    ``precision(np.float64)``.  With ``check_ops`` each recorded op is also
    checked in isolation so a failure names the offending operator.
    ``max_elems`` samples that many entries per parameter (None = all).
    """
    rng = np.random.default_rng(seed)
    params = dict(params)
    out = fn()
    weights = rng.standard_normal(out.shape)
    for p in params.values():
        p.grad = None
    loss = _projected_loss(out, weights)
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    def scalar() -> float:
        with no_grad():
            return float((fn().data * weights).sum())

    abs_err: dict[str, float] = {}
    scale = 0.0
    for name, p in params.items():
        idx = _sample(p.size, max_elems, rng)
        num = np.empty(len(idx))
        flat = p.data.reshape(-1)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + step
            fp = scalar()
            flat[k] = orig - step
            fm = scalar()
            flat[k] = orig
            num[j] = (fp - fm) / (2 * step)
        a = analytic[name].reshape(-1)[idx]
        abs_err[name] = float(np.abs(a - num).max(initial=0.0))
        scale = max(scale, np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
    for p in params.values():
        p.grad = None
    # Errors are measured against the scale of the whole gradient, so a
    # parameter whose true gradient is ~0 (a bias feeding a norm) is not
    # judged on finite-difference rounding alone.
    per_param = {k: (v / scale if scale > 0 else 0.0) for k, v in abs_err.items()}

    per_op: dict[str, float] = {}
    if check_ops:
        for node in graph_nodes(out):
            if node.backward_fn is None or node.op not in OPS:
                continue
            err = check_node(node, rng, step, op_elems)
            per_op[node.op] = max(per_op.get(node.op, 0.0), err)

    worst_param = max(per_param.values(), default=0.0)
    worst_op = max(per_op.values(), default=0.0)
    failing = None
    if worst_op > tol:
        failing = max(per_op, key=per_op.get)
    elif worst_param > tol:
        failing = "composite:" + max(per_param, key=per_param.get)
    worst = max(worst_param, worst_op)
    return GradCheckReport(worst, failing, worst <= tol, per_param, per_op)
