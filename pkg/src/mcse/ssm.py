"""Selective state-space layer (S6).

Per channel ``d`` of a ``d_inner``-wide sequence the layer runs an
independent diagonal linear recurrence of state size ``N``::

    x_t = Abar_t * x_{t-1} + Bbar_t * u_t
    y_t = C_t . x_t

where ``Abar_t = exp(delta_t * A)`` (zero-order hold on a negative diagonal
``A``), ``Bbar_t = delta_t * B_t`` and ``delta_t, B_t, C_t`` are computed
from the input at step ``t``.  ``delta`` goes through a low-rank projection
and a softplus so it is always positive, which keeps every ``Abar`` in (0, 1).
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import ops
from .autodiff.nn import Linear, Module
from .autodiff.ops import register
from .autodiff.tensor import ContractError, ShapeError, Tensor, get_default_dtype, parameter

SCAN_MODES = ("sequential", "chunked")


def dt_rank_for(d_inner: int) -> int:
    return max(1, d_inner // 16)


class S6(Module):
    """Input-dependent SSM over channels-last sequences ``(S, L, d_inner)``.

    Parameters: ``x_proj`` maps each step to ``[dt_low | B | C]`` (no bias),
    ``dt_proj`` lifts the low-rank part back to ``d_inner`` with a bias, and
    ``A_log`` stores ``log(-A)``.
    """

    def __init__(self, d_inner: int, d_state: int = 16, dt_min: float = 1e-3, dt_max: float = 0.1,
                 scan_mode: str = "sequential", chunk: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        if scan_mode not in SCAN_MODES:
            raise ValueError(f"scan_mode must be one of {SCAN_MODES}")
        self.d_inner, self.d_state = d_inner, d_state
        self.dt_rank = dt_rank_for(d_inner)
        self.x_proj = Linear(d_inner, self.dt_rank + 2 * d_state, bias=False, rng=rng)
        self.dt_proj = Linear(self.dt_rank, d_inner, rng=rng)
        dt_bound = self.dt_rank ** -0.5
        self.dt_proj.weight.data = rng.uniform(-dt_bound, dt_bound, (self.dt_rank, d_inner)).astype(get_default_dtype())
        # bias = softplus^-1(dt) with dt log-uniform in [dt_min, dt_max]
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), d_inner))
        self.dt_proj.bias.data = (dt + np.log(-np.expm1(-dt))).astype(get_default_dtype())
        a = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))
        self.A_log = parameter(np.log(a).astype(get_default_dtype()))
        self._scan_mode = scan_mode
        self._chunk = chunk

    def forward(self, u: Tensor) -> Tensor:
        return s6_forward(u, self)


def selective_params(u: Tensor, p: S6) -> tuple[Tensor, Tensor, Tensor]:
    """``(delta, B, C)`` for every step of ``u`` (shape ``(..., L, d_inner)``)."""
    if u.shape[-1] != p.d_inner:
        raise ShapeError(f"selective_params: expected {p.d_inner} channels, got {u.shape[-1]}")
    proj = p.x_proj(u)
    r, n = p.dt_rank, p.d_state
    last = proj.ndim - 1
    dt_low = ops.slice(proj, last, 0, r)
    B = ops.slice(proj, last, r, r + n)
    C = ops.slice(proj, last, r + n, r + 2 * n)
    delta = ops.softplus(p.dt_proj(dt_low))
    return delta, B, C


def discretize(A, B, delta) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for ``A`` and Euler for ``B``.

    ``A`` is ``(D, N)`` and strictly negative, ``B`` is ``(..., L, N)``,
    ``delta`` is ``(..., L, D)`` and strictly positive.  Returns
    ``(Abar, Bbar)`` each of shape ``(..., L, D, N)``.
    """
    A, B, delta = np.asarray(A), np.asarray(B), np.asarray(delta)
    if np.any(delta <= 0):
        raise ContractError("discretize: step sizes must be strictly positive")
    if np.any(A >= 0):
        raise ContractError("discretize: state matrix must be strictly negative")
    abar = np.exp(delta[..., :, :, None] * A)
    bbar = delta[..., :, :, None] * B[..., :, None, :]
    return abar, bbar


def ssm_scan(abar, bbar, C, u, x0=None, mode: str = "sequential", chunk: int = 16,
             return_state: bool = False):
    """Run the discretized recurrence.

    ``abar, bbar``: ``(L, D, N)`` or batched ``(S, L, D, N)``; ``C``: ``(.., L, N)``;
    ``u``: ``(.., L, D)``; ``x0``: ``(.., D, N)`` or None for the zero state.
    ``mode`` picks the sequential kernel or the blocked evaluation with
    blocks of ``chunk`` steps.
    """
    abar, bbar, C, u = (np.asarray(v) for v in (abar, bbar, C, u))
    single = abar.ndim == 3
    if single:
        abar, bbar, C, u = abar[None], bbar[None], C[None], u[None]
        if x0 is not None:
            x0 = np.asarray(x0)[None]
    if abar.shape != bbar.shape or abar.shape[:3] != u.shape or C.shape != abar.shape[:2] + abar.shape[3:]:
        raise ShapeError(f"ssm_scan: inconsistent shapes {abar.shape}, {bbar.shape}, {C.shape}, {u.shape}")
    b = bbar * u[..., None]
    if mode == "sequential":
        hs = kernels.linear_scan(abar, b, x0)
    elif mode == "chunked":
        hs = kernels.linear_scan_chunked(abar, b, x0, chunk=chunk)
    else:
        raise ValueError(f"unknown scan mode {mode!r}")
    y = np.einsum("sldn,sln->sld", hs, C)
    state = hs[:, -1]
    if single:
        y, state = y[0], state[0]
    return (y, state) if return_state else y


@register("selective_scan")
def selective_scan(u, delta, A, B, C, mode: str = "sequential", chunk: int = 16) -> Tensor:
    """Fused discretize + scan from the zero state; differentiable in all inputs.

    ``u, delta: (S, L, D)``, ``A: (D, N)``, ``B, C: (S, L, N)`` -> ``y: (S, L, D)``.
    """
    u, delta, A, B, C = (ops._t(v) for v in (u, delta, A, B, C))
    if u.ndim != 3 or delta.shape != u.shape or B.shape != C.shape or B.shape[:2] != u.shape[:2] \
            or A.shape != (u.shape[2], B.shape[2]):
        raise ShapeError(f"selective_scan: shapes u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape}")
    arrs = [np.ascontiguousarray(t.data) for t in (u, delta, A, B, C)]
    if mode == "chunked":
        ud, dd, Ad, Bd, Cd = arrs
        abar = np.exp(dd[..., None] * Ad)
        bu = (dd * ud)[..., None] * Bd[:, :, None, :]
        cache = kernels.linear_scan_chunked(abar, bu, chunk=chunk)
        y = np.einsum("sldn,sln->sld", cache, Cd, optimize=True)
        use_nb = False
    else:
        use_nb = kernels.USE_NUMBA
        y, cache = kernels.selective_scan_forward(*arrs, use_numba=use_nb)

    def backward(g):
        return kernels.selective_scan_backward(*arrs, g, cache, use_numba=use_nb)
    return Tensor.from_op(y, (u, delta, A, B, C), backward, "selective_scan", {"mode": mode, "chunk": chunk})


def s6_forward(u: Tensor, p: S6) -> Tensor:
    """``selective_params -> discretize -> scan`` from the zero state."""
    delta, B, C = selective_params(u, p)
    A = ops.mul(ops.exp(p.A_log), -1.0)
    squeeze = u.ndim == 2
    if squeeze:
        u, delta, B, C = (ops.reshape(t, (1,) + t.shape) for t in (u, delta, B, C))
    y = selective_scan(u, delta, A, B, C, mode=p._scan_mode, chunk=p._chunk)
    if squeeze:
        y = ops.reshape(y, y.shape[1:])
    return y
