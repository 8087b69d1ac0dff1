"""Selective-scan kernels.

Two implementations of the same diagonal recurrence

    h[t] = exp(delta[t] * A) * h[t-1] + delta[t] * B[t] * u[t]
    y[t] = sum_n C[t, n] * h[t, :, n]

with array layouts ``u, delta: (S, L, D)``, ``A: (D, N)``,
``B, C: (S, L, N)``.  The numba kernels walk one (sequence, channel) pair at
a time and keep state in registers; the numpy kernels vectorize over
(sequence, channel, state) and loop over time.  Which pair the rest of the
package calls is decided by :data:`mcse._jit.USE_NUMBA`.
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import USE_NUMBA, njit

# -- numba -------------------------------------------------------------------


@njit(fastmath=True)
def _selective_scan_fwd_nb(u, delta, A, B, C):
    S, L, D = u.shape
    N = A.shape[1]
    y = np.zeros_like(u)
    h = np.zeros(N, dtype=u.dtype)
    for s in range(S):
        for d in range(D):
            for n in range(N):
                h[n] = 0.0
            for t in range(L):
                dt = delta[s, t, d]
                du = dt * u[s, t, d]
                acc = 0.0
                for n in range(N):
                    h[n] = math.exp(dt * A[d, n]) * h[n] + du * B[s, t, n]
                    acc += C[s, t, n] * h[n]
                y[s, t, d] = acc
    return y


@njit(fastmath=True)
def _selective_scan_bwd_nb(u, delta, A, B, C, gy):
    S, L, D = u.shape
    N = A.shape[1]
    gu = np.zeros_like(u)
    gdelta = np.zeros_like(u)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    hs = np.zeros((L + 1, N), dtype=u.dtype)   # hs[t + 1] is the state after step t
    da = np.zeros((L + 1, N), dtype=u.dtype)   # da[t] = exp(delta[t] * A); da[L] = 0
    gh = np.zeros(N, dtype=u.dtype)
    for s in range(S):
        for d in range(D):
            # recompute states for this (sequence, channel)
            for t in range(L):
                dt = delta[s, t, d]
                du = dt * u[s, t, d]
                for n in range(N):
                    a = math.exp(dt * A[d, n])
                    da[t, n] = a
                    hs[t + 1, n] = a * hs[t, n] + du * B[s, t, n]
            for n in range(N):
                gh[n] = 0.0
            for t in range(L - 1, -1, -1):
                dt = delta[s, t, d]
                ut = u[s, t, d]
                g = gy[s, t, d]
                gd = 0.0
                gut = 0.0
                for n in range(N):
                    ghn = gh[n] * da[t + 1, n] + C[s, t, n] * g
                    gh[n] = ghn
                    gda = ghn * hs[t, n] * da[t, n]
                    gd += gda * A[d, n] + ghn * B[s, t, n] * ut
                    gA[d, n] += gda * dt
                    gB[s, t, n] += ghn * dt * ut
                    gut += ghn * B[s, t, n]
                    gC[s, t, n] += g * hs[t + 1, n]
                gdelta[s, t, d] = gd
                gu[s, t, d] = gut * dt
    return gu, gdelta, gA, gB, gC


@njit
def _linear_scan_nb(a, b, h0):
    P, L, Q = a.shape
    h = np.empty_like(a)
    for p in range(P):
        for q in range(Q):
            prev = h0[p, q]
            for t in range(L):
                prev = a[p, t, q] * prev + b[p, t, q]
                h[p, t, q] = prev
    return h


# -- numpy ---------------------------------------------------------------------


def _selective_scan_fwd_np(u, delta, A, B, C):
    dA = np.exp(delta[..., None] * A)                      # (S, L, D, N)
    dBu = (delta * u)[..., None] * B[:, :, None, :]
    hs = _linear_scan_np(dA, dBu, np.zeros_like(dA[:, 0]))
    y = np.einsum("sldn,sln->sld", hs, C, optimize=True)
    return y, hs


def _selective_scan_bwd_np(u, delta, A, B, C, gy, hs=None):
    dA = np.exp(delta[..., None] * A)
    if hs is None:
        dBu = (delta * u)[..., None] * B[:, :, None, :]
        hs = _linear_scan_np(dA, dBu, np.zeros_like(dA[:, 0]))
    S, L, D, N = hs.shape
    gh_all = np.empty_like(hs)
    gh = np.zeros((S, D, N), dtype=hs.dtype)
    for t in range(L - 1, -1, -1):
        if t + 1 < L:
            gh = gh * dA[:, t + 1]
        else:
            gh = gh.copy()
        gh += C[:, t, None, :] * gy[:, t, :, None]
        gh_all[:, t] = gh
    h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
    t1 = gh_all * h_prev * dA
    gdelta = (t1 * A).sum(-1) + np.einsum("sldn,sln->sld", gh_all, B, optimize=True) * u
    gA = np.einsum("sldn,sld->dn", t1, delta, optimize=True)
    gB = np.einsum("sldn,sld->sln", gh_all, delta * u, optimize=True)
    gu = np.einsum("sldn,sln->sld", gh_all, B, optimize=True) * delta
    gC = np.einsum("sld,sldn->sln", gy, hs, optimize=True)
    return gu, gdelta, gA, gB, gC


def _linear_scan_np(a, b, h0):
    """h[:, t] = a[:, t] * h[:, t-1] + b[:, t] along axis 1."""
    h = np.empty_like(b)
    prev = h0
    for t in range(a.shape[1]):
        prev = a[:, t] * prev + b[:, t]
        h[:, t] = prev
    return h


# -- dispatch --------------------------------------------------------------------


def selective_scan_forward(u, delta, A, B, C, use_numba: bool = USE_NUMBA):
    """Returns ``(y, cache)``; pass the cache back to :func:`selective_scan_backward`."""
    if use_numba:
        return _selective_scan_fwd_nb(u, delta, A, B, C), None
    return _selective_scan_fwd_np(u, delta, A, B, C)


def selective_scan_backward(u, delta, A, B, C, gy, cache=None, use_numba: bool = USE_NUMBA):
    if use_numba:
        return _selective_scan_bwd_nb(u, delta, A, B, C, np.ascontiguousarray(gy))
    return _selective_scan_bwd_np(u, delta, A, B, C, gy, cache)


def linear_scan(a, b, h0=None, use_numba: bool = USE_NUMBA):
    """Sequential first-order recurrence along axis 1 of ``(P, L, ...)`` arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if h0 is None:
        h0 = np.zeros((b.shape[0],) + b.shape[2:], dtype=b.dtype)
    if use_numba:
        P, L = b.shape[:2]
        out = _linear_scan_nb(np.ascontiguousarray(a.reshape(P, L, -1)),
                              np.ascontiguousarray(b.reshape(P, L, -1)),
                              np.ascontiguousarray(np.asarray(h0, dtype=b.dtype).reshape(P, -1)))
        return out.reshape(b.shape)
    return _linear_scan_np(a, b, np.asarray(h0, dtype=b.dtype))


def linear_scan_chunked(a, b, h0=None, chunk: int = 16):
    """Blocked evaluation of the same recurrence as :func:`linear_scan`.

    Inside each block of ``chunk`` steps the states are formed directly as
    decay-weighted sums, ``h[t] = sum_s exp(cl[t] - cl[s]) b[s] + exp(cl[t]) h_in``,
    with ``cl`` the in-block cumulative log of ``a``; only the block-boundary
    state is carried sequentially.  Requires ``a`` in [0, 1].
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    P, L = b.shape[:2]
    rest = b.shape[2:]
    Q = int(np.prod(rest)) if rest else 1
    dt = np.result_type(a.dtype, b.dtype)
    af = a.reshape(P, L, Q).astype(np.float64)
    bf = b.reshape(P, L, Q).astype(np.float64)
    h_in = np.zeros((P, Q)) if h0 is None else np.asarray(h0, dtype=np.float64).reshape(P, Q)

    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        af = np.concatenate([af, np.ones((P, pad, Q))], axis=1)
        bf = np.concatenate([bf, np.zeros((P, pad, Q))], axis=1)
    la = np.log(np.maximum(af, 1e-300)).reshape(P, nc, chunk, Q)
    bf = bf.reshape(P, nc, chunk, Q)
    cl = np.cumsum(la, axis=2)
    diff = cl[:, :, :, None, :] - cl[:, :, None, :, :]            # (P, nc, t, s, Q)
    causal = np.tril(np.ones((chunk, chunk), dtype=bool))[None, None, :, :, None]
    w = np.where(causal, np.exp(np.minimum(diff, 0.0)), 0.0)
    intra = np.einsum("pctsq,pcsq->pctq", w, bf, optimize=True)
    carry = np.exp(cl)

    h = np.empty_like(intra)
    state = h_in
    for c in range(nc):
        h[:, c] = intra[:, c] + carry[:, c] * state[:, None, :]
        state = h[:, c, -1]
    return h.reshape(P, nc * chunk, Q)[:, :L].reshape(b.shape).astype(dt, copy=False)
