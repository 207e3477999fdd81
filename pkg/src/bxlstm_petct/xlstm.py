"""Bidirectional mLSTM (matrix-memory xLSTM cell) over 3D feature maps.

One head, scalar exponential input/forget gates per token.  The recurrence
keeps a log-scale stabilizer ``m`` so the memory ``C`` and normalizer ``n``
stay bounded whatever the gate magnitudes:

    m' = max(f~ + m, i~)
    C' = exp(f~ + m - m') C + exp(i~ - m') v k^T
    n' = exp(f~ + m - m') n + exp(i~ - m') k
    h~ = C' q / max(|n'^T q|, exp(-m'))

Dividing by ``exp(-m')`` rather than 1 makes the stabilized output identical
to the unstabilized cell (which divides by ``max(|n^T q|, 1)``).  The output
is independent of ``m`` mathematically, so the backward pass treats the
stabilizer as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import (
    Tensor,
    add,
    flip,
    make_result,
    matmul,
    mul,
    reshape,
    sigmoid,
    transpose,
)
from .errors import ShapeMismatch
from .layers import Module, Norm, he_normal, zeros


@numba.njit(cache=True)
def _scan_fwd(q, k, v, ig, fg, C0, n0, m0, h, Cs, ns, ms, dens):
    N, T, d = q.shape
    tiny = np.finfo(q.dtype).tiny
    for b in range(N):
        C = C0[b].copy()
        nv = n0[b].copy()
        m = m0[b]
        for t in range(T):
            mt = max(fg[b, t] + m, ig[b, t])
            fa = np.exp(fg[b, t] + m - mt)
            ia = np.exp(ig[b, t] - mt)
            for i in range(d):
                vi = ia * v[b, t, i]
                for j in range(d):
                    C[i, j] = fa * C[i, j] + vi * k[b, t, j]
                nv[i] = fa * nv[i] + ia * k[b, t, i]
            s = 0.0
            for j in range(d):
                s += nv[j] * q[b, t, j]
            den = max(abs(s), np.exp(-mt))
            den = max(den, tiny)
            for i in range(d):
                u = 0.0
                for j in range(d):
                    u += C[i, j] * q[b, t, j]
                h[b, t, i] = u / den
            Cs[b, t] = C
            ns[b, t] = nv
            ms[b, t] = mt
            dens[b, t] = den
            m = mt


@numba.njit(cache=True)
def _scan_bwd(q, k, v, ig, fg, C0, n0, m0, h, Cs, ns, ms, dens, dh, dq, dk, dv, dig, dfg):
    N, T, d = q.shape
    dC = np.zeros((d, d), dtype=q.dtype)
    dn = np.zeros(d, dtype=q.dtype)
    for b in range(N):
        dC[:] = 0
        dn[:] = 0
        for t in range(T - 1, -1, -1):
            mt = ms[b, t]
            m_prev = ms[b, t - 1] if t > 0 else m0[b]
            fa = np.exp(fg[b, t] + m_prev - mt)
            ia = np.exp(ig[b, t] - mt)
            den = dens[b, t]
            s = 0.0
            for j in range(d):
                s += ns[b, t, j] * q[b, t, j]
            # d(den)
            dden = 0.0
            for i in range(d):
                dden -= dh[b, t, i] * h[b, t, i]
            dden /= den
            ds = 0.0
            if abs(s) >= np.exp(-mt) and abs(s) > 0:
                ds = dden if s > 0 else -dden
            # u = C q, h = u / den
            for i in range(d):
                du = dh[b, t, i] / den
                for j in range(d):
                    dC[i, j] += du * q[b, t, j]
            for j in range(d):
                acc = ds * ns[b, t, j]
                for i in range(d):
                    acc += Cs[b, t, i, j] * dh[b, t, i] / den
                dq[b, t, j] = acc
                dn[j] += ds * q[b, t, j]
            # C_t = fa C_{t-1} + ia v k^T ; n_t = fa n_{t-1} + ia k
            dia = 0.0
            dfa = 0.0
            for i in range(d):
                accv = 0.0
                acck = 0.0
                for j in range(d):
                    accv += dC[i, j] * k[b, t, j]
                    acck += dC[j, i] * v[b, t, j]
                dv[b, t, i] = ia * accv
                dk[b, t, i] = ia * (acck + dn[i])
                dia += v[b, t, i] * accv + dn[i] * k[b, t, i]
            if t > 0:
                for i in range(d):
                    for j in range(d):
                        dfa += dC[i, j] * Cs[b, t - 1, i, j]
                    dfa += dn[i] * ns[b, t - 1, i]
            else:
                for i in range(d):
                    for j in range(d):
                        dfa += dC[i, j] * C0[b, i, j]
                    dfa += dn[i] * n0[b, i]
            dig[b, t] = dia * ia
            dfg[b, t] = dfa * fa
            for i in range(d):
                dn[i] *= fa
                for j in range(d):
                    dC[i, j] *= fa


@dataclass
class MlstmState:
    """Matrix memory ``C[N,d,d]``, normalizer ``n[N,d]`` and log-stabilizer ``m[N]``."""

    C: np.ndarray
    n: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, batch: int, d: int, dtype=np.float32) -> "MlstmState":
        return cls(np.zeros((batch, d, d), dtype), np.zeros((batch, d), dtype), np.zeros(batch, dtype))


def mlstm_scan(q: Tensor, k: Tensor, v: Tensor, ig: Tensor, fg: Tensor, state: MlstmState | None = None):
    """Run the stabilized recurrence over ``T``; returns ``(h_tilde[N,T,d], final_state)``.

    ``k`` must already carry the ``1/sqrt(d)`` scale.  Gradients flow to
    q, k, v and both gate pre-activations, not to the initial state.
    """
    N, T, d = q.shape
    if k.shape != q.shape or v.shape != q.shape or ig.shape != (N, T) or fg.shape != (N, T):
        raise ShapeMismatch(f"mlstm_scan shapes q{q.shape} k{k.shape} v{v.shape} i{ig.shape} f{fg.shape}")
    dtype = q.dtype
    if state is None:
        state = MlstmState.zeros(N, d, dtype)
    arrs = [np.ascontiguousarray(t.data, dtype=dtype) for t in (q, k, v, ig, fg)]
    C0, n0, m0 = (np.ascontiguousarray(a, dtype=dtype) for a in (state.C, state.n, state.m))
    h = np.empty((N, T, d), dtype)
    Cs = np.empty((N, T, d, d), dtype)
    ns = np.empty((N, T, d), dtype)
    ms = np.empty((N, T), dtype)
    dens = np.empty((N, T), dtype)
    _scan_fwd(*arrs, C0, n0, m0, h, Cs, ns, ms, dens)
    final = MlstmState(Cs[:, -1].copy(), ns[:, -1].copy(), ms[:, -1].copy())

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dq, dk, dv = np.empty_like(h), np.empty_like(h), np.empty_like(h)
        dig, dfg = np.empty_like(ms), np.empty_like(ms)
        _scan_bwd(*arrs, C0, n0, m0, h, Cs, ns, ms, dens, g, dq, dk, dv, dig, dfg)
        return dq, dk, dv, dig, dfg

    return make_result("mlstm_scan", h, (q, k, v, ig, fg), bw), final


class MlstmWeights(Module):
    """One direction's parameters.  Projections are stored (out, in): ``q = W_q x``."""

    def __init__(self, rng: np.random.Generator, d: int):
        self.W_q = he_normal(rng, (d, d), d)
        self.W_k = he_normal(rng, (d, d), d)
        self.W_v = he_normal(rng, (d, d), d)
        self.w_i = he_normal(rng, (d, 1), d)
        self.b_i = zeros((1,))
        self.w_f = he_normal(rng, (d, 1), d)
        self.b_f = zeros((1,))
        self.W_o = he_normal(rng, (d, d), d)

    @property
    def dim(self) -> int:
        return self.W_q.shape[0]


def _project(x2d: Tensor, W: Tensor) -> Tensor:
    return matmul(x2d, transpose(W))


def _mlstm_direction(tokens: Tensor, w: MlstmWeights, state: MlstmState | None = None):
    N, T, d = tokens.shape
    if d != w.dim:
        raise ShapeMismatch(f"token width {d} != mLSTM width {w.dim}")
    x = reshape(tokens, (N * T, d))
    q = reshape(_project(x, w.W_q), (N, T, d))
    k = reshape(mul(_project(x, w.W_k), 1.0 / np.sqrt(d)), (N, T, d))
    v = reshape(_project(x, w.W_v), (N, T, d))
    ig = reshape(add(matmul(x, w.w_i), w.b_i), (N, T))
    fg = reshape(add(matmul(x, w.w_f), w.b_f), (N, T))
    o = reshape(sigmoid(_project(x, w.W_o)), (N, T, d))
    h_tilde, final = mlstm_scan(q, k, v, ig, fg, state)
    return mul(o, h_tilde), final


def mlstm_step(state: MlstmState, x_t, weights: MlstmWeights):
    """Advance one token ``x_t[N,d]`` (or ``[d]``); returns ``(new_state, h_t)``."""
    x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
    single = x.ndim == 1
    if single:
        x = reshape(x, (1, 1, x.shape[0]))
    else:
        x = reshape(x, (x.shape[0], 1, x.shape[1]))
    h, new_state = _mlstm_direction(x, weights, state)
    h = reshape(h, (h.shape[2],) if single else (h.shape[0], h.shape[2]))
    return new_state, h


def mlstm_step_naive(state: MlstmState, x_t: np.ndarray, weights: MlstmWeights):
    """Unstabilized reference step in plain numpy (``state.m`` is ignored)."""
    W = {name: p.data.astype(np.float64) for name, p in weights.named_parameters()}
    x = np.asarray(x_t, dtype=np.float64)
    d = x.shape[-1]
    q = W["W_q"] @ x
    k = (W["W_k"] @ x) / np.sqrt(d)
    v = W["W_v"] @ x
    i = np.exp(W["w_i"][:, 0] @ x + W["b_i"][0])
    f = np.exp(W["w_f"][:, 0] @ x + W["b_f"][0])
    C = f * state.C + i * np.outer(v, k)
    n = f * state.n + i * k
    h_tilde = C @ q / max(abs(n @ q), 1.0)
    o = 1.0 / (1.0 + np.exp(-(W["W_o"] @ x)))
    return MlstmState(C, n, state.m), o * h_tilde


def bidirectional_mlstm(tokens: Tensor, weights_fwd: MlstmWeights, weights_bwd: MlstmWeights) -> Tensor:
    """``out_t = h_fwd(t) + h_bwd(t)``; the backward direction scans the reversed sequence."""
    if tokens.ndim == 2:
        return reshape(bidirectional_mlstm(reshape(tokens, (1,) + tokens.shape), weights_fwd, weights_bwd), tokens.shape)
    if tokens.ndim != 3 or tokens.shape[1] < 1:
        raise ShapeMismatch(f"expected tokens [N,T,d] with T >= 1, got {tokens.shape}")
    h_f, _ = _mlstm_direction(tokens, weights_fwd)
    h_b, _ = _mlstm_direction(flip(tokens, 1), weights_bwd)
    return add(h_f, flip(h_b, 1))


def volume_to_tokens(feat: Tensor) -> Tensor:
    """``[N,C,D,H,W] -> [N, D*H*W, C]`` in z-major raster order (d, then h, then w)."""
    N, C = feat.shape[:2]
    return reshape(transpose(feat, (0, 2, 3, 4, 1)), (N, -1, C))


def tokens_to_volume(tokens: Tensor, spatial) -> Tensor:
    N, _, C = tokens.shape
    return transpose(reshape(tokens, (N,) + tuple(spatial) + (C,)), (0, 4, 1, 2, 3))


class BiXlstmBlock(Module):
    """Pre-norm residual block: ``x + tokens_to_volume(biLSTM(tokens(norm(x))))``."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.norm = Norm(channels)
        self.fwd = MlstmWeights(rng, channels)
        self.bwd = MlstmWeights(rng, channels)

    def __call__(self, feat: Tensor) -> Tensor:
        return bixlstm_block(feat, self)


def bixlstm_block(feat: Tensor, block: BiXlstmBlock) -> Tensor:
    if feat.ndim != 5 or feat.shape[1] != block.fwd.dim:
        raise ShapeMismatch(f"feature map {feat.shape} does not match block width {block.fwd.dim}")
    tokens = volume_to_tokens(block.norm(feat))
    mixed = bidirectional_mlstm(tokens, block.fwd, block.bwd)
    return add(feat, tokens_to_volume(mixed, feat.shape[2:]))
