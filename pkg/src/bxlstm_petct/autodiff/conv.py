"""3D convolution, upsampling and instance normalization.

Forward kernels are compiled with numba.  Long rows use a direct kernel,
short rows (deep, low-resolution stages) and strided convs use im2col plus
an ordered matrix product.  Either way each output voxel is accumulated over
(in_channel, kd, kh, kw) in that order with plain multiply-add, so a scalar
reference loop in the same order reproduces the result bit for bit.
Backward passes are not order-constrained and use BLAS where it pays.
"""
from __future__ import annotations

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidStride, ShapeMismatch
from .tensor import Tensor, make_result


@numba.njit(cache=True)
def _conv_fwd_s1(xp, w, out):
    # four output channels per pass share each input row load
    N, Co, D, H, W = out.shape
    Ci, kd, kh, kw = w.shape[1], w.shape[2], w.shape[3], w.shape[4]
    r0 = np.zeros(W, dtype=out.dtype)
    r1 = np.zeros(W, dtype=out.dtype)
    r2 = np.zeros(W, dtype=out.dtype)
    r3 = np.zeros(W, dtype=out.dtype)
    full = Co - Co % 4
    for n in range(N):
        for o in range(0, full, 4):
            for d in range(D):
                for h in range(H):
                    r0[:] = 0
                    r1[:] = 0
                    r2[:] = 0
                    r3[:] = 0
                    for i in range(Ci):
                        for a in range(kd):
                            for b in range(kh):
                                src = xp[n, i, d + a, h + b]
                                for c in range(kw):
                                    w0 = w[o, i, a, b, c]
                                    w1 = w[o + 1, i, a, b, c]
                                    w2 = w[o + 2, i, a, b, c]
                                    w3 = w[o + 3, i, a, b, c]
                                    for k in range(W):
                                        s = src[k + c]
                                        r0[k] += w0 * s
                                        r1[k] += w1 * s
                                        r2[k] += w2 * s
                                        r3[k] += w3 * s
                    out[n, o, d, h, :] = r0
                    out[n, o + 1, d, h, :] = r1
                    out[n, o + 2, d, h, :] = r2
                    out[n, o + 3, d, h, :] = r3
        for o in range(full, Co):
            for d in range(D):
                for h in range(H):
                    r0[:] = 0
                    for i in range(Ci):
                        for a in range(kd):
                            for b in range(kh):
                                src = xp[n, i, d + a, h + b]
                                for c in range(kw):
                                    w0 = w[o, i, a, b, c]
                                    for k in range(W):
                                        r0[k] += w0 * src[k + c]
                    out[n, o, d, h, :] = r0


@numba.njit(cache=True, fastmath=True)
def _conv_bwd_weight_s1(xp, gy, gw):
    N, Co, D, H, W = gy.shape
    Ci, kd, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3], gw.shape[4]
    acc = np.zeros((kd, kh, kw, W), dtype=gw.dtype)
    for o in range(Co):
        for i in range(Ci):
            acc[:] = 0
            for n in range(N):
                for d in range(D):
                    for h in range(H):
                        g = gy[n, o, d, h]
                        for a in range(kd):
                            for b in range(kh):
                                src = xp[n, i, d + a, h + b]
                                for c in range(kw):
                                    for k in range(W):
                                        acc[a, b, c, k] += g[k] * src[k + c]
            for a in range(kd):
                for b in range(kh):
                    for c in range(kw):
                        gw[o, i, a, b, c] = acc[a, b, c].sum()


@numba.njit(cache=True)
def _ordered_gemm(w2, col, out):
    # out[o, v] = sum_k w2[o, k] * col[k, v], accumulated in k order
    Co, K = w2.shape
    V = col.shape[1]
    CH = 256
    acc = np.zeros((4, CH), dtype=out.dtype)
    for v0 in range(0, V, CH):
        L = min(CH, V - v0)
        for o in range(0, Co, 4):
            nq = min(4, Co - o)
            acc[:] = 0
            if nq == 4:
                a0 = acc[0]
                a1 = acc[1]
                a2 = acc[2]
                a3 = acc[3]
                for k in range(K):
                    src = col[k, v0 : v0 + L]
                    w0 = w2[o, k]
                    w1 = w2[o + 1, k]
                    w2k = w2[o + 2, k]
                    w3 = w2[o + 3, k]
                    for j in range(L):
                        s = src[j]
                        a0[j] += w0 * s
                        a1[j] += w1 * s
                        a2[j] += w2k * s
                        a3[j] += w3 * s
            else:
                for q in range(nq):
                    aq = acc[q]
                    for k in range(K):
                        src = col[k, v0 : v0 + L]
                        wq = w2[o + q, k]
                        for j in range(L):
                            aq[j] += wq * src[j]
            for q in range(nq):
                out[o + q, v0 : v0 + L] = acc[q, :L]


# rows at least this long go through the direct kernel, shorter ones through im2col
ROW_KERNEL_MIN_WIDTH = 32


def _im2col(xp, kernel, stride, out_sp):
    """``[N, Cin*kd*kh*kw, D*H*W]`` patches, rows ordered (in_channel, kd, kh, kw)."""
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]][:, :, : out_sp[0], : out_sp[1], : out_sp[2]]
    N, Ci = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 5, 6, 7, 2, 3, 4)).reshape(N, Ci * int(np.prod(kernel)), -1)


def _col2im(gcol, xp_shape, kernel, stride, out_sp):
    N, Ci = xp_shape[:2]
    g = gcol.reshape((N, Ci) + tuple(kernel) + tuple(out_sp))
    gxp = np.zeros(xp_shape, dtype=gcol.dtype)
    for a in range(kernel[0]):
        for b in range(kernel[1]):
            for c in range(kernel[2]):
                gxp[
                    :,
                    :,
                    a : a + stride[0] * out_sp[0] : stride[0],
                    b : b + stride[1] * out_sp[1] : stride[1],
                    c : c + stride[2] * out_sp[2] : stride[2],
                ] += g[:, :, a, b, c]
    return gxp


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def conv_output_shape(spatial, kernel, stride, padding):
    return tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(spatial, kernel, stride, padding))


def conv3d(x: Tensor, w: Tensor, stride=1, padding=None) -> Tensor:
    """Cross-correlation of ``x[N,Cin,D,H,W]`` with ``w[Cout,Cin,kd,kh,kw]``.

    ``padding=None`` means "same" padding, ``k // 2`` per axis.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv3d input {x.shape} vs kernel {w.shape}")
    kernel = w.shape[2:]
    if any(k % 2 == 0 for k in kernel):
        raise ShapeMismatch(f"kernel dims must be odd, got {kernel}")
    stride = _triple(stride)
    if any(s not in (1, 2) for s in stride):
        raise InvalidStride(f"stride must be 1 or 2 per axis, got {stride}")
    padding = tuple(k // 2 for k in kernel) if padding is None else _triple(padding)
    out_sp = conv_output_shape(x.shape[2:], kernel, stride, padding)
    if any(s < 1 for s in out_sp):
        raise ShapeMismatch(f"input {x.shape} too small for kernel {kernel}")

    dtype = np.result_type(x.dtype, w.dtype)
    pad = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data.astype(dtype, copy=False), pad)
    wd = np.ascontiguousarray(w.data, dtype=dtype)
    N, Co = x.shape[0], w.shape[0]
    out = np.empty((N, Co) + out_sp, dtype=dtype)
    direct = stride == (1, 1, 1) and out_sp[2] >= ROW_KERNEL_MIN_WIDTH
    if direct:
        _conv_fwd_s1(xp, wd, out)
        col = None
    else:
        col = _im2col(xp, kernel, stride, out_sp)
        w2 = wd.reshape(Co, -1)
        for n in range(N):
            _ordered_gemm(w2, col[n], out[n].reshape(Co, -1))

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        if direct:
            gw = np.empty_like(wd)
            _conv_bwd_weight_s1(xp, g, gw)
            # input gradient = correlation of the re-padded output gradient with the flipped kernel
            back = tuple(k - 1 - p for p, k in zip(padding, kernel))
            gp = np.pad(g, ((0, 0), (0, 0)) + tuple((b, b) for b in back))
            wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = np.empty(x.shape, dtype=dtype)
            _conv_fwd_s1(gp, wf, gx)
            return gx, gw
        g2 = g.reshape(N, Co, -1)
        gw = np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gcol = np.matmul(wd.reshape(Co, -1).T, g2)
        gxp = _col2im(gcol, xp.shape, kernel, stride, out_sp)
        sl = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
        return np.ascontiguousarray(gxp[sl]), gw

    return make_result("conv3d", out, (x, w), bw)


def conv_transpose3d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2, kernel-2 transposed convolution; ``w[Cin,Cout,2,2,2]``, spatial dims double."""
    if x.ndim != 5 or w.ndim != 5 or w.shape[0] != x.shape[1] or w.shape[2:] != (2, 2, 2):
        raise ShapeMismatch(f"conv_transpose3d input {x.shape} vs kernel {w.shape}")
    N, Ci, D, H, W = x.shape
    Co = w.shape[1]
    xr = x.data.reshape(N, Ci, D * H * W)
    wr = w.data.reshape(Ci, Co * 8)
    y = np.matmul(wr.T, xr).reshape(N, Co, 2, 2, 2, D, H, W)
    y = y.transpose(0, 1, 5, 2, 6, 3, 7, 4).reshape(N, Co, 2 * D, 2 * H, 2 * W)

    def bw(g):
        gr = g.reshape(N, Co, D, 2, H, 2, W, 2).transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(N, Co * 8, D * H * W)
        gx = np.matmul(wr, gr).reshape(x.shape)
        gw = np.einsum("nis,nks->ik", xr, gr).reshape(w.shape)
        return gx, gw

    return make_result("conv_transpose3d", np.ascontiguousarray(y), (x, w), bw)


def _linear_upsample_matrix(n: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    out = 2 * n
    src = (np.arange(out) + 0.5) / 2.0 - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((out, n))
    m[np.arange(out), lo] += 1 - frac
    m[np.arange(out), hi] += frac
    return m.astype(dtype)


def trilinear_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ShapeMismatch("only factor 2 upsampling is supported")
    if x.ndim != 5:
        raise ShapeMismatch(f"expected N,C,D,H,W input, got {x.shape}")
    mats = [_linear_upsample_matrix(n, x.dtype) for n in x.shape[2:]]
    y = x.data
    for axis, m in zip((2, 3, 4), mats):
        y = np.moveaxis(np.tensordot(m, y, axes=([1], [axis])), 0, axis)

    def bw(g):
        for axis, m in zip((2, 3, 4), mats):
            g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis)
        return (np.ascontiguousarray(g),)

    return make_result("upsample", np.ascontiguousarray(y), (x,), bw)


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over spatial axes, then affine."""
    if x.ndim < 3 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatch(f"instance_norm input {x.shape}, scale {scale.shape}, shift {shift.shape}")
    axes = tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    # statistics in float64 so a constant channel gives an exactly zero residual
    mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
    xc = x.data.astype(np.float64) - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    sc = scale.data.reshape(bshape)
    y = xhat * sc + shift.data.reshape(bshape)
    inv = inv.astype(x.dtype)

    def bw(g):
        gshift = g.sum(axis=(0,) + axes)
        gscale = (g * xhat).sum(axis=(0,) + axes)
        gh = g * sc
        gx = inv * (gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        return gx.astype(x.dtype, copy=False), gscale, gshift

    return make_result("instance_norm", y.astype(x.dtype, copy=False), (x, scale, shift), bw)


def norm_layer(x: Tensor, scale: Tensor, shift: Tensor, kind: str = "instance_norm", eps: float = 1e-5) -> Tensor:
    if kind != "instance_norm":
        raise ValueError(f"unsupported norm kind {kind!r}")
    return instance_norm(x, scale, shift, eps)
