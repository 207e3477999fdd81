"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonScalarOutput
from .tensor import Tensor, no_grad, precision, use_tape


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    g_ad = np.asarray(g_ad, dtype=np.float64).ravel()
    g_fd = np.asarray(g_fd, dtype=np.float64).ravel()
    if g_ad.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def _central(f, flat, i, h):
    orig = flat[i]
    flat[i] = orig + h
    fp = float(f().data.reshape(-1)[0])
    flat[i] = orig - h
    fm = float(f().data.reshape(-1)[0])
    flat[i] = orig
    return (fp - fm) / (2 * h)


def gradcheck_tensors(
    f: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-4,
    richardson: bool = False,
    ladder: Sequence[float] = (),
    ladder_tol: float = 0.0,
) -> float:
    """Compare ``backward(f())`` against central differences w.r.t. ``tensors``.

    ``f`` closes over ``tensors``; their ``.data`` is perturbed in place and restored.
    With ``richardson`` the steps ``h`` and ``h/2`` are combined, cancelling the
    O(h^2) truncation term so a larger ``h`` (smaller round-off) can be used.
    ``ladder`` lists extra step sizes; each entry keeps the estimate closest to
    the analytic value.  Piecewise-linear activations make a large step cross
    kinks while a small step drowns structurally zero gradients in round-off,
    and no single step suits both, whereas a wrong gradient disagrees at every step.
    Steps are tried in order only while the entry's error exceeds ``ladder_tol``.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with use_tape() as tape:
        out = f()
        if out.size != 1:
            raise NonScalarOutput(f"gradcheck needs a scalar function, got shape {out.shape}")
        tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]

    worst = 0.0
    with no_grad():
        for t, g_ad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            g_fd = np.empty(flat.size, dtype=np.float64)
            ref = np.asarray(g_ad, dtype=np.float64).reshape(-1)
            for i in range(flat.size):
                g_fd[i] = _central(f, flat, i, h)
                if richardson:
                    g_fd[i] = (4 * _central(f, flat, i, h / 2) - g_fd[i]) / 3
                for step in ladder:
                    if relative_error(ref[i], g_fd[i]) <= ladder_tol:
                        break
                    alt = _central(f, flat, i, step)
                    if abs(alt - ref[i]) < abs(g_fd[i] - ref[i]):
                        g_fd[i] = alt
            worst = max(worst, relative_error(g_ad, g_fd))
    return worst


def gradcheck(f: Callable[..., Tensor], *points, h: float = 1e-4, richardson: bool = False) -> float:
    """Max relative error between analytic and finite-difference gradients of ``f`` at ``points``.

    Runs in 64-bit precision.
    """
    with precision(np.float64):
        tensors = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in points]
        return gradcheck_tensors(lambda: f(*tensors), tensors, h=h, richardson=richardson)
