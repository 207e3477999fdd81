"""Finite-difference gradient suite over every differentiable op and a tiny full network."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck, gradcheck_tensors, precision, tsum
from .mae import mae_loss
from .network import NetworkConfig, build
from .training import dice_ce_loss
from .xlstm import BiXlstmBlock, MlstmWeights, bidirectional_mlstm, mlstm_scan

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3
NETWORK_STEP_LADDER = (1e-5, 1e-6, 1e-7, 1e-8)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(self.error < self.tol)


def _weighted(op: Callable, rng, out_shape, scale=1.0):
    # a random linear functional turns a tensor-valued op into a scalar test function
    r = Tensor(rng.standard_normal(out_shape) * scale)
    return lambda *xs: tsum(op(*xs) * r)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _op_cases(rng):
    """``(name, scalar function, points, tolerance, richardson)`` per op and draw."""
    s = (2, 3, 4)
    cases = [
        ("add", lambda: (_weighted(ad.add, rng, s), [rng.standard_normal(s), rng.standard_normal(s)])),
        ("sub", lambda: (_weighted(ad.sub, rng, s), [rng.standard_normal(s), rng.standard_normal(s)])),
        ("mul", lambda: (_weighted(ad.mul, rng, s), [rng.standard_normal(s), rng.standard_normal(s)])),
        ("div", lambda: (_weighted(ad.div, rng, s), [rng.standard_normal(s), rng.uniform(0.5, 2, s)])),
        ("channel_add", lambda: (_weighted(ad.add, rng, s), [rng.standard_normal(s), rng.standard_normal(3)])),
        ("channel_mul", lambda: (_weighted(ad.mul, rng, s), [rng.standard_normal(s), rng.standard_normal(3)])),
        ("neg", lambda: (_weighted(ad.neg, rng, s), [rng.standard_normal(s)])),
        ("exp", lambda: (_weighted(ad.exp, rng, s), [rng.standard_normal(s)])),
        ("log", lambda: (_weighted(ad.log, rng, s), [rng.uniform(0.5, 2, s)])),
        ("sigmoid", lambda: (_weighted(ad.sigmoid, rng, s), [rng.standard_normal(s)])),
        ("tanh", lambda: (_weighted(ad.tanh, rng, s), [rng.standard_normal(s)])),
        ("relu", lambda: (_weighted(ad.relu, rng, s), [_away_from_zero(rng, s)])),
        ("leaky_relu", lambda: (_weighted(lambda x: ad.leaky_relu(x, 0.01), rng, s), [_away_from_zero(rng, s)])),
        ("matmul", lambda: (_weighted(ad.matmul, rng, (3, 2)), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])),
        ("sum_axis", lambda: (_weighted(lambda x: tsum(x, axis=(1, 2)), rng, (2,)), [rng.standard_normal(s)])),
        ("mean", lambda: (_weighted(lambda x: ad.mean(x, axis=1), rng, (2, 4)), [rng.standard_normal(s)])),
        ("reshape_transpose", lambda: (_weighted(lambda x: ad.transpose(ad.reshape(x, (4, 6))), rng, (6, 4)), [rng.standard_normal(s)])),
        ("flip", lambda: (_weighted(lambda x: ad.flip(x, (0, 2)), rng, s), [rng.standard_normal(s)])),
        ("getitem", lambda: (_weighted(lambda x: ad.getitem(x, (slice(None), 1)), rng, (2, 4)), [rng.standard_normal(s)])),
        ("concat", lambda: (_weighted(lambda a, b: ad.concat([a, b], 1), rng, (2, 5, 4)), [rng.standard_normal(s), rng.standard_normal((2, 2, 4))])),
        ("log_softmax", lambda: (_weighted(lambda x: ad.log_softmax(x, 1), rng, s), [rng.standard_normal(s)])),
        ("softmax", lambda: (_weighted(lambda x: ad.softmax(x, 1), rng, s), [rng.standard_normal(s)])),
        ("conv3d", lambda: (_weighted(ad.conv3d, rng, (1, 3, 4, 4, 4)), [rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3))])),
        (
            "conv3d_stride2",
            lambda: (
                _weighted(lambda x, w: ad.conv3d(x, w, stride=2), rng, (2, 2, 2, 3, 2)),
                [rng.standard_normal((2, 2, 4, 5, 4)), rng.standard_normal((2, 2, 3, 3, 3))],
            ),
        ),
        (
            "conv_transpose3d",
            lambda: (_weighted(ad.conv_transpose3d, rng, (1, 2, 4, 4, 4)), [rng.standard_normal((1, 3, 2, 2, 2)), rng.standard_normal((3, 2, 2, 2, 2))]),
        ),
        ("trilinear_upsample", lambda: (_weighted(ad.trilinear_upsample, rng, (1, 1, 4, 4, 4)), [rng.standard_normal((1, 1, 2, 2, 2))])),
        (
            "instance_norm",
            lambda: (
                _weighted(ad.instance_norm, rng, (1, 2, 3, 3, 3)),
                [rng.standard_normal((1, 2, 3, 3, 3)), rng.standard_normal(2), rng.standard_normal(2)],
            ),
        ),
        (
            "mlstm_scan",
            lambda: (
                # small weights keep round-off on structurally zero entries under the 1e-8 floor
                _weighted(lambda *a: mlstm_scan(*a)[0], rng, (1, 4, 3), scale=1e-2),
                [rng.standard_normal((1, 4, 3)) for _ in range(3)] + [rng.standard_normal((1, 4)) for _ in range(2)],
            ),
        ),
        ("dice_ce_loss", lambda: _dice_case(rng)),
        ("mae_loss", lambda: _mae_case(rng)),
    ]
    return cases


def _dice_case(rng):
    target = (rng.uniform(size=(2, 3, 3, 2)) < 0.4).astype(np.float64)
    return (lambda x: dice_ce_loss(x, target)), [rng.standard_normal((2, 2, 3, 3, 2))]


def _mae_case(rng):
    target = rng.standard_normal((1, 2, 4, 4, 4))
    ind = (rng.uniform(size=(1, 4, 4, 4)) < 0.5).astype(np.float32)
    ind[0, 0, 0, 0] = 1
    return (lambda x: mae_loss(x, target, ind)), [rng.standard_normal((1, 2, 4, 4, 4))]


def _module_check(make, inputs_fn, richardson=False, h=1e-4):
    """Gradcheck w.r.t. every parameter of ``make()`` and the input, in float64."""
    with precision(np.float64):
        module = make().astype(np.float64)
        x = Tensor(inputs_fn(), requires_grad=True)
        params = module.parameters()
        f_out = module(x)
        r = Tensor(np.random.default_rng(7).standard_normal(f_out.shape) * 1e-2)
        err = gradcheck_tensors(lambda: tsum(module(x) * r), params + [x], h=h, richardson=richardson)
    return err


def _bidirectional_check(rng):
    with precision(np.float64):
        wf = MlstmWeights(rng, 3).astype(np.float64)
        wb = MlstmWeights(rng, 3).astype(np.float64)
        for w in (wf, wb):
            w.b_i.data[:] = rng.standard_normal(1)
            w.b_f.data[:] = rng.standard_normal(1)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        r = Tensor(rng.standard_normal((4, 3)) * 1e-2)
        return gradcheck_tensors(lambda: tsum(bidirectional_mlstm(x, wf, wb) * r), wf.parameters() + wb.parameters() + [x], richardson=True)


def _tiny_network_check(seed: int):
    cfg = NetworkConfig(stages=2, base_channels=2, patch_dims=(8, 8, 8), xlstm_placement="bot", seed=seed)
    rng = np.random.default_rng(seed)
    target = (rng.uniform(size=(1, 8, 8, 8)) < 0.3).astype(np.float64)
    x = rng.standard_normal((1, 2, 8, 8, 8))
    with precision(np.float64):
        model = build(cfg).astype(np.float64)
        for p in model.parameters():
            # nonzero biases / norm shifts so no gradient is structurally zero
            if p.ndim == 1:
                p.data = p.data + rng.standard_normal(p.shape) * 0.1
        xt = Tensor(x)
        return gradcheck_tensors(
            lambda: dice_ce_loss(model(xt), target), model.parameters(), h=1e-4, ladder=NETWORK_STEP_LADDER, ladder_tol=OP_TOL
        )


def run_suite(points: int = 5, seed: int = 0, network: bool = True, report=None) -> list[CheckResult]:
    """Run every check; ``report(result)`` is called as each finishes."""
    results = []

    def record(name, err, tol, t0):
        res = CheckResult(name, float(err), tol, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)

    rng = np.random.default_rng(seed)
    names = [c[0] for c in _op_cases(rng)]
    for idx, name in enumerate(names):
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(points):
            f, pts = _op_cases(rng)[idx][1]()
            richardson = name.startswith("mlstm")
            worst = max(worst, gradcheck(f, *pts, richardson=richardson))
        record(name, worst, OP_TOL, t0)

    t0 = time.perf_counter()
    worst = max(_bidirectional_check(np.random.default_rng(seed + i)) for i in range(points))
    record("bidirectional_mlstm", worst, OP_TOL, t0)

    t0 = time.perf_counter()
    worst = max(
        _module_check(
            lambda i=i: BiXlstmBlock(np.random.default_rng(seed + i), 3),
            lambda i=i: np.random.default_rng(100 + seed + i).standard_normal((1, 3, 2, 2, 2)),
            richardson=True,
        )
        for i in range(points)
    )
    record("bixlstm_block", worst, COMPOSITE_TOL, t0)

    if network:
        t0 = time.perf_counter()
        record("network_dice_ce", _tiny_network_check(seed), COMPOSITE_TOL, t0)
    return results
