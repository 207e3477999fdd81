import numpy as np
import pytest

from bxlstm_petct.autodiff import Tensor
from bxlstm_petct.optim import SGD, poly_lr


def test_poly_schedule_values():
    assert poly_lr(0.01, 0, 100) == 0.01
    assert poly_lr(0.01, 100, 100) == 0.0
    assert poly_lr(0.01, 50, 100) == pytest.approx(0.01 * 0.5**0.9)
    assert poly_lr(0.01, 5, 0) == 0.01


def test_nesterov_update_matches_hand_recurrence():
    p = Tensor(np.array([1.0, -2.0]), dtype=np.float64)
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01, clip_norm=None)
    w, buf = np.array([1.0, -2.0]), np.zeros(2)
    for g in (np.array([0.5, 0.25]), np.array([-1.0, 2.0]), np.array([0.0, 0.1])):
        p.grad = g.copy()
        opt.step()
        d = g + 0.01 * w
        buf = 0.9 * buf + d
        w = w - 0.1 * (d + 0.9 * buf)
        np.testing.assert_allclose(p.data, w, rtol=1e-14)


def test_plain_momentum_without_nesterov():
    p = Tensor(np.array([0.0]), dtype=np.float64)
    opt = SGD([p], lr=1.0, momentum=0.5, weight_decay=0.0, nesterov=False, clip_norm=None)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert p.data.tolist() == [-(1.0 + 1.5)]


def test_clipping_bounds_the_applied_gradient():
    p = Tensor(np.zeros(4), dtype=np.float64)
    opt = SGD([p], lr=1.0, momentum=0.0, weight_decay=0.0, clip_norm=1.0)
    p.grad = np.full(4, 10.0)
    norm = opt.step()
    assert norm == pytest.approx(20.0)
    assert np.linalg.norm(p.data) == pytest.approx(1.0, rel=1e-6)


def test_parameters_without_gradient_are_untouched():
    a, b = Tensor(np.ones(2), dtype=np.float64), Tensor(np.ones(2), dtype=np.float64)
    opt = SGD([a, b], lr=0.1)
    a.grad = np.ones(2)
    opt.step()
    assert np.array_equal(b.data, np.ones(2)) and not np.array_equal(a.data, np.ones(2))
    opt.zero_grad()
    assert a.grad is None
