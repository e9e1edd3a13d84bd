import math

import numpy as np
import pytest

from xmdistill.autodiff import Parameter
from xmdistill.optim import cosine_lr, sgd_step, zero_grad


def test_plain_gradient_descent():
    p = Parameter(np.array([1.0]))
    p.grad = np.array([0.5])
    sgd_step([p], lr=1.0, momentum=0.0, damping=0.0, weight_decay=0.0)
    assert p.data[0] == pytest.approx(0.5)


def test_frozen_parameter_unchanged():
    p = Parameter(np.array([3.0]), trainable=False)
    p.grad = np.array([100.0])
    sgd_step([p], lr=1.0, momentum=0.9)
    assert p.data[0] == 3.0
    assert np.all(p.momentum == 0.0)


def test_momentum_recurrence_two_steps():
    # buf1 = 0.9*1 = 0.9 -> p = -0.09; buf2 = 0.9*0.9 + 0.9 -> p = -0.261
    p = Parameter(np.array([0.0]))
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_step([p], lr=0.1, momentum=0.9, damping=0.1)
    assert p.data[0] == pytest.approx(-0.261, abs=1e-12)


def test_weight_decay_enters_gradient():
    p = Parameter(np.array([2.0]))
    p.grad = np.array([0.0])
    sgd_step([p], lr=1.0, weight_decay=0.5)
    assert p.data[0] == pytest.approx(1.0)


def test_negative_hyperparameters_rejected():
    p = Parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    with pytest.raises(ValueError):
        sgd_step([p], lr=-0.1)
    with pytest.raises(ValueError):
        sgd_step([p], lr=0.1, momentum=-1.0)


def test_zero_grad():
    p = Parameter(np.array([0.0]))
    p.grad = np.array([1.0])
    zero_grad([p])
    assert p.grad is None


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 10, 2.0) == pytest.approx(2.0)
    assert cosine_lr(10, 10, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(5, 10, 2.0) == pytest.approx(1.0)


def test_cosine_monotone_non_increasing():
    values = [cosine_lr(s, 50, 0.5) for s in range(51)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[0] == 0.5 and values[-1] == pytest.approx(0.0, abs=1e-15)


def test_cosine_rejects_bad_steps():
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1.0)
    assert cosine_lr(3, 10, 1.0) == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.3)))
