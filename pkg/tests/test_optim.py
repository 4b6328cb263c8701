import math

import numpy as np
import pytest

from mmtlab.autodiff import Tensor
from mmtlab.errors import ConfigError
from mmtlab.optim import AdamW, lr_at_step


def test_first_step_moves_unit_gradient_by_lr():
    # bias correction makes the very first update exactly lr * sign(g)
    p = Tensor([1.0])
    opt = AdamW([p], base_lr=0.1, warmup_steps=1, total_steps=10**9, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9], atol=1e-9)


def test_decoupled_decay_shrinks_before_update():
    p = Tensor([2.0])
    opt = AdamW([p], base_lr=0.5, warmup_steps=1, total_steps=10**9, weight_decay=0.1)
    p.grad = np.array([0.0])
    opt.step()
    # zero gradient: only the decay factor applies
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.5 * 0.1)], atol=1e-12)


def test_no_decay_set_exempts_parameter():
    p = Tensor([2.0])
    q = Tensor([2.0])
    opt = AdamW(
        [p, q], base_lr=0.5, warmup_steps=1, total_steps=10**9,
        weight_decay=0.1, no_decay=frozenset([id(q)]),
    )
    p.grad = np.array([0.0])
    q.grad = np.array([0.0])
    opt.step()
    assert p.data[0] < 2.0
    assert q.data[0] == 2.0


def test_none_grad_is_a_noop():
    p = Tensor([1.0])
    opt = AdamW([p], base_lr=0.1, warmup_steps=1, total_steps=100, weight_decay=0.1)
    opt.step()
    np.testing.assert_allclose(p.data, [1.0], atol=0)


def test_schedule_warmup_then_cosine():
    base, warm, total = 0.8, 10, 50
    # warmup is linear and hits base_lr on the last warmup step
    np.testing.assert_allclose(lr_at_step(0, base, warm, total), base / 10)
    np.testing.assert_allclose(lr_at_step(4, base, warm, total), base / 2)
    np.testing.assert_allclose(lr_at_step(9, base, warm, total), base)
    # midpoint of the cosine half-cycle is base/2, end is zero
    np.testing.assert_allclose(lr_at_step(30, base, warm, total), base / 2, atol=1e-12)
    np.testing.assert_allclose(lr_at_step(50, base, warm, total), 0.0, atol=1e-15)
    # monotone non-increasing across the decay phase
    lrs = [lr_at_step(s, base, warm, total) for s in range(10, 51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_rejects_bad_config():
    with pytest.raises(ConfigError):
        lr_at_step(0, 0.1, 10, 10)
    with pytest.raises(ConfigError):
        lr_at_step(0, 0.1, 0, 0)


def test_adamw_converges_on_quadratic():
    # minimize (p - 3)^2; a few hundred steps should land close
    p = Tensor([0.0])
    opt = AdamW([p], base_lr=0.1, warmup_steps=5, total_steps=400)
    for _ in range(400):
        p.grad = 2.0 * (p.data - 3.0)
        opt.step()
    np.testing.assert_allclose(p.data, [3.0], atol=1e-2)


def test_lr_used_follows_schedule():
    p = Tensor([0.0])
    opt = AdamW([p], base_lr=1.0, warmup_steps=2, total_steps=4)
    p.grad = np.array([1.0])
    used = [opt.step() for _ in range(4)]
    expected = [lr_at_step(s, 1.0, 2, 4) for s in range(4)]
    np.testing.assert_allclose(used, expected)
    assert math.isclose(used[0], 0.5) and math.isclose(used[1], 1.0)
