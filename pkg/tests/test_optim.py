import numpy as np
import pytest

from mmdetect import autodiff as ad
from mmdetect.autodiff import Tensor
from mmdetect.errors import NonFiniteGradient
from mmdetect.optim import AdamState, adam_step


def test_zero_grad_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32), requires_grad=True)
    before = p.data.copy()
    state = AdamState()
    for _ in range(5):
        adam_step({"p": p}, {"p": np.zeros(3, dtype=np.float32)}, state, lr=0.1)
    assert np.array_equal(p.data, before)
    assert state.t == 5


def test_first_step_equals_lr_for_unit_grad():
    # bias correction makes step 1 move by exactly lr/(1+eps)
    p = Tensor(np.array([0.5], dtype=np.float32), requires_grad=True)
    adam_step({"p": p}, {"p": np.array([1.0], dtype=np.float32)}, AdamState(), lr=0.1)
    assert abs(float(p.data[0]) - 0.4) < 1e-6


def test_quadratic_bowl_converges():
    p = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    state = AdamState()
    for _ in range(200):
        adam_step({"p": p}, {"p": 2.0 * p.data}, state, lr=0.05)
    assert abs(float(p.data[0])) < 0.1


def test_nonfinite_gradient_aborts_whole_step():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    q = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    state = AdamState()
    grads = {"a_fine": np.array([1.0], dtype=np.float32),
             "b_bad": np.array([np.nan], dtype=np.float32)}
    with pytest.raises(NonFiniteGradient):
        adam_step({"a_fine": p, "b_bad": q}, grads, state, lr=0.1)
    # neither parameter moved, step counter untouched
    assert float(p.data[0]) == 1.0 and float(q.data[0]) == 2.0
    assert state.t == 0


def test_uses_tensor_grad_buffers_when_grads_none():
    p = Tensor(np.array([1.0, 1.0], dtype=np.float32), requires_grad=True)
    loss = ad.mul(p, p).sum()
    ad.backward(loss)
    adam_step({"p": p}, None, AdamState(), lr=0.01)
    assert (p.data < 1.0).all()


def test_update_order_is_deterministic():
    def run():
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        state = AdamState()
        for i in range(10):
            g = np.full(2, 0.1 * (i + 1), dtype=np.float32)
            adam_step({"b": b, "a": a}, {"a": g, "b": -g}, state, lr=0.03)
        return a.data.copy(), b.data.copy()

    a1, b1 = run()
    a2, b2 = run()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
