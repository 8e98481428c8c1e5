import numpy as np
import pytest

from ctattn import autodiff as ad
from ctattn.autodiff import Tensor
from ctattn.optim import SGD, Adam, NonFiniteGradient, clip_grad_norm


def test_sgd_step_on_square():
    x = Tensor(np.array(1.0), requires_grad=True)
    (g,) = ad.grad(x * x, [x])
    SGD(lr=0.1).step({"x": x}, {"x": g})
    assert x.data == pytest.approx(0.8)


def test_adam_zero_gradient_is_a_no_op():
    x = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    opt = Adam(lr=0.1)
    for _ in range(3):
        opt.step({"x": x}, {"x": np.zeros(2)})
    np.testing.assert_array_equal(x.data, [0.3, -2.0])


def test_adam_converges_on_quadratic_bowl():
    x = Tensor(np.array([1.5, -0.7, 3.0]), requires_grad=True)
    opt = Adam(lr=0.05)
    for _ in range(200):
        (g,) = ad.grad(ad.tsum(x * x * np.array([1.0, 4.0, 0.5])), [x])
        opt.step({"x": x}, {"x": g})
    assert np.abs(x.data).max() < 1e-3


def test_adam_state_round_trip():
    x = Tensor(np.ones(2), requires_grad=True)
    a = Adam(lr=0.1)
    a.step({"x": x}, {"x": np.array([1.0, -1.0])})
    b = Adam()
    b.load_state_dict(a.state_dict())
    y = Tensor(x.data.copy())
    a.step({"x": x}, {"x": np.array([0.5, 0.5])})
    b.step({"x": y}, {"x": np.array([0.5, 0.5])})
    np.testing.assert_array_equal(x.data, y.data)


def test_non_finite_gradient_rejected():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NonFiniteGradient, match="'w'"):
        SGD().step({"w": x}, {"w": np.array([np.nan, 1.0])})


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    total = clip_grad_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    assert np.sqrt(sum((g ** 2).sum() for g in grads.values())) == pytest.approx(1.0)
