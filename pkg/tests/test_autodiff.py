import numpy as np
import pytest

from ctattn import autodiff as ad
from ctattn.autodiff import Tensor
from conftest import check_grads


def leaf(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def test_softmax_uniform():
    out = ad.softmax(Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.full(3, 1 / 3), atol=1e-15)


def test_softplus_at_zero():
    assert ad.softplus(Tensor(0.0), beta=1.0).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_layer_norm_matches_direct_computation():
    x = np.array([1.0, 2.0, 3.0])
    expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    out = ad.layer_norm(Tensor(x))
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    (g,) = ad.grad(x * x, [x])
    assert g == pytest.approx(6.0)


def test_softmax_cross_entropy_grad(rng):
    logits = leaf(rng, 4, 4)
    onehot = np.eye(4)[rng.integers(0, 4, size=4)]

    def fn():
        return -ad.tsum(ad.mul(ad.log_softmax(logits, axis=-1), onehot))

    check_grads(fn, [logits], tol=1e-5)


UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "neg": ad.neg,
    "softplus": lambda a: ad.softplus(a, 2.0), "relu": ad.relu,
    "power": lambda a: ad.power(a, 3.0), "softmax": lambda a: ad.softmax(a, axis=-1),
    "log_softmax": lambda a: ad.log_softmax(a, axis=0), "cumsum": lambda a: ad.cumsum(a, axis=1),
    "layer_norm": lambda a: ad.layer_norm(a), "layer_norm_groups": lambda a: ad.layer_norm(a, groups=2),
    "transpose": lambda a: ad.transpose(a), "reshape": lambda a: a.reshape(4, 3),
    "swapaxes": lambda a: ad.swapaxes(a, 0, 1), "expand_dims": lambda a: ad.expand_dims(a, 1),
    "broadcast_to": lambda a: ad.broadcast_to(a, (2, 3, 4)), "getitem": lambda a: a[1:, ::2],
    "fancy_getitem": lambda a: a[np.array([0, 2, 2])], "sum_axis": lambda a: ad.tsum(a, axis=0),
    "mean": lambda a: ad.mean(a, axis=1, keepdims=True), "scale": lambda a: ad.scale(a, -2.5),
    "block_diag": lambda a: ad.block_diag(a, 2),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(rng, name):
    x = leaf(rng, 3, 4)
    w = rng.normal(size=UNARY[name](x.detach()).shape)
    check_grads(lambda: ad.tsum(ad.mul(UNARY[name](x), w)), [x])


@pytest.mark.parametrize("name", ["log", "sqrt"])
def test_positive_domain_gradients(rng, name):
    x = leaf(rng, 3, 4, positive=True)
    op = getattr(ad, name)
    check_grads(lambda: ad.tsum(op(x) * op(x)), [x])


BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients_with_broadcasting(rng, name):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 3, 1, positive=True)
    w = rng.normal(size=(2, 3, 4))
    check_grads(lambda: ad.tsum(ad.mul(BINARY[name](a, b), w)), [a, b])


def test_matmul_batched_gradients(rng):
    a = leaf(rng, 2, 3, 4)
    b = leaf(rng, 4, 5)
    check_grads(lambda: ad.tsum(ad.tanh(ad.matmul(a, b))), [a, b])


def test_concat_stack_where_gradients(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    cond = rng.uniform(size=(2, 3)) > 0.5

    def fn():
        c = ad.concat([a, b], axis=1)
        s = ad.stack([a, b], axis=0)
        return ad.tsum(c * c) + ad.tsum(ad.exp(s)) + ad.tsum(ad.where(cond, a, b) ** 2)

    check_grads(fn, [a, b])


def test_layer_norm_affine_gradients(rng):
    x, g, b = leaf(rng, 5, 4), leaf(rng, 4), leaf(rng, 4)
    w = rng.normal(size=(5, 4))
    check_grads(lambda: ad.tsum(ad.layer_norm(x, g, b, groups=2) * w), [x, g, b])


def test_masked_softmax_zeroes_masked_entries(rng):
    mask = np.array([[True, False, True], [False, True, True]])
    out = ad.softmax(Tensor(rng.normal(size=(2, 3))), axis=1, mask=mask)
    assert np.all(out.data[~mask] == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-15)
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.zeros((1, 2))), mask=np.zeros((1, 2), dtype=bool))


def test_checkpoint_matches_plain_graph(rng):
    x, w = leaf(rng, 3, 3), leaf(rng, 3, 3)

    def body(x, w):
        return ad.tanh(ad.matmul(x, w)) * x

    plain = ad.grad(ad.tsum(body(x, w)), [x, w])
    ckpt = ad.grad(ad.tsum(ad.checkpoint(body, x, w)), [x, w])
    for a, b in zip(plain, ckpt):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_shared_subexpression_accumulates(rng):
    x = leaf(rng, 3)
    y = ad.exp(x)
    (g,) = ad.grad(ad.tsum(y * y + y), [x])
    np.testing.assert_allclose(g, 2 * np.exp(2 * x.data) + np.exp(x.data))


def test_backward_accumulates_into_leaves():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ad.backward(ad.tsum(x * x))
    ad.backward(ad.tsum(x * x))
    np.testing.assert_allclose(x.grad, [4.0, 8.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_shape_errors():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.backward(Tensor(np.ones(3), requires_grad=True) * 1.0)


def test_dropout_scales_survivors(rng):
    x = Tensor(np.ones(10000))
    out = ad.dropout(x, 0.25, rng)
    kept = out.data[out.data > 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    assert abs(kept.size / 10000 - 0.75) < 0.03
    assert ad.dropout(x, 0.25, rng, training=False) is x


def test_debug_mode_flags_non_finite():
    with ad.debug_mode(), np.errstate(invalid="ignore"):
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor(np.array([-1.0])))
