import math

import numpy as np
import pytest

from ctattn import autodiff as ad
from ctattn.attention import (AttentionConfig, CTMultiHeadAttention, approximate_attention,
                              attention_mask, construct_universal_keys, continuous_keys_values,
                              ct_attention, ct_mha, discrete_attention, random_universal_case,
                              verify_universal)
from ctattn.interp import fit
from ctattn.ode import FunctionField, NFECounter
from ctattn.quadrature import make_rule, parse_rule
from conftest import check_grads

GAUSS3 = make_rule("gauss", 3)


def const_field(c):
    c = np.asarray(c, dtype=np.float64)
    return FunctionField(lambda t, x: x * 0.0 + c)


def test_zero_field_keys_are_constant(rng):
    K, V = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    t = np.sort(rng.uniform(0, 1, 4))
    keys, vals = continuous_keys_values(K, V, t, t, GAUSS3)
    for state in keys.states:
        np.testing.assert_array_equal(state.data[0], np.broadcast_to(K, (4, 4, 2)))
    for state in vals.states:
        np.testing.assert_array_equal(state.data[0], np.broadcast_to(V, (4, 4, 2)))


def test_trajectory_starts_at_key(rng):
    K, V = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    t = np.array([0.0, 0.4, 0.9])
    field = FunctionField(lambda s, x: ad.tanh(x) + s)
    rule = make_rule("gauss", 2)
    start = continuous_keys_values(K, V, t, t, make_rule("linear"), field, None, 0.05)[0]
    np.testing.assert_allclose(start.states[0].data[0], np.broadcast_to(K, (3, 3, 2)), atol=1e-10)
    assert rule.size == 2


def test_diagonal_score_is_query_dot_key():
    Q = np.array([[1.0, 0.0], [0.3, 0.2]])
    K = np.array([[0.5, 2.0], [1.0, -1.0]])
    V = np.zeros((2, 2))
    field = const_field([0.7, -0.4])
    _, fld = ct_attention(Q, K, V, [0.0, 1.0], config=AttentionConfig(rule=GAUSS3),
                          field_k=field, field_v=field)
    assert fld.scores.data[0, 0, 0, 0] == 0.5
    assert fld.scores.data[0, 1, 1, 0] == pytest.approx(0.3 - 0.2, abs=1e-15)


def test_off_diagonal_matches_polynomial_integral(rng):
    Q = rng.normal(size=(2, 3))
    K = rng.normal(size=(2, 3))
    c = rng.normal(size=3)
    t = np.array([0.2, 1.1])
    cfg = AttentionConfig(rule=GAUSS3, interp="linear", step_size=0.05)
    _, fld = ct_attention(Q, K, np.zeros((2, 3)), t, config=cfg, field_k=const_field(c),
                          field_v=const_field(np.zeros(3)))
    P = np.polynomial.Polynomial
    q = [P.fit(t, Q[:, k], 1, domain=[-1, 1]) for k in range(3)]
    for j in range(2):
        for i in range(2):
            if i == j:
                continue
            lo, hi = t[i], t[j]
            integrand = sum(q[k] * P([K[i, k] - c[k] * lo, c[k]]) for k in range(3))
            anti = integrand.integ()
            exact = (anti(hi) - anti(lo)) / (hi - lo)
            assert fld.scores.data[0, j, i, 0] == pytest.approx(exact, abs=1e-9)


def test_expected_value_of_linear_ramp():
    V = np.zeros((2, 1))
    _, fld = ct_attention(np.zeros((2, 1)), np.zeros((2, 1)), V, [0.0, 2.0],
                          config=AttentionConfig(step_size=0.1), field_k=const_field([0.0]),
                          field_v=const_field([1.0]))
    assert fld.values.data[0, 1, 0, 0] == pytest.approx(1.0, abs=1e-12)


def test_expected_value_diagonal_is_value(rng):
    V = rng.normal(size=(3, 2))
    field = FunctionField(lambda t, x: ad.tanh(x) * 0.3 + t)
    t = np.array([0.0, 0.3, 1.0])
    _, fld = ct_attention(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), V, t,
                          config=AttentionConfig(rule=GAUSS3), field_k=field, field_v=field)
    for i in range(3):
        np.testing.assert_allclose(fld.values.data[0, i, i], V[i], atol=1e-12)


def test_single_observation_returns_its_value(rng):
    V = rng.normal(size=(1, 4))
    out, _ = ct_attention(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), V, [0.5],
                          config=AttentionConfig(heads=2))
    np.testing.assert_allclose(out.data, V, atol=1e-15)


def test_equal_scores_give_plain_average(rng):
    V = rng.normal(size=(4, 2))
    field = const_field([0.5, -1.0])
    t = np.array([0.0, 0.2, 0.5, 0.9])
    out, fld = ct_attention(np.zeros((4, 2)), rng.normal(size=(4, 2)), V, t,
                            config=AttentionConfig(), field_k=field, field_v=field)
    np.testing.assert_allclose(out.data, fld.values.data[0].mean(axis=1), atol=1e-14)


@pytest.mark.parametrize("heads,spec", [(1, "linear"), (2, "gauss:3"), (4, "gauss:5")])
def test_zero_field_constant_query_reduces_to_discrete(rng, heads, spec):
    n, d = 6, 8
    Q = np.tile(rng.normal(size=(1, d)), (n, 1))
    K, V = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    t = np.sort(rng.uniform(0, 1, n))
    out, fld = ct_attention(Q, K, V, t, config=AttentionConfig(heads=heads, rule=parse_rule(spec)))
    np.testing.assert_allclose(out.data, discrete_attention(Q, K, V, heads), atol=1e-8)
    np.testing.assert_allclose(fld.weights.data.sum(axis=2), 1.0, atol=1e-9)


def test_causal_mask_blocks_future(rng):
    t = np.array([[0.0, 0.5, 1.0]])
    mask = attention_mask(t, t, causal=True)[0, :, :, 0]
    np.testing.assert_array_equal(mask, np.tril(np.ones((3, 3), dtype=bool)))
    cfg = AttentionConfig(causal=True)
    Q, K, V = (rng.normal(size=(3, 2)) for _ in range(3))
    base, _ = ct_attention(Q, K, V, t[0], config=cfg, field_k=const_field([0.1, 0.2]))
    K2, V2 = K.copy(), V.copy()
    K2[2] += 5.0
    V2[2] -= 3.0
    moved, _ = ct_attention(Q, K2, V2, t[0], config=cfg, field_k=const_field([0.1, 0.2]))
    np.testing.assert_allclose(moved.data[:2], base.data[:2], atol=1e-14)


def test_padding_matches_unpadded_sequence(rng):
    layer = CTMultiHeadAttention(4, AttentionConfig(heads=2), rng)
    x = rng.normal(size=(3, 4))
    t = np.array([0.0, 0.4, 0.8])
    short = layer(x, t).data
    xp = np.concatenate([x, rng.normal(size=(2, 4))])[None]
    tp = np.array([[0.0, 0.4, 0.8, 0.8, 0.8]])
    padded = layer(xp, tp, lengths=np.array([3])).data[0, :3]
    np.testing.assert_allclose(padded, short, atol=1e-12)


def test_single_head_identity_projections(rng):
    d = 3
    layer = CTMultiHeadAttention(d, AttentionConfig(heads=1, rule=GAUSS3), rng)
    for name in ("wq", "wk", "wv", "wo"):
        getattr(layer, name).data[...] = np.eye(d)
    x = rng.normal(size=(4, d))
    t = np.array([0.0, 0.1, 0.5, 0.6])
    expected, _ = ct_attention(x, x, x, t, config=layer.config, field_k=layer.field)
    np.testing.assert_allclose(layer(x, t).data, expected.data, atol=1e-15)


def test_identical_heads_give_identical_halves(rng):
    h = 2
    layer = CTMultiHeadAttention(2 * h, AttentionConfig(heads=2, rule=GAUSS3), rng,
                                 shared_field=True)
    # per-feature field vectors are not tied by sharing; make the blocks equal
    for name in ("wq", "wk", "wv", "wo"):
        block = rng.normal(size=(h, h))
        getattr(layer, name).data[...] = np.kron(np.eye(2), block)
    for p in layer.field.params:
        if p.ndim == 1:
            p.data[...] = np.tile(p.data[:h], 2 * 2)
    half = rng.normal(size=(5, h))
    x = np.concatenate([half, half], axis=1)
    out = layer(x, np.linspace(0, 1, 5)).data
    np.testing.assert_allclose(out[:, :h], out[:, h:], atol=1e-13)


def test_mha_query_weight_gradient(rng):
    layer = CTMultiHeadAttention(4, AttentionConfig(heads=1, rule=GAUSS3, step_size=0.25), rng)
    x = rng.normal(size=(3, 4))
    t = np.array([0.0, 0.4, 1.0])
    check_grads(lambda: ad.tsum(layer(x, t)), [layer.wq], tol=1e-3)


def test_functional_form_matches_module(rng):
    layer = CTMultiHeadAttention(4, AttentionConfig(heads=2), rng)
    x = rng.normal(size=(3, 4))
    t = np.array([0.0, 0.4, 1.0])
    weights = {k: getattr(layer, k) for k in ("wq", "wk", "wv", "wo")}
    np.testing.assert_allclose(ct_mha(x, t, weights, layer.config, layer.field).data,
                               layer(x, t).data, atol=1e-15)


def test_query_times_off_the_knots(rng):
    layer = CTMultiHeadAttention(4, AttentionConfig(heads=2), rng)
    x = rng.normal(size=(4, 4))
    t = np.array([0.0, 0.3, 0.6, 1.0])
    both = layer(x, t, query_times=np.array([0.45, 0.6])).data
    single = layer(x, t, query_times=np.array([0.45])).data
    knots = layer(x, t).data
    np.testing.assert_allclose(both[0], single[0], atol=1e-13)
    np.testing.assert_allclose(both[1], knots[2], atol=1e-13)


def test_nfe_of_one_layer(rng):
    counts = {}
    for spec in ("linear", "gauss:4"):
        layer = CTMultiHeadAttention(4, AttentionConfig(heads=2, rule=parse_rule(spec)), rng)
        for n in (3, 7):
            c = NFECounter()
            with ad.no_grad():
                layer(rng.normal(size=(n, 4)), np.linspace(0, 1, n), counter=c)
            counts[spec, n] = c.count
    assert counts["linear", 3] == counts["linear", 7] == 80
    # interior nodes shorten a few steps but the count stays independent of N
    assert counts["gauss:4", 3] == counts["gauss:4", 7] >= 80


def test_unsorted_times_rejected(rng):
    x = rng.normal(size=(3, 2))
    with pytest.raises(ValueError):
        ct_attention(x, x, x, [0.0, 0.5, 0.2])


def test_bad_head_count(rng):
    x = rng.normal(size=(3, 3))
    with pytest.raises(ad.ShapeError):
        ct_attention(x, x, x, [0.0, 0.5, 1.0], config=AttentionConfig(heads=2))


# -- constructive key functions -------------------------------------------

def test_reconstruction_of_a_forward_pass(rng):
    n, d = 4, 2
    t = np.array([0.0, 0.3, 0.55, 1.0])
    Q = rng.uniform(0.5, 1.5, size=(n, d))
    K = rng.normal(size=(n, d))
    _, fld = ct_attention(Q, K, np.zeros((n, d)), t, config=AttentionConfig(rule=make_rule("gauss", 5)))
    target = fld.scores.data[0, :, :, 0]
    q = fit(t, Q)
    keys = construct_universal_keys(target, q, K, t)
    approx = approximate_attention(q, keys, t, make_rule("gauss", 5))
    assert np.abs(approx - target).max() < 1e-3


def test_random_target_reconstruction(rng):
    t, q, K, target = random_universal_case(rng, 2, 2)
    keys = construct_universal_keys(target, q, K, t)
    rule = make_rule("gauss", 5)
    approx = approximate_attention(q, keys, t, rule)
    oracle = approximate_attention(q, keys, t, rule, subdivisions=10)
    assert np.abs(approx - target).max() < 1e-3
    assert np.abs(oracle - target).max() < 1e-3
    np.testing.assert_array_equal(np.diag(approx), np.einsum("id,id->i", q(t), K))


def test_constructed_key_passes_through_initial_key(rng):
    t, q, K, target = random_universal_case(rng, 3, 3)
    keys = construct_universal_keys(target, q, K, t)
    for i, key in enumerate(keys):
        np.testing.assert_allclose(key(t[i]), K[i], atol=1e-12)


def test_invalid_diagonal_rejected(rng):
    t, q, K, target = random_universal_case(rng, 3, 2)
    target[1, 1] += 0.1
    with pytest.raises(ValueError, match="diagonal"):
        construct_universal_keys(target, q, K, t)


def test_query_through_zero_rejected():
    t = np.array([0.0, 1.0])
    q = fit(t, np.array([[1.0, 1.0], [-1.0, 1.0]]))
    K = np.ones((2, 2))
    target = np.diag(np.einsum("id,id->i", q(t), K))
    with pytest.raises(ValueError):
        construct_universal_keys(target, q, K, t)


def test_verifier_report(rng):
    reports = verify_universal(6, make_rule("gauss", 5), seed=3)
    assert max(r["max_error"] for r in reports) < 1e-3
    assert {r["n"] for r in reports} == {2, 3, 4}
    assert math.isfinite(max(r["unsplit_error"] for r in reports))
