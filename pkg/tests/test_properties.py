import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctattn import autodiff as ad
from ctattn.attention import AttentionConfig, ct_attention, discrete_attention
from ctattn.interp import basis_matrix, fit
from ctattn.quadrature import make_rule

floats = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@st.composite
def knot_times(draw, min_size=2, max_size=7):
    n = draw(st.integers(min_size, max_size))
    gaps = draw(arrays(np.float64, n - 1, elements=st.floats(0.05, 1.0)))
    start = draw(st.floats(-2, 2))
    return start + np.concatenate([[0.0], np.cumsum(gaps)])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=floats))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(ad.Tensor(x), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    shifted = ad.softmax(ad.Tensor(x + 3.0), axis=1).data
    np.testing.assert_allclose(shifted, p, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=floats))
def test_layer_norm_statistics(x):
    out = ad.layer_norm(ad.Tensor(x), groups=2).data.reshape(4, 2, 3)
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    assert np.all(out.var(axis=-1) <= 1.0 + 1e-9)


@settings(max_examples=40, deadline=None)
@given(knot_times(), st.data())
def test_spline_interpolates_and_reproduces_lines(t, data):
    y = data.draw(arrays(np.float64, (len(t), 2), elements=floats))
    s = fit(t, y)
    np.testing.assert_allclose(s(t), y, atol=1e-9)
    line = 0.7 * t[:, None] - 1.3
    q = np.linspace(t[0] - 1, t[-1] + 1, 17)
    np.testing.assert_allclose(fit(t, line)(q)[:, 0], 0.7 * q - 1.3, atol=1e-9)
    np.testing.assert_allclose(basis_matrix(t, q).sum(axis=-1), 1.0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.lists(floats, min_size=10, max_size=10))
def test_gauss_exact_on_polynomials(p, coeffs):
    rule = make_rule("gauss", p)
    poly = np.polynomial.Polynomial(coeffs[:2 * p])
    anti = poly.integ()
    assert abs(rule.integrate(poly(rule.nodes)) - (anti(1) - anti(-1))) < 1e-9 * (1 + np.abs(coeffs).sum())


@settings(max_examples=25, deadline=None)
@given(knot_times(max_size=6), st.integers(0, 2 ** 31), st.sampled_from([1, 2]))
def test_zero_field_constant_query_equals_discrete(t, seed, heads):
    rng = np.random.default_rng(seed)
    n, d = len(t), 4
    Q = np.tile(rng.normal(size=(1, d)), (n, 1))
    K, V = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    out, fld = ct_attention(Q, K, V, t, config=AttentionConfig(heads=heads))
    np.testing.assert_allclose(out.data, discrete_attention(Q, K, V, heads), atol=1e-8)
    np.testing.assert_allclose(fld.weights.data.sum(axis=2), 1.0, atol=1e-9)
