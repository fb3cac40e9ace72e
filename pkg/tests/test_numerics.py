import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parampde.numerics import NotPositiveDefinite, Rng, cholesky, gauss_hermite, rng_normal, rng_uniform


def test_cholesky_identity():
    assert np.array_equal(cholesky(np.eye(2)), np.eye(2))


def test_cholesky_known_factor():
    L = cholesky(np.array([[1.0, 0.5], [0.5, 1.0]]))
    np.testing.assert_allclose(L, [[1.0, 0.0], [0.5, math.sqrt(0.75)]], atol=1e-15)
    np.testing.assert_allclose(L @ L.T, [[1.0, 0.5], [0.5, 1.0]], atol=1e-15)


def test_cholesky_indefinite():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ValueError, match="symmetric"):
        cholesky(np.array([[1.0, 0.5], [0.4, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31))
def test_cholesky_reconstructs_random_spd(d, seed):
    g = np.random.default_rng(seed)
    a = g.normal(size=(d, d))
    c = a @ a.T + d * np.eye(d)
    L = cholesky(c)
    assert np.allclose(np.triu(L, 1), 0.0)
    np.testing.assert_allclose(L @ L.T, c, rtol=1e-12, atol=1e-12)


def test_gauss_hermite_small_rules():
    r1 = gauss_hermite(1)
    np.testing.assert_allclose(r1.nodes, [0.0], atol=1e-15)
    np.testing.assert_allclose(r1.weights, [math.sqrt(math.pi)], rtol=1e-14)
    r2 = gauss_hermite(2)
    np.testing.assert_allclose(r2.nodes, [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-14)
    np.testing.assert_allclose(r2.weights, [math.sqrt(math.pi) / 2] * 2, rtol=1e-14)


def test_gauss_hermite_fourth_moment():
    r = gauss_hermite(10)
    assert abs(np.sum(r.weights * r.nodes**4) - 0.75 * math.sqrt(math.pi)) < 1e-12


@pytest.mark.parametrize("n", [3, 8, 32])
def test_gauss_hermite_polynomial_exactness(n):
    r = gauss_hermite(n)
    for k in range(0, 2 * n, 2):
        exact = math.gamma((k + 1) / 2)
        assert abs(np.sum(r.weights * r.nodes**k) - exact) <= 1e-10 * max(1.0, exact)
    assert abs(np.sum(r.weights * r.nodes ** (2 * n - 1))) < 1e-8
    np.testing.assert_allclose(r.nodes, -r.nodes[::-1], atol=1e-14)


def test_uniform_range_and_validation():
    rng = Rng(0)
    v = rng.uniform(0.0, 1.0, 1000)
    assert np.all((v >= 0) & (v < 1))
    with pytest.raises(ValueError):
        rng.uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        rng_uniform(Rng(0), 2.0, 1.0)


def test_uniform_stream_advances_and_mean():
    rng = Rng(42)
    assert rng_uniform(rng, 0, 1) != rng_uniform(rng, 0, 1)
    assert abs(Rng(42).uniform(0, 1, 10**5).mean() - 0.5) < 0.01


def test_normal_moments_and_determinism():
    z = Rng(3).normal(10**6)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1) < 0.02
    a = [rng_normal(r) for r in [Rng(5)] * 10]
    b = [rng_normal(r) for r in [Rng(5)] * 10]
    assert a == b


def test_spawned_streams_are_distinct_and_reproducible():
    base = Rng(7)
    a, b = base.spawn(0).normal(5), base.spawn(1).normal(5)
    assert not np.allclose(a, b)
    assert np.array_equal(a, Rng(7).spawn(0).normal(5))
