import math

import numpy as np
import pytest

from src.exceptions import DimensionMismatch, EmptyInput, NonFiniteFunction, ZeroNorm
from src.numerics import SeededRng, check_gradient, gram, l2_normalize, log_softmax, softmax
from tests.conftest import unit_columns


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(l2_normalize([1, 0, 0]), [1.0, 0.0, 0.0])
    with pytest.raises(ZeroNorm):
        l2_normalize([0, 0])
    with pytest.raises(ZeroNorm):
        l2_normalize([1e-13, 0])


def test_l2_normalize_unit_and_idempotent(rng):
    for _ in range(50):
        v = rng.normal(scale=10.0, size=7)
        u = l2_normalize(v)
        assert abs(np.dot(u, u) - 1.0) < 1e-9
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-9)
        assert np.dot(u, v) > 0


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0]), [0.5, 0.5])
    np.testing.assert_array_equal(softmax([123.4]), [1.0])
    total = math.exp(1) + math.exp(2) + math.exp(3)
    np.testing.assert_allclose(softmax([1, 2, 3]), [math.exp(i) / total for i in (1, 2, 3)], rtol=1e-14)
    with pytest.raises(EmptyInput):
        softmax([])


def test_softmax_properties(rng):
    scores = rng.normal(scale=50.0, size=10_000)
    p = softmax(scores)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(softmax(scores + 1234.5), p, atol=1e-9)
    # no overflow for large scores
    assert np.all(np.isfinite(softmax([1000.0, 1001.0])))


def test_log_softmax_matches_log_of_softmax(rng):
    scores = rng.normal(size=(4, 3))
    np.testing.assert_allclose(log_softmax(scores, axis=0), np.log(softmax(scores, axis=0)), atol=1e-12)


def test_gram_examples():
    np.testing.assert_array_equal(gram(np.eye(2)), np.eye(2))
    column = l2_normalize([1, 2, 3])
    np.testing.assert_allclose(gram(np.stack([column, column], axis=1)), np.ones((2, 2)), atol=1e-12)
    with pytest.raises(DimensionMismatch):
        gram(np.ones(3))


def test_gram_matches_naive_oracle(rng):
    for d, m in ((4, 6), (16, 64)):
        f = unit_columns(rng, d, m)
        s = gram(f)
        for i in range(m):
            for j in range(m):
                assert abs(s[i, j] - math.fsum(f[k, i] * f[k, j] for k in range(d))) < 1e-9
        assert np.array_equal(s, s.T)
        np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-9)
        assert np.all(np.abs(s) <= 1 + 1e-9)


def test_check_gradient_examples():
    assert check_gradient(lambda x: float(x[0] ** 2), lambda x: 2 * x, [3.0]) < 1e-8
    assert check_gradient(lambda x: 5.0, lambda x: np.zeros_like(x), [1.0, 2.0]) < 1e-8
    with pytest.raises(NonFiniteFunction):
        check_gradient(lambda x: float(np.log(x[0])), lambda x: 1 / x, [0.0])


def test_check_gradient_detects_wrong_gradient():
    assert check_gradient(lambda x: float(np.sum(x ** 3)), lambda x: 2 * x, [1.0, 2.0]) > 0.1


def test_seeded_rng_determinism():
    a, b = SeededRng(42), SeededRng(42)
    np.testing.assert_array_equal(a.normal(size=5), b.normal(size=5))
    assert a.integers(1000) == b.integers(1000)
    np.testing.assert_array_equal(a.permutation(10), b.permutation(10))
    assert not np.array_equal(SeededRng(1).normal(size=5), SeededRng(2).normal(size=5))


def test_derive_does_not_advance_parent():
    parent = SeededRng(5)
    parent.derive(3).normal(size=10)
    np.testing.assert_array_equal(parent.normal(size=3), SeededRng(5).normal(size=3))
    assert parent.derive(3).seed == 5 ^ 3


def test_choice_is_without_replacement(rng):
    draw = rng.choice(10, 10)
    assert sorted(draw.tolist()) == list(range(10))
