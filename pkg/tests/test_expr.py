import math

import numpy as np
import pytest

from dissipa.expr import (ExpressionDomainError, ExpressionSyntaxError, differentiate, evaluate, interval_range,
                          parse_expression, second_derivative_sup)
from dissipa.verify import random_expression

P = parse_expression


def test_parse_examples():
    e = P("x1^3 - 3*x1", 1)
    assert evaluate(e, [2.0]) == pytest.approx(2.0)
    e2 = P("-sin(x1) - x2 + 0.0", 2)
    assert evaluate(e2, [0.3, 0.2]) == pytest.approx(-math.sin(0.3) - 0.2)


def test_precedence():
    assert evaluate(P("-x1^2", 1), [3.0]) == -9.0
    assert evaluate(P("2*x1^2 + 1", 1), [3.0]) == 19.0
    assert evaluate(P("x1 ** 2", 1), [3.0]) == 9.0
    assert evaluate(P("x1^-1", 1), [4.0]) == 0.25


def test_syntax_errors():
    with pytest.raises(ExpressionSyntaxError) as ei:
        P("x1 + * x2", 2)
    assert ei.value.offset == 5
    with pytest.raises(ExpressionSyntaxError):
        P("foo(x1)", 1)
    with pytest.raises(ExpressionSyntaxError):
        P("x3", 2)
    with pytest.raises(ExpressionSyntaxError):
        P("", 1)


def test_evaluate_examples():
    assert evaluate(P("sin(x1)", 1), [0.0]) == 0.0
    assert evaluate(P("x1*x2^2", 2), [2.0, 3.0]) == 18.0
    X = np.array([[2.0, 3.0], [1.0, 1.0]])
    np.testing.assert_allclose(evaluate(P("x1*x2^2", 2), X), [18.0, 1.0])
    with pytest.raises(ExpressionDomainError):
        evaluate(P("1/x1", 1), [0.0])


def test_differentiate_examples():
    x = np.array([[0.7]])
    assert str(differentiate(P("x1^3", 1), 0)) == "3*x1^2"
    assert evaluate(differentiate(P("-sin(x1) - x2", 2), 1), [0.1, 0.2]) == -1.0
    d2 = differentiate(differentiate(P("-sin(x1)", 1), 0), 0)
    np.testing.assert_allclose(evaluate(d2, x), np.sin(0.7))


def test_derivative_matches_finite_differences(rng):
    h = 1e-5
    for _ in range(200):
        n = int(rng.integers(1, 4))
        e = P(random_expression(rng, n), n)
        x = rng.uniform(-1, 1, n)
        for i in range(n):
            d = evaluate(differentiate(e, i), x)
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (evaluate(e, xp) - evaluate(e, xm)) / (2 * h)
            assert abs(d - fd) <= 1e-6 * max(1.0, abs(d))


def test_interval_examples():
    r = interval_range(P("x1^2", 1), [[-1, 1]])
    assert (r.lo, r.hi) == (0.0, 1.0)
    r = interval_range(P("sin(x1)", 1), [[-0.5, 0.5]])
    assert r.lo == pytest.approx(math.sin(-0.5)) and r.hi == pytest.approx(math.sin(0.5))
    box = np.array([[-1.0, 1.0], [0.0, 2.0]])
    corners = np.array([[a, b] for a in box[0] for b in box[1]])
    vals = corners[:, 0] * corners[:, 1]
    r = interval_range(P("x1*x2", 2), box)
    assert r.lo <= vals.min() and r.hi >= vals.max()
    assert r.lo == pytest.approx(-2.0) and r.hi == pytest.approx(2.0)
    with pytest.raises(ExpressionDomainError):
        interval_range(P("1/x1", 1), [[-1, 1]])


def test_interval_soundness_random(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 4))
        e = P(random_expression(rng, n, terms=3), n)
        c = rng.uniform(-1.5, 1.5, n)
        w = rng.uniform(0.01, 1.0, n)
        box = np.stack([c - w, c + w], axis=1)
        r = interval_range(e, box)
        X = box[:, 0] + rng.random((50, n)) * (box[:, 1] - box[:, 0])
        v = evaluate(e, X)
        assert np.all(v >= r.lo - 1e-12) and np.all(v <= r.hi + 1e-12)


def test_second_derivative_sup_examples():
    assert second_derivative_sup(P("x1^3", 1), [[0.5, 0.6]]) == pytest.approx(3.6)
    assert second_derivative_sup(P("2.5*x1", 1), [[-3, 3]]) == 0.0
    # dense-grid oracle for -sin(x1) - x2 on [-0.3,0.3]x[-1,1]
    v = second_derivative_sup(P("-sin(x1) - x2", 2), [[-0.3, 0.3], [-1, 1]])
    grid = np.linspace(-0.3, 0.3, 2001)
    oracle = np.max(np.abs(np.sin(grid)))
    assert v >= oracle - 1e-15 and v == pytest.approx(math.sin(0.3), rel=1e-12)


def test_second_derivative_sup_dominates_sampling(rng):
    from dissipa.expr import hessian_exprs
    for _ in range(200):
        n = int(rng.integers(1, 4))
        e = P(random_expression(rng, n), n)
        c = rng.uniform(-1, 1, n)
        w = rng.uniform(0.01, 0.5, n)
        box = np.stack([c - w, c + w], axis=1)
        bound = second_derivative_sup(e, box, n=n)
        X = box[:, 0] + rng.random((400, n)) * (box[:, 1] - box[:, 0])
        m = max(float(np.max(np.abs(evaluate(d2, X)))) for d2 in hessian_exprs(e, n).values())
        assert bound >= m - 1e-12
