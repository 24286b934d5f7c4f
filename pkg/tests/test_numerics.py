import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from subsample_lab.core import LossFunction, NumericalError
from subsample_lab.numerics import (
    bisect_monotone,
    gauss_hermite,
    maximize_concave_scalar,
    piecewise_gauss,
    prox_loss,
    sym_inv,
)


def double_factorial(n: int) -> int:
    return math.prod(range(n, 0, -2)) if n > 0 else 1


@pytest.mark.parametrize("order", [2, 5, 20, 40, 80])
def test_hermite_even_moments_exact_to_degree(order):
    q = gauss_hermite(order)
    assert q.weights.sum() == pytest.approx(1.0, abs=1e-15)
    for k in range(0, order):  # degree 2k <= 2*order - 1 is integrated exactly
        if 2 * k > 2 * order - 1:
            break
        expected = double_factorial(2 * k - 1)
        assert q.expect(lambda x: x ** (2 * k)) == pytest.approx(expected, rel=1e-10)


def test_hermite_odd_moments_vanish():
    q = gauss_hermite(40)
    for k in range(1, 40, 2):
        assert abs(q.expect(lambda x: x**k)) < 1e-8 * double_factorial(k)


@pytest.mark.parametrize("order", [1, 0, 201])
def test_hermite_order_range(order):
    with pytest.raises(ValueError):
        gauss_hermite(order)


@given(st.floats(-4, 4), st.floats(-4, 4))
def test_piecewise_rule_integrates_steps_exactly(a, b):
    lo, hi = min(a, b), max(a, b)
    g = piecewise_gauss([lo, hi])
    est = g.weights @ ((g.nodes >= lo) & (g.nodes < hi))
    assert est == pytest.approx(ndtr(hi) - ndtr(lo), abs=1e-13)


def test_piecewise_rule_smooth_moments():
    g = piecewise_gauss()
    assert g.expect(np.abs) == pytest.approx(math.sqrt(2 / math.pi), abs=1e-13)
    assert g.expect(lambda x: x**4) == pytest.approx(3.0, abs=1e-12)
    assert g.expect(lambda x: np.cos(x)) == pytest.approx(math.exp(-0.5), abs=1e-13)


@given(st.floats(-3, 3), st.floats(0.1, 5), st.booleans())
def test_bisect_monotone_solves_cubic(target, scale, decreasing):
    sign = -1 if decreasing else 1

    def f(x):
        return sign * scale * (x**3 + x)

    x = bisect_monotone(f, target, -0.5, 0.5, tol=1e-12)
    assert abs(f(x) - target) <= 1e-10


def test_bisect_monotone_no_bracket():
    with pytest.raises(NumericalError):
        bisect_monotone(lambda x: 1.0, 2.0, 0.0, 1.0)


def test_bisect_stays_inside_bracket():
    x = bisect_monotone(lambda x: x, 0.3, 0.0, 1.0)
    assert 0.0 <= x <= 1.0


def _grid_prox(kind, a, y, g, mu, w=1.0):
    loss = LossFunction(kind)
    obj = lambda u: w * loss.value(a + u, y) + 0.5 * mu * (g - u) ** 2  # noqa: E731
    grid = np.linspace(-20, 20, 400_001)
    u0 = grid[np.argmin(obj(grid))]
    fine = np.linspace(u0 - 2e-4, u0 + 2e-4, 40_001)
    return fine[np.argmin(obj(fine))]


@pytest.mark.parametrize("a,y,g,mu", [(0.0, 1.0, 0.0, 1.0), (2.0, -1.0, 0.5, 0.3), (-3.0, 1.0, 1.0, 5.0),
                                      (0.7, -1.0, -2.0, 0.05)])
def test_prox_logistic_matches_grid(a, y, g, mu):
    u, _ = prox_loss(LossFunction("logistic"), a, y, g, mu)
    assert float(u) == pytest.approx(_grid_prox("logistic", a, y, g, mu), abs=1e-7)


@settings(max_examples=200)
@given(st.floats(-30, 30), st.sampled_from([-1.0, 1.0]), st.floats(-30, 30), st.floats(1e-4, 1e6),
       st.floats(0.05, 20))
def test_prox_logistic_stationarity(a, y, g, mu, w):
    u, val = prox_loss("logistic", np.array([a]), np.array([y]), np.array([g]), mu, w)
    v = a + u[0]
    resid = w * (math.tanh(v) - y) - mu * (g - u[0])
    assert abs(resid) <= 1e-10 * max(1.0, mu * max(1.0, abs(a), abs(g)))


def test_prox_square_closed_form():
    u, val = prox_loss("square", 1.0, 3.0, 0.5, 2.0)
    # minimize (y - a - u)^2/2 + mu/2 (g - u)^2
    assert float(u) == pytest.approx((3.0 - 1.0 + 2.0 * 0.5) / 3.0)
    assert float(u) == pytest.approx(_grid_prox("square", 1.0, 3.0, 0.5, 2.0), abs=1e-7)


def test_prox_needs_positive_mu():
    with pytest.raises(ValueError):
        prox_loss("square", 0.0, 0.0, 0.0, 0.0)


def test_maximize_concave_interior_and_boundary():
    x, fx = maximize_concave_scalar(lambda t: -(t - 3.0) ** 2, 0.0, 10.0, tol=1e-12)
    assert x == pytest.approx(3.0, abs=1e-6)
    x, fx = maximize_concave_scalar(lambda t: -(t + 1.0) ** 2, 0.0, 10.0)
    assert x == 0.0 and fx == -1.0


def test_maximize_concave_expands_and_uses_derivative():
    x, _ = maximize_concave_scalar(lambda t: -(t - 100.0) ** 2, 0.0, 10.0)
    assert x == pytest.approx(100.0, abs=1e-5)
    x, _ = maximize_concave_scalar(lambda t: -(t - 100.0) ** 2, 0.0, 10.0, dfn=lambda t: -2 * (t - 100.0))
    assert x == pytest.approx(100.0, abs=1e-9)
    x, _ = maximize_concave_scalar(lambda t: -t, 0.0, 10.0, dfn=lambda t: -1.0)
    assert x == 0.0


def test_sym_inv():
    m = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.allclose(sym_inv(m) @ m, np.eye(2))
    with pytest.raises(NumericalError):
        sym_inv(np.array([[1.0, 1.0], [1.0, 1.0]]))
