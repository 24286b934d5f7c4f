import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subsample_lab.core import ConfigError, NumericalError
from subsample_lab.minimax import (
    DiscreteMinimaxSpec,
    minimax_pi,
    plugin_pi,
    risk,
    solve_minimax,
    solve_theta_mm,
    worst_case_risk,
)


def random_spec(rng, k=None, gamma=None):
    k = k or int(rng.integers(2, 7))
    p = rng.dirichlet(np.ones(k))
    return DiscreteMinimaxSpec(p, rng.uniform(0.2, 3.0, k), rng.uniform(0, 1, k), float(rng.uniform(0, 0.3)),
                               float(gamma or rng.uniform(0.1, 0.9)))


def random_feasible(rng, spec):
    """pi in [0,1]^k with sum p pi = gamma."""
    pi = rng.uniform(0.01, 1, spec.p_x.size)
    for _ in range(200):
        pi = np.clip(pi * spec.gamma / (spec.p_x @ pi), 1e-6, 1)
        if abs(spec.p_x @ pi - spec.gamma) < 1e-13:
            break
    return pi


def test_box_below_half_takes_upper_corner():
    spec = DiscreteMinimaxSpec([0.2, 0.3, 0.5], [1, 2, 1], [0.1, 0.2, 0.35], 0.1, 0.4)
    theta, _ = solve_theta_mm(spec)
    assert np.allclose(theta, [0.2, 0.3, 0.45])


def test_zero_radius_returns_surrogate():
    spec = DiscreteMinimaxSpec([0.5, 0.5], [1, 1], [0.8, 0.3], 0.0, 0.5)
    assert np.array_equal(solve_theta_mm(spec)[0], spec.theta_su)


def test_symmetric_straddling_box_and_uniform_pi():
    spec = DiscreteMinimaxSpec([0.5, 0.5], [1, 1], [0.45, 0.55], 0.1, 0.6)
    sol = solve_minimax(spec)
    assert np.allclose(sol.theta_mm, 0.5)
    assert np.allclose(sol.pi, 0.6, atol=1e-10)


def test_budget_constraint_holds():
    rng = np.random.default_rng(5)
    for _ in range(20):
        spec = random_spec(rng)
        pi, c = minimax_pi(solve_theta_mm(spec)[0], spec)
        assert spec.p_x @ pi == pytest.approx(spec.gamma, abs=1e-10)
        assert np.all((pi >= 0) & (pi <= 1))


def test_certain_level_is_never_sampled():
    spec = DiscreteMinimaxSpec([0.3, 0.3, 0.4], [1, 1, 1], [0.0, 0.4, 0.7], 0.0, 0.3)
    pi, _ = minimax_pi(spec.theta_su, spec)
    assert pi[0] == 0.0
    assert spec.p_x @ pi == pytest.approx(0.3, abs=1e-10)


def test_all_certain_levels_raise():
    spec = DiscreteMinimaxSpec([0.5, 0.5], [1, 1], [0.0, 1.0], 0.0, 0.5)
    with pytest.raises(NumericalError):
        solve_minimax(spec)


def test_spec_validation():
    with pytest.raises(ConfigError):
        DiscreteMinimaxSpec([0.5, 0.6], [1, 1], [0.2, 0.3], 0.1, 0.5)
    with pytest.raises(ConfigError):
        DiscreteMinimaxSpec([0.5, 0.5], [1, 1], [0.2, 1.3], 0.1, 0.5)


def brute_force_theta(spec, step=1e-4):
    """Per-coordinate grid search of the box for the largest variance term."""
    out = np.empty_like(spec.theta_su)
    for i, (lo, hi) in enumerate(zip(spec.lower, spec.upper)):
        grid = np.append(np.arange(lo, hi, step), hi)
        out[i] = grid[np.argmax(grid * (1 - grid))]
    return out


@pytest.mark.parametrize("seed", range(6))
def test_theta_matches_grid_brute_force(seed):
    spec = random_spec(np.random.default_rng(seed))
    theta, _ = solve_theta_mm(spec)
    assert np.allclose(theta, brute_force_theta(spec), atol=1e-4)


def projected_gradient_pi(theta, spec, iters=20000):
    """Minimize sum theta(1-theta) q/(pi p) over the capped simplex by projected gradient."""
    num = theta * (1 - theta) * spec.q_x
    p = spec.p_x
    pi = np.full(p.size, spec.gamma)

    def project(v):
        # Euclidean projection (in the p-weighted inner product) onto {0<=pi<=1, p.pi=gamma}
        lo, hi = -1e3, 1e3
        for _ in range(200):
            nu = 0.5 * (lo + hi)
            if p @ np.clip(v + nu, 1e-9, 1) > spec.gamma:
                hi = nu
            else:
                lo = nu
        return np.clip(v + 0.5 * (lo + hi), 1e-9, 1)

    step = 1e-3
    for _ in range(iters):
        grad = -num / (pi * pi * p) / p
        pi = project(pi - step * grad / max(1.0, np.abs(grad).max()))
    return pi


def test_pi_matches_projected_gradient_oracle():
    spec = DiscreteMinimaxSpec([0.2, 0.5, 0.3], [1.0, 0.5, 2.0], [0.3, 0.6, 0.15], 0.05, 0.5)
    theta, _ = solve_theta_mm(spec)
    pi, _ = minimax_pi(theta, spec)
    oracle = projected_gradient_pi(theta, spec, iters=4000)
    assert np.allclose(pi, oracle, atol=1e-4)
    assert risk(pi, theta, spec) <= risk(oracle, theta, spec) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_saddle_inequalities(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    sol = solve_minimax(spec)
    for _ in range(100):
        th = rng.uniform(spec.lower, spec.upper)
        assert risk(sol.pi, th, spec) <= sol.risk * (1 + 1e-12)
        assert risk(random_feasible(rng, spec), sol.theta_mm, spec) >= sol.risk * (1 - 1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_minimax_dominates_plugin_in_worst_case(seed):
    spec = random_spec(np.random.default_rng(seed))
    try:
        plug = plugin_pi(spec)
    except NumericalError:
        return  # surrogate certain everywhere: plugin undefined
    sol = solve_minimax(spec)
    assert worst_case_risk(sol.pi, spec) <= worst_case_risk(plug, spec) * (1 + 1e-12)
