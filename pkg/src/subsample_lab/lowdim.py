"""Fixed-dimension asymptotics of data-selected M-estimators.

Everything here is an expectation over a discretized feature population:
a finite set of weighted points standing in for the law of x. The
per-sample gradient covariance and Hessian are rank one in x,

    G(x) = g(x) x x^T,    H(x) = h(x) x x^T,

which covers least squares, logistic GLMs, and misspecified linear fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .core import (
    ConfigError,
    Dataset,
    EstimationMetric,
    LabelKernel,
    NumericalError,
    SelectionRule,
    curvature,
    make_rng,
)
from .numerics import bisect_monotone, gauss_hermite, sym_inv

# -- populations ---------------------------------------------------------------


@dataclass(frozen=True)
class Population:
    """Weighted point cloud representing the feature law.

    `discrete` marks genuinely atomic laws. Quantile thresholds split the
    boundary atom fractionally in every case, since a grid stand-in for a
    continuous law is itself atomic.
    """

    points: np.ndarray
    weights: np.ndarray
    discrete: bool = False
    name: str = ""

    def __post_init__(self) -> None:
        x = np.asarray(self.points, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (x.shape[0],) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigError("population weights must be non-negative, one per point")
        object.__setattr__(self, "points", x)
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def p(self) -> int:
        return self.points.shape[1]

    def mean(self, values: np.ndarray) -> float:
        return float(self.weights @ values)

    def second_moment(self, scale: np.ndarray | None = None) -> np.ndarray:
        """E[scale(x) x x^T]."""
        w = self.weights if scale is None else self.weights * scale
        return (self.points * w[:, None]).T @ self.points

    # constructors
    @classmethod
    def symmetric_1d(cls, abs_quantile: Callable[[np.ndarray], np.ndarray], m: int, name: str) -> Population:
        """+-F^{-1}(u) at equal-mass midpoints u of the law of |X|."""
        half = m // 2
        u = (np.arange(half) + 0.5) / half
        r = abs_quantile(u)
        pts = np.concatenate([-r[::-1], r])
        return cls(pts, np.full(pts.size, 1.0 / pts.size), False, name)

    @classmethod
    def uniform_1d(cls, x_max: float = 1.0, m: int = 200_000) -> Population:
        return cls.symmetric_1d(lambda u: x_max * u, m, "uniform")

    @classmethod
    def power_law_1d(cls, alpha: float, x_max: float, m: int = 200_000) -> Population:
        """|X| with density proportional to x^-alpha on [1, x_max], random sign."""
        if alpha <= 1 or x_max <= 1:
            raise ConfigError("power law needs alpha > 1 and x_max > 1")
        tail = x_max ** (1 - alpha)
        return cls.symmetric_1d(lambda u: (1 - u * (1 - tail)) ** (1 / (1 - alpha)), m, "power-law")

    @classmethod
    def gaussian(cls, p: int, m: int = 100_000, seed: int = 0) -> Population:
        """Scrambled Halton grid pushed through the normal quantile."""
        u = qmc.Halton(d=p, scramble=True, seed=seed).random(m)
        return cls(ndtri(u), np.full(m, 1.0 / m), False, "gaussian")

    @classmethod
    def from_dataset(cls, data: Dataset) -> Population:
        return cls(data.features, np.full(data.n, 1.0 / data.n), True, "empirical")

    @classmethod
    def atoms(cls, points, probs) -> Population:
        return cls(points, probs, True, "discrete")


@dataclass(frozen=True)
class OneDimLaw:
    """Symmetric scalar law with closed-form moments (uniform or power law)."""

    kind: str
    x_max: float = 1.0
    alpha: float | None = None

    def population(self, m: int = 200_000) -> Population:
        if self.kind == "uniform":
            return Population.uniform_1d(self.x_max, m)
        return Population.power_law_1d(self.alpha, self.x_max, m)

    def _norm(self) -> float:
        a = self.alpha
        return (a - 1) / (1 - self.x_max ** (1 - a))

    def abs_moment(self, k: int, r: float | None = None) -> float:
        """E[|X|^k 1{|X| >= r}]."""
        xm = self.x_max
        if self.kind == "uniform":
            lo = 0.0 if r is None else r
            return (xm ** (k + 1) - lo ** (k + 1)) / ((k + 1) * xm)
        a, c = self.alpha, self._norm()
        lo = 1.0 if r is None else r
        e = k + 1 - a
        if abs(e) < 1e-12:
            return c * math.log(xm / lo)
        return c * (xm**e - lo**e) / e

    def tail_point(self, gamma: float) -> float:
        """r with P(|X| >= r) = gamma."""
        if self.kind == "uniform":
            return self.x_max * (1 - gamma)
        a = self.alpha
        return (self.x_max ** (1 - a) + gamma * (a - 1) / self._norm()) ** (1 / (1 - a))


# -- conditional moments -------------------------------------------------------


@dataclass(frozen=True)
class ConditionalMoments:
    """Rank-one gradient covariance and Hessian: G(x) = g(x) xx^T, H(x) = h(x) xx^T."""

    family: str
    g_scale: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    h_scale: Callable[[np.ndarray], np.ndarray] = field(compare=False)
    theta_star: np.ndarray | None = None

    @classmethod
    def linear_regression(cls, tau: float = 1.0) -> ConditionalMoments:
        t2 = tau * tau
        return cls("linear-regression", lambda x: np.full(x.shape[0], t2), lambda x: np.ones(x.shape[0]))

    @classmethod
    def glm_logistic(cls, theta_star) -> ConditionalMoments:
        th = np.asarray(theta_star, dtype=float)

        def scale(x):
            return curvature(x @ th)

        return cls("glm-logistic", scale, scale, th)

    @classmethod
    def misspecified_linear(cls, kernel: LabelKernel, theta0, order: int = 80) -> ConditionalMoments:
        """Least-squares fit of a single-index model under Gaussian features.

        The population slope along theta0 is E[Y z]/E[z^2]; g(x) is the
        conditional mean squared residual at z = <theta0, x>.
        """
        th0 = np.asarray(theta0, dtype=float)
        s = float(np.linalg.norm(th0))
        q = gauss_hermite(order)
        z = s * q.nodes
        ey_z = kernel.conditional_expectation(z, lambda y: y, order)
        slope = float(q.weights @ (ey_z * z)) / (s * s)

        def resid2(x):
            zz = x @ th0
            return kernel.conditional_expectation(zz, lambda y: (y - slope * zz[:, None]) ** 2, order)

        return cls("misspecified-linear", resid2, lambda x: np.ones(x.shape[0]), slope * th0)

    def G_of_x(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.g_scale(x)[0] * np.outer(x[0], x[0])

    def H_of_x(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.h_scale(x)[0] * np.outer(x[0], x[0])


def metric_for(kind: str, moments: ConditionalMoments, population: Population) -> EstimationMetric:
    """sigma: E xx^T;  identity;  hessian: E H(x)."""
    if kind == "identity":
        return EstimationMetric.identity(population.p)
    if kind == "sigma":
        return EstimationMetric(population.second_moment(), "sigma")
    if kind == "hessian":
        return EstimationMetric(population.second_moment(moments.h_scale(population.points)), "hessian")
    raise ConfigError(f"unknown metric kind {kind!r}")


# -- asymptotic coefficient ----------------------------------------------------


@dataclass(frozen=True)
class AsymptoticCoefficient:
    value: float
    scheme: str
    gamma: float


def _quad_form(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk,ik->i", x, 0.5 * (m + m.T), x)


def rho_from_pi(pi: np.ndarray, w: np.ndarray, moments: ConditionalMoments,
                metric: EstimationMetric, population: Population) -> float:
    """rho = (E S^2 / (E S)^2) Tr(G_S H_S^-1 Q H_S^-1) with S = w * Bernoulli(pi)."""
    x = population.points
    es = population.mean(pi * w)
    es2 = population.mean(pi * w * w)
    if es <= 0:
        raise NumericalError("selection keeps no mass")
    g_s = population.second_moment(pi * w * w * moments.g_scale(x)) / es2
    h_s = population.second_moment(pi * w * moments.h_scale(x)) / es
    hinv = sym_inv(h_s)
    return float(es2 / es**2 * np.trace(g_s @ hinv @ metric.Q @ hinv))


def rho_coefficient(moments: ConditionalMoments, scheme: SelectionRule,
                    metric: EstimationMetric, population: Population) -> AsymptoticCoefficient:
    x = population.points
    pi = scheme.probabilities(x)
    w = scheme.weight_from_pi(pi)
    val = rho_from_pi(pi, w, moments, metric, population)
    return AsymptoticCoefficient(val, scheme.kind, population.mean(pi))


# -- unbiased (reweighted) optimum ----------------------------------------------


def unbiased_score(moments: ConditionalMoments, metric: EstimationMetric,
                   population: Population) -> Callable[[np.ndarray], np.ndarray]:
    """x -> Tr(G(x) H^-1 Q H^-1) with H the full-population Hessian."""
    h = population.second_moment(moments.h_scale(population.points))
    hinv = sym_inv(h)
    a = hinv @ metric.Q @ hinv

    def score(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return moments.g_scale(x) * _quad_form(x, a)

    return score


def influence_score(moments: ConditionalMoments, metric: EstimationMetric,
                    population: Population) -> Callable[[np.ndarray], np.ndarray]:
    z = unbiased_score(moments, metric, population)
    return lambda x: np.sqrt(np.maximum(z(x), 0.0))


@dataclass(frozen=True)
class UnbiasedSolution:
    rule: SelectionRule
    c: float
    rho: float


def optimal_unbiased_pi(score: Callable[[np.ndarray], np.ndarray], gamma: float,
                        population: Population) -> UnbiasedSolution:
    """pi = min(1, c sqrt(Z)) with E pi = gamma; rho_unb = E max(sqrt(Z)/c, Z)."""
    if not 0 < gamma <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    z = np.maximum(score(population.points), 0.0)
    rz = np.sqrt(z)
    if gamma == 1.0:
        c = math.inf
        rho = population.mean(z)
    else:
        if population.mean((rz > 0).astype(float)) < gamma:
            raise NumericalError("score vanishes on more than 1 - gamma of the mass")
        mean_rz = population.mean(rz)
        # work in log c; E min(1, c sqrt Z) is increasing in c
        u = bisect_monotone(lambda lc: population.mean(np.minimum(1.0, math.exp(lc) * rz)),
                            gamma, math.log(gamma / mean_rz) - 1.0, math.log(gamma / mean_rz) + 1.0,
                            tol=1e-14)
        c = math.exp(u)
        rho = population.mean(np.maximum(rz / c, z))
    rule = SelectionRule("unbiased-influence", gamma, reweight=True, state={"c": c}, score_fn=score)
    return UnbiasedSolution(rule, c, float(rho))


# -- non-reweighted optimum -----------------------------------------------------


def nonreweight_score(moments: ConditionalMoments, metric: EstimationMetric,
                      h_pi: np.ndarray, g_pi: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """First variation of rho along pi for unweighted selection.

    Z(x) = -Tr(G(x) A) + 2 Tr(H(x) B),  A = H^-1 Q H^-1,  B = H^-1 Q H^-1 G H^-1,
    with H, G the selection-normalized Hessian and gradient covariance.
    """
    hinv = sym_inv(h_pi)
    a = hinv @ metric.Q @ hinv
    b = a @ g_pi @ hinv

    def score(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return -moments.g_scale(x) * _quad_form(x, a) + 2 * moments.h_scale(x) * _quad_form(x, b)

    return score


def top_fraction(z: np.ndarray, weights: np.ndarray, gamma: float) -> tuple[np.ndarray, float, float]:
    """Indicator of the top-gamma mass of z, splitting the boundary atom.

    Returns (pi, threshold, tie_fraction) with sum(weights * pi) == gamma.
    """
    order = np.argsort(-z, kind="stable")
    zs = z[order]
    cum = np.cumsum(weights[order])
    k = int(np.searchsorted(cum, gamma * (1 - 1e-15)))
    k = min(k, z.size - 1)
    thr = float(zs[k])
    above = z > thr
    at = z == thr
    m_above = float(weights[above].sum())
    m_at = float(weights[at].sum())
    tie = min(1.0, max(0.0, (gamma - m_above) / m_at)) if m_at > 0 else 0.0
    pi = np.where(above, 1.0, np.where(at, tie, 0.0))
    return pi, thr, tie


@dataclass(frozen=True)
class NonReweightSolution:
    rule: SelectionRule
    pi: np.ndarray
    rho: float
    threshold: float
    iterations: int
    converged: bool = True
    cycled: bool = False


def solve_nonreweight_fixed_point(moments: ConditionalMoments, metric: EstimationMetric,
                                  population: Population, gamma: float, damping: float = 0.5,
                                  max_iter: int = 200, tol: float = 1e-8) -> NonReweightSolution:
    """Damped fixed point  pi <- (1-d) pi + d 1{Z(x; pi) > lambda}."""
    if not 0 < gamma <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    x, wts = population.points, population.weights
    gx, hx = moments.g_scale(x), moments.h_scale(x)
    ones = np.ones(x.shape[0])
    pi = np.full(x.shape[0], gamma)
    h_old = population.second_moment(pi * hx) / gamma
    recent: list[np.ndarray] = []
    converged = cycled = False
    for it in range(1, max_iter + 1):
        g_pi = population.second_moment(pi * gx) / gamma
        z = nonreweight_score(moments, metric, h_old, g_pi)(x)
        hard, _, _ = top_fraction(z, wts, gamma)
        recent = (recent + [hard])[-10:]
        pi = (1 - damping) * pi + damping * hard
        h_new = population.second_moment(pi * hx) / gamma
        change = np.linalg.norm(h_new - h_old)
        h_old = h_new
        if change <= tol:
            converged = True
            break
        if len(recent) >= 3 and np.array_equal(hard, recent[-3]) and not np.array_equal(hard, recent[-2]):
            # period-two flip of boundary atoms: damping cannot settle it
            cycled = True
            break
    g_pi = population.second_moment(pi * gx) / gamma
    score = nonreweight_score(moments, metric, h_old, g_pi)
    hard, thr, tie = top_fraction(score(x), wts, gamma)
    rho = rho_from_pi(hard, ones, moments, metric, population)
    if not converged:
        # keep the best selected set seen in the cycle
        for cand in recent:
            r = rho_from_pi(cand, ones, moments, metric, population)
            if r < rho:
                hard, rho = cand, r
    rule = SelectionRule("nonreweight-optimal", gamma, state={"threshold": thr, "tie_fraction": tie},
                         score_fn=score)
    return NonReweightSolution(rule, hard, rho, thr, it, converged, cycled)


# -- scalar closed forms ---------------------------------------------------------


def closed_form_1d(law: OneDimLaw, gamma: float, tau: float = 1.0) -> tuple[float, float, float]:
    """(rho_unb, rho_nr, rho_nr / rho_unb) for 1-d least squares with Q = E X^2.

    gamma = 0 returns the small-gamma limit of the ratio (both coefficients
    diverge there and are reported as inf).
    """
    m1, m2 = law.abs_moment(1), law.abs_moment(2)
    if gamma == 0:
        return math.inf, math.inf, m2**2 / (m1**2 * law.x_max**2)
    if not 0 < gamma <= m1 / law.x_max:
        raise ConfigError("closed form needs 0 < gamma <= E|X| / max|X|")
    rho_unb = tau**2 * m1**2 / (gamma * m2)
    rho_nr = tau**2 * m2 / law.abs_moment(2, law.tail_point(gamma))
    return rho_unb, rho_nr, rho_nr / rho_unb


# -- non-monotonicity construction ------------------------------------------------


def zq_at_full(moments: ConditionalMoments, population: Population) -> Callable[[np.ndarray], np.ndarray]:
    """Non-reweighting score at pi = 1 with the Hessian as the error metric."""
    x = population.points
    h = population.second_moment(moments.h_scale(x))
    g = population.second_moment(moments.g_scale(x))
    return nonreweight_score(moments, EstimationMetric(h, "hessian"), h, g)


@dataclass(frozen=True)
class NonMonotonicityReport:
    p: int
    cubic_c: float
    draws: int
    frac_negative: float
    std_error: float
    gamma: float
    rho_full: float
    rho_greedy: float
    first_order_gain: float

    @property
    def z_stat(self) -> float:
        return self.frac_negative / self.std_error if self.std_error > 0 else math.inf

    @property
    def certified(self) -> bool:
        return self.z_stat > 3 and self.rho_greedy < self.rho_full


def nonmonotonicity_check(p: int = 12, cubic_c: float = 0.5, draws: int = 100_000, gamma: float = 0.98,
                          seed: int = 0, grid_points: int = 100_000) -> NonMonotonicityReport:
    """Cubic single-index model fitted by least squares.

    Estimates P(Z(x;1) < 0) on fresh Gaussian draws, then drops the
    lowest-score 1-gamma of the population and compares rho against the
    full sample.
    """
    kernel = LabelKernel.cubic(cubic_c)
    theta0 = np.zeros(p)
    theta0[0] = 1.0
    moments = ConditionalMoments.misspecified_linear(kernel, theta0)
    pop = Population.gaussian(p, grid_points, seed)
    score = zq_at_full(moments, pop)
    xs = make_rng(seed, 1).standard_normal((draws, p))
    neg = float(np.mean(score(xs) < 0))
    se = math.sqrt(max(neg * (1 - neg), 1e-300) / draws)

    h = pop.second_moment(moments.h_scale(pop.points))
    metric = EstimationMetric(h, "hessian")
    ones = np.ones(pop.points.shape[0])
    rho_full = rho_from_pi(ones, ones, moments, metric, pop)
    z_pop = score(pop.points)
    keep, _, _ = top_fraction(z_pop, pop.weights, gamma)
    rho_greedy = rho_from_pi(keep, np.ones_like(keep), moments, metric, pop)
    gain = float(pop.weights @ ((1 - keep) * -z_pop))
    return NonMonotonicityReport(p, cubic_c, draws, neg, se, gamma, rho_full, rho_greedy, gain)
