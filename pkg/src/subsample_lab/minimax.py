"""Minimax selection for a finite-level Bernoulli model with a box-shaped
uncertainty set around a surrogate estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, NumericalError, SelectionRule
from .numerics import bisect_monotone


@dataclass(frozen=True)
class DiscreteMinimaxSpec:
    """Levels x = 1..k with masses p_x, per-level weights q_x in the error
    metric, surrogate success probabilities theta_su and box half-width eps."""

    p_x: np.ndarray
    q_x: np.ndarray
    theta_su: np.ndarray
    eps: float
    gamma: float

    def __post_init__(self) -> None:
        p = np.asarray(self.p_x, dtype=float)
        q = np.asarray(self.q_x, dtype=float)
        th = np.asarray(self.theta_su, dtype=float)
        if not (p.ndim == 1 and p.shape == q.shape == th.shape and p.size >= 1):
            raise ConfigError("p_x, q_x, theta_su must be 1-d arrays of equal length")
        if np.any(p <= 0) or abs(p.sum() - 1) > 1e-9:
            raise ConfigError("p_x must be positive and sum to 1")
        if np.any(q < 0) or np.any((th < 0) | (th > 1)):
            raise ConfigError("q_x must be non-negative and theta_su in [0, 1]")
        if self.eps < 0 or not 0 < self.gamma <= 1:
            raise ConfigError("need eps >= 0 and gamma in (0, 1]")
        for name, arr in (("p_x", p), ("q_x", q), ("theta_su", th)):
            object.__setattr__(self, name, arr)

    @property
    def lower(self) -> np.ndarray:
        return np.maximum(0.0, self.theta_su - self.eps)

    @property
    def upper(self) -> np.ndarray:
        return np.minimum(1.0, self.theta_su + self.eps)


def risk(pi: np.ndarray, theta: np.ndarray, spec: DiscreteMinimaxSpec) -> float:
    """sum_x theta(1-theta) q / (pi p); infinite if a level with signal is never sampled."""
    num = theta * (1 - theta) * spec.q_x
    pi = np.asarray(pi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(num > 0, num / (pi * spec.p_x), 0.0)
    return float(terms.sum())


def _budget_constant(u: np.ndarray, spec: DiscreteMinimaxSpec) -> float:
    # sum_x min(c sqrt(q u), p_x) = gamma, piecewise linear and increasing in c
    root = np.sqrt(spec.q_x * u)
    if root.sum() <= 0:
        raise NumericalError("all levels have zero uncertainty; the selection is undetermined")
    live = root > 0
    cap = spec.p_x[live].sum()
    if spec.gamma > cap + 1e-12:
        raise NumericalError("budget exceeds the mass of levels with non-zero uncertainty")
    if spec.gamma >= cap - 1e-15:
        return float(np.max(spec.p_x[live] / root[live]))
    return bisect_monotone(lambda c: float(np.minimum(c * root, spec.p_x).sum()), spec.gamma,
                           0.0, spec.gamma / root.sum() * 2, tol=1e-15)


def minimax_pi(theta: np.ndarray, spec: DiscreteMinimaxSpec) -> tuple[np.ndarray, float]:
    """Risk-minimizing pi for a fixed theta under E pi = gamma; returns (pi, c)."""
    u = theta * (1 - theta)
    c = _budget_constant(u, spec)
    pi = np.minimum(c * np.sqrt(spec.q_x * u) / spec.p_x, 1.0)
    return pi, c


def solve_theta_mm(spec: DiscreteMinimaxSpec, max_iter: int = 50) -> tuple[np.ndarray, float]:
    """Least-favourable theta in the box and its budget constant.

    Alternates between maximizing sum_x max(sqrt(q u)/c, q u / p) over the
    box (u = theta(1-theta)) and re-solving c. Both branches grow with u,
    so the coordinate maximizer is the box point closest to 1/2.
    """
    lo, hi = spec.lower, spec.upper
    c = spec.gamma / np.sqrt(spec.q_x / 4).sum()
    theta = spec.theta_su.copy()
    for _ in range(max_iter):
        new = np.clip(0.5, lo, hi)
        c_new = _budget_constant(new * (1 - new), spec)
        if np.max(np.abs(new - theta)) < 1e-10 and abs(c_new - c) <= 1e-10 * max(1.0, c):
            return new, c_new
        theta, c = new, c_new
    raise NumericalError("minimax alternation did not reach a fixed point")


@dataclass(frozen=True)
class MinimaxSolution:
    theta_mm: np.ndarray
    pi: np.ndarray
    c: float
    risk: float
    rule: SelectionRule


def solve_minimax(spec: DiscreteMinimaxSpec) -> MinimaxSolution:
    theta, _ = solve_theta_mm(spec)
    pi, c = minimax_pi(theta, spec)
    rule = SelectionRule("minimax-discrete", spec.gamma, state={"pi_levels": pi})
    return MinimaxSolution(theta, pi, c, risk(pi, theta, spec), rule)


def plugin_pi(spec: DiscreteMinimaxSpec) -> np.ndarray:
    """Optimal pi if the surrogate were exact."""
    return minimax_pi(spec.theta_su, spec)[0]


def worst_case_risk(pi: np.ndarray, spec: DiscreteMinimaxSpec) -> float:
    """max over the box of the risk at fixed pi (attained coordinatewise)."""
    t = np.clip(0.5, spec.lower, spec.upper)
    return risk(pi, t, spec)
