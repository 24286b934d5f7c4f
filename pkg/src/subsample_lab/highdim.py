"""Proportional-asymptotics predictions for ridge-regularized ERM after
surrogate-based data selection, with Gaussian features.

The estimator's limit is described by three projections (alpha0, alphas,
alphaperp): its components along theta0, along the part of the surrogate
orthogonal to theta0, and in the remaining directions. They solve

    min_alpha max_{mu >= 0}  L(alpha, mu),
    L = ridge/2 |alpha|^2 - mu alphaperp^2 / (2 delta0)
        + E[ pi(b) * min_v { w(b) loss(v, Y) + mu/2 (t - v)^2 } ],

where t = alpha0 G0 + alphas Gs + alphaperp Gperp, b = beta0 G0 + beta_s Gs
is the surrogate index, Y ~ P(. | |theta0| G0), and delta0 = N / p.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.special import ndtr, ndtri

from .core import (
    ConfigError,
    LabelKernel,
    LossFunction,
    NumericalError,
    SCORE_CLIP,
    SelectionRule,
    alpha_family_probabilities,
    curvature,
)
from .numerics import QuadratureGrid, bisect_monotone, gauss_hermite, moreau, piecewise_gauss

RIDGE_FLOOR = 1e-5
PERP_FLOOR = 1e-10


@dataclass(frozen=True)
class SaddleSpec:
    loss: LossFunction
    kernel: LabelKernel
    selection: SelectionRule
    beta0: float = 1.0
    beta_s: float = 0.0
    delta0: float = 4.0
    ridge: float = 1e-3
    perp_order: int = 40
    label_order: int = 40
    panel_order: int = 10
    panel_width: float = 0.5
    span: float = 9.0

    def __post_init__(self) -> None:
        if not self.delta0 > 0:
            raise ConfigError("delta0 must be positive")
        if self.beta_s < 0:
            raise ConfigError("beta_s is a norm and must be non-negative")
        if self.ridge < 0:
            raise ConfigError("ridge must be non-negative")

    @property
    def effective_ridge(self) -> float:
        return max(self.ridge, RIDGE_FLOOR)

    def refined(self) -> SaddleSpec:
        """Same problem with every quadrature order doubled."""
        return replace(self, perp_order=min(2 * self.perp_order, 200), label_order=min(2 * self.label_order, 200),
                       panel_order=2 * self.panel_order)


# -- population selection rules -------------------------------------------------


def _std_normal_rule(spec_like: SaddleSpec | None, breakpoints=()) -> QuadratureGrid:
    if spec_like is None:
        return piecewise_gauss(breakpoints)
    return piecewise_gauss(breakpoints, spec_like.span, spec_like.panel_width, spec_like.panel_order)


def selection_mass(rule: SelectionRule, beta_norm: float, quad: SaddleSpec | None = None) -> float:
    """E pi(b) for b ~ N(0, beta_norm^2)."""
    if beta_norm == 0:
        return float(rule.pi_from_score(np.zeros(1))[0])
    g = _std_normal_rule(quad, [x / beta_norm for x in rule.breakpoints()])
    return float(g.weights @ rule.pi_from_score(beta_norm * g.nodes))


def population_rule(kind: str, gamma: float, alpha: float | None = None, beta_norm: float = 1.0,
                    reweight: bool = False) -> SelectionRule:
    """Selection rule on the surrogate index calibrated so E pi = gamma.

    kind is one of random, alpha-family, topk-hard, topk-easy; alpha = +inf
    and -inf in the alpha family map to topk-hard and topk-easy.
    """
    if not 0 < gamma <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    if kind == "alpha-family" and alpha is not None and math.isinf(alpha):
        kind = "topk-hard" if alpha > 0 else "topk-easy"
    if kind == "random" or (kind == "alpha-family" and alpha == 0):
        return SelectionRule("random", gamma, alpha=0.0, reweight=reweight)
    if kind in ("topk-hard", "topk-easy"):
        if gamma == 1:
            thr = 0.0 if kind == "topk-hard" else 1.0
        else:
            q = (1 + gamma) / 2 if kind == "topk-hard" else 1 - gamma / 2
            thr = float(curvature(min(beta_norm * ndtri(q), SCORE_CLIP)))
        a = math.inf if kind == "topk-hard" else -math.inf
        return SelectionRule(kind, gamma, alpha=a, reweight=reweight, state={"threshold": thr})
    if kind != "alpha-family":
        raise ConfigError(f"{kind!r} is not a surrogate-index selection rule")

    def mass(log_c: float) -> float:
        r = SelectionRule("alpha-family", gamma, alpha, reweight, {"c": math.exp(log_c)})
        return selection_mass(r, beta_norm)

    if gamma == 1 and alpha > 0:
        log_c = -alpha * math.log(float(curvature(SCORE_CLIP)))
    elif gamma == 1:
        log_c = 0.0
    else:
        log_c = bisect_monotone(mass, gamma, math.log(gamma) - 1, math.log(gamma) + 1, tol=1e-13)
    return SelectionRule("alpha-family", gamma, alpha, reweight, {"c": math.exp(log_c)})


def realized_gamma(spec: SaddleSpec) -> float:
    return selection_mass(spec.selection, math.hypot(spec.beta0, spec.beta_s), spec)


# -- the Lagrangian --------------------------------------------------------------


@dataclass
class Evaluation:
    value: float
    grad: np.ndarray  # d/d(alpha0, alphas, alphaperp)
    dmu: float
    d2mu: float


class Lagrangian:
    """Quadrature model of L(alpha, mu) for one SaddleSpec.

    The (G0, Gs) plane uses composite Gauss-Legendre panels cut at every
    discontinuity of the label law and of the selection rule; Gperp uses
    Gauss-Hermite. With beta_s = 0 the selection depends on G0 alone and
    alphas Gs + alphaperp Gperp collapses to one Gaussian of scale
    sqrt(alphas^2 + alphaperp^2), so the plane is one-dimensional.
    """

    def __init__(self, spec: SaddleSpec):
        self.spec = spec
        kern, sel = spec.kernel, spec.selection
        s0 = kern.theta0_norm
        kb = [z / s0 for z in kern.breakpoints()] if s0 > 0 else []
        sb = list(sel.breakpoints())
        self.collapsed = spec.beta_s == 0
        quad = lambda pts: piecewise_gauss(pts, spec.span, spec.panel_width, spec.panel_order)  # noqa: E731
        if self.collapsed:
            pts = kb + ([b / spec.beta0 for b in sb] if spec.beta0 != 0 else [])
            g = quad(pts)
            g0, gs, wt = g.nodes, np.zeros_like(g.nodes), g.weights
        else:
            outer = quad(kb)
            parts = []
            for x0, w0 in zip(outer.nodes, outer.weights):
                inner = quad([(b - spec.beta0 * x0) / spec.beta_s for b in sb])
                parts.append((np.full(inner.order, x0), inner.nodes, w0 * inner.weights))
            g0, gs, wt = (np.concatenate(c) for c in zip(*parts))
        b = spec.beta0 * g0 + spec.beta_s * gs
        pi = sel.pi_from_score(b)
        w = sel.weight_from_pi(pi)
        keep = pi * wt > 1e-300
        g0, gs, wt, pi, w = g0[keep], gs[keep], wt[keep], pi[keep], w[keep]
        y, py = kern.label_nodes(s0 * g0, spec.label_order)
        h = gauss_hermite(spec.perp_order)
        self.g0 = g0[:, None, None]
        self.gs = gs[:, None, None]
        self.y = y[:, :, None]
        self.w = w[:, None, None]
        self.z = h.nodes[None, None, :]
        self.mass = (wt * pi)[:, None, None] * py[:, :, None] * h.weights[None, None, :]
        self.gamma = float((wt * pi).sum())

    def index(self, alpha) -> np.ndarray:
        a0, as_, ap = alpha
        if self.collapsed:
            return a0 * self.g0 + math.hypot(as_, ap) * self.z
        return a0 * self.g0 + as_ * self.gs + ap * self.z

    def evaluate(self, alpha, mu: float) -> Evaluation:
        sp = self.spec
        alpha = np.asarray(alpha, dtype=float)
        a0, as_, ap = alpha
        lam = sp.effective_ridge
        kind = sp.loss.kind
        t = self.index(alpha)
        m = self.mass
        if mu == 0:
            env = 0.0
            mprime = np.zeros_like(t)
            if kind == "square":
                gap2 = (t - self.y) ** 2
                dmu = 0.5 * float(np.sum(m * gap2))
            else:
                dmu = math.inf
            d2mu = -math.inf
        elif math.isinf(mu):
            env = float(np.sum(m * self.w * sp.loss.value(t, self.y)))
            mprime = self.w * sp.loss.deriv(t, self.y)
            dmu, d2mu = 0.0, 0.0
        else:
            v, val = moreau(kind, t, self.y, self.w, mu)
            env = float(np.sum(m * val))
            gap = t - v
            mprime = mu * gap
            dmu = 0.5 * float(np.sum(m * gap * gap))
            d2mu = -float(np.sum(m * gap * gap / (self.w * sp.loss.second(v) + mu)))
        e0 = float(np.sum(m * mprime * self.g0))
        if self.collapsed:
            r = math.hypot(as_, ap)
            ez = float(np.sum(m * mprime * self.z))
            es, ep = (ez * as_ / r, ez * ap / r) if r > 0 else (0.0, 0.0)
        else:
            es = float(np.sum(m * mprime * self.gs))
            ep = float(np.sum(m * mprime * self.z))
        mu_term = 0.0 if math.isinf(mu) else mu
        value = 0.5 * lam * float(alpha @ alpha) - 0.5 * mu_term * ap * ap / sp.delta0 + env
        grad = lam * alpha + np.array([e0, es, ep - mu_term * ap / sp.delta0])
        return Evaluation(value, grad, dmu - 0.5 * ap * ap / sp.delta0, d2mu)

    def __call__(self, alpha, mu: float) -> float:
        return self.evaluate(alpha, mu).value

    def maximize_mu(self, alpha, mu0: float = 1.0, tol: float = 1e-12) -> tuple[float, Evaluation]:
        """mu*(alpha) via safeguarded Newton on the decreasing map mu -> dL/dmu."""
        ap = float(alpha[2])
        if ap <= 0:
            return math.inf, self.evaluate(alpha, math.inf)
        target = 0.5 * ap * ap / self.spec.delta0
        ev0 = self.evaluate(alpha, 0.0)
        if ev0.dmu <= 0:
            return 0.0, ev0
        lo, hi = 0.0, math.inf
        mu = mu0 if mu0 > 0 and math.isfinite(mu0) else 1.0
        for _ in range(200):
            ev = self.evaluate(alpha, mu)
            d = ev.dmu
            if abs(d) <= tol * target:
                return mu, ev
            if d > 0:
                lo = mu
            else:
                hi = mu
            if math.isfinite(hi) and hi - lo <= 1e-15 * hi:
                return mu, ev
            nxt = mu - d / ev.d2mu if ev.d2mu < 0 else math.nan
            if not (lo < nxt < hi):
                nxt = 4 * mu if math.isinf(hi) else (math.sqrt(lo * hi) if lo > 0 else 0.25 * hi)
                if math.isinf(hi) and mu > 1e300:
                    return math.inf, self.evaluate(alpha, math.inf)
            mu = nxt
        raise NumericalError("inner maximization over mu did not converge")


# -- solver ------------------------------------------------------------------------


@dataclass(frozen=True)
class SaddleSolution:
    alpha0: float
    alphas: float
    alphaperp: float
    mu: float
    value: float
    realized_gamma: float
    test_error: float
    excess_error: float
    misclassification: float
    flat: bool
    iterations: int
    grad_norm: float
    spec: SaddleSpec = field(repr=False, compare=False)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([self.alpha0, self.alphas, self.alphaperp])


def best_linear_coefficient(kernel: LabelKernel, loss: LossFunction) -> float:
    """c* = argmin_c E loss(c G0, Y), the population-optimal scale along theta0."""
    g = piecewise_gauss([z / kernel.theta0_norm for z in kernel.breakpoints()] if kernel.theta0_norm > 0 else [])
    y, py = kernel.label_nodes(kernel.theta0_norm * g.nodes)
    wts = g.weights[:, None] * py
    x = g.nodes[:, None]
    if loss.kind == "square":
        return float(np.sum(wts * x * y) / np.sum(wts * x * x))
    res = minimize_scalar(lambda c: float(np.sum(wts * loss.value(c * x, y))), bounds=(-50, 50),
                          method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def misclassification_from_projections(kernel: LabelKernel, alpha0: float, r: float) -> float:
    """P(Y u < 0) for u = alpha0 G0 + r G with G independent of G0."""
    s0 = kernel.theta0_norm
    g = piecewise_gauss(([z / s0 for z in kernel.breakpoints()] if s0 > 0 else []) + [0.0])
    f = kernel.prob_positive(s0 * g.nodes)
    if r == 0:
        agree = np.sign(alpha0 * g.nodes)
    else:
        agree = 2 * ndtr(alpha0 / r * g.nodes) - 1
    return float(0.5 - 0.5 * g.weights @ ((2 * f - 1) * agree))


def test_error_from_projections(kernel: LabelKernel, loss: LossFunction, alpha0: float, r: float,
                                order: int = 40) -> float:
    """E test_loss(alpha0 G0 + r G, Y) for a fresh Gaussian sample."""
    if loss.test_kind == "misclassification":
        return misclassification_from_projections(kernel, alpha0, r)
    s0 = kernel.theta0_norm
    g = piecewise_gauss([z / s0 for z in kernel.breakpoints()] if s0 > 0 else [])
    h = gauss_hermite(order)
    y, py = kernel.label_nodes(s0 * g.nodes, order)
    u = alpha0 * g.nodes[:, None, None] + r * h.nodes[None, None, :]
    wts = g.weights[:, None, None] * py[:, :, None] * h.weights[None, None, :]
    return float(np.sum(wts * loss.test_value(u, y[:, :, None])))


def reference_test_error(kernel: LabelKernel, loss: LossFunction) -> float:
    """Test error of the best multiple of theta0, the baseline for excess error."""
    return test_error_from_projections(kernel, loss, best_linear_coefficient(kernel, loss), 0.0)


def predicted_errors(spec: SaddleSpec, alpha0: float, alphas: float, alphaperp: float) -> dict[str, float]:
    r = math.hypot(alphas, alphaperp)
    test = test_error_from_projections(spec.kernel, spec.loss, alpha0, r, spec.perp_order)
    return {
        "test_error": test,
        "excess_error": test - reference_test_error(spec.kernel, spec.loss),
        "misclassification": misclassification_from_projections(spec.kernel, alpha0, r),
    }


def solve_saddle(spec: SaddleSpec, start=None, tol: float = 1e-9) -> SaddleSolution:
    """Minimize F(alpha) = max_mu L(alpha, mu).

    L-BFGS-B on F with the envelope (Danskin) gradient, followed by a few
    Newton polishing steps using a finite-difference Hessian of grad F.
    """
    if spec.ridge < RIDGE_FLOOR:
        warnings.warn(f"ridge {spec.ridge:g} below {RIDGE_FLOOR:g}; using {RIDGE_FLOOR:g}", stacklevel=2)
    lag = Lagrangian(spec)
    state = {"mu": 1.0, "calls": 0}

    def fgrad(a):
        a = np.array([a[0], a[1], max(a[2], PERP_FLOOR)])
        mu, ev = lag.maximize_mu(a, state["mu"])
        if 0 < mu < math.inf:
            state["mu"] = mu
        state["calls"] += 1
        return ev.value, ev.grad

    if start is None:
        c = best_linear_coefficient(spec.kernel, spec.loss)
        start = (0.5 * c if np.isfinite(c) else 0.5, 0.0, 0.5)
    x0 = np.asarray(start, dtype=float)
    bounds = [(None, None), (None, None), (PERP_FLOOR, None)]
    if lag.collapsed:
        bounds[1] = (0.0, 0.0)
        x0[1] = 0.0
    res = minimize(fgrad, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": 500, "gtol": tol, "ftol": 1e-15, "maxcor": 20})
    x = np.array(res.x, dtype=float)
    free = np.array([True, not lag.collapsed, True])
    f, g = fgrad(x)
    for _ in range(6):
        gn = np.linalg.norm(g[free])
        if gn <= tol:
            break
        hess = _fd_hessian(lambda z: fgrad(z)[1], x, free)
        try:
            step = np.zeros(3)
            step[free] = -np.linalg.solve(hess, g[free])
        except np.linalg.LinAlgError:
            break
        improved = False
        for shrink in (1.0, 0.5, 0.25, 0.125):
            cand = x + shrink * step
            cand[2] = max(cand[2], PERP_FLOOR)
            fc, gc = fgrad(cand)
            if np.linalg.norm(gc[free]) < gn:
                x, f, g, improved = cand, fc, gc, True
                break
        if not improved:
            break
    gn = float(np.linalg.norm(g[free]))
    if not gn <= 1e-6:
        raise NumericalError(f"saddle solver stalled (|grad| = {gn:.2e})")
    mu, ev = lag.maximize_mu(x, state["mu"])
    pred = predicted_errors(spec, x[0], x[1], x[2])
    flat = mu == 0.0
    return SaddleSolution(float(x[0]), float(x[1]), float(x[2]), float(mu), ev.value, lag.gamma,
                          pred["test_error"], pred["excess_error"], pred["misclassification"], flat,
                          state["calls"], gn, spec)


def _fd_hessian(grad_fn, x: np.ndarray, free: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(free)
    hess = np.empty((idx.size, idx.size))
    for j, i in enumerate(idx):
        h = 1e-5 * max(1.0, abs(x[i]))
        if i == 2:
            h = min(h, 0.5 * x[2])
        e = np.zeros_like(x)
        e[i] = h
        hess[:, j] = (grad_fn(x + e)[idx] - grad_fn(x - e)[idx]) / (2 * h)
    return 0.5 * (hess + hess.T)


# -- square loss without reweighting -----------------------------------------------


def square_loss_objective(spec: SaddleSpec, alpha) -> float:
    """F(alpha) for the square loss with unit weights, with mu maximized in closed form:

        1/2 ( sqrt(E pi (Y - <alpha, g>)^2) - alphaperp / sqrt(delta0) )_+^2 + ridge/2 |alpha|^2
    """
    if spec.loss.kind != "square" or spec.selection.reweight:
        raise ConfigError("closed-form objective needs square loss without reweighting")
    lag = Lagrangian(spec)
    a0, as_, ap = np.asarray(alpha, dtype=float)
    m2 = lag.mass.sum(axis=2)
    if lag.collapsed:
        resid2 = (lag.y[:, :, 0] - a0 * lag.g0[:, :, 0]) ** 2 + as_ * as_
    else:
        resid2 = (lag.y[:, :, 0] - a0 * lag.g0[:, :, 0] - as_ * lag.gs[:, :, 0]) ** 2
    second = float(np.sum(m2 * resid2)) + ap * ap * lag.gamma
    gap = max(math.sqrt(second) - ap / math.sqrt(spec.delta0), 0.0)
    return 0.5 * gap * gap + 0.5 * spec.effective_ridge * (a0 * a0 + as_ * as_ + ap * ap)


# -- ridgeless closed forms --------------------------------------------------------


@dataclass(frozen=True)
class SelectionMoments:
    gamma: float
    a: float  # E[G^2 pi] / gamma
    b: float  # E[G Y pi] / gamma
    c: float  # E[Y^2 pi] / gamma


def selection_moments(kernel: LabelKernel, rule: SelectionRule, label_order: int = 40) -> SelectionMoments:
    """Moments of (G, Y) under the selection, with G the perfect surrogate index."""
    s0 = kernel.theta0_norm
    pts = ([z / s0 for z in kernel.breakpoints()] if s0 > 0 else []) + list(rule.breakpoints())
    g = piecewise_gauss(pts)
    pi = rule.pi_from_score(g.nodes)
    y, py = kernel.label_nodes(s0 * g.nodes, label_order)
    w = g.weights * pi
    gam = float(w.sum())
    ey = np.sum(py * y, axis=1)
    ey2 = np.sum(py * y * y, axis=1)
    x = g.nodes
    return SelectionMoments(gam, float(w @ (x * x)) / gam, float(w @ (x * ey)) / gam, float(w @ ey2) / gam)


def ridgeless_closed_form(kernel: LabelKernel, rule: SelectionRule, delta0: float,
                          gamma: float | None = None) -> float:
    """Limiting excess mean-squared error, E(y - u)^2 minus its value at the
    best multiple of theta0, for min-norm least squares on the selected data
    without reweighting. delta = gamma * delta0 is the selected-sample aspect
    ratio; both regimes delta < 1 and delta > 1 are covered."""
    sel = selection_moments(kernel, rule)
    if gamma is not None and abs(sel.gamma - gamma) > 1e-6:
        raise ConfigError(f"rule keeps mass {sel.gamma:.8f}, not gamma = {gamma}")
    full = selection_moments(kernel, SelectionRule("random", 1.0))
    delta = sel.gamma * delta0
    if abs(delta - 1) < 1e-3:
        raise NumericalError("interpolation threshold delta = 1 is a pole of the closed form")
    target = full.b / full.a
    resid = sel.c - sel.b**2 / sel.a
    if delta > 1:
        return (target - sel.b / sel.a) ** 2 + resid / (delta - 1)
    den = 1 - delta + sel.a * delta
    return ((target - sel.b * delta / den) ** 2 + sel.b**2 / sel.a * delta * (1 - delta) / den**2
            + delta / (1 - delta) * resid)
