"""Quadrature rules, monotone root finding, proximal operators, safe inverses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq

from .errors import NumericalError

EIG_FLOOR = 1e-12
PROX_TOL = 1e-10


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and weights for expectations under N(0, 1)."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * fn(self.nodes)))


@lru_cache(maxsize=64)
def _hermite(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = hermegauss(order)
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_hermite(order: int = 40) -> QuadratureGrid:
    """Probabilists' Gauss-Hermite rule normalized to the standard normal."""
    if not 2 <= order <= 200:
        raise ValueError("Gauss-Hermite order must lie in [2, 200]")
    x, w = _hermite(order)
    return QuadratureGrid(x, w, order)


@lru_cache(maxsize=16)
def _legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    return leggauss(order)


def piecewise_gauss(
    breakpoints: Iterable[float] = (),
    span: float = 9.0,
    panel_width: float = 0.5,
    panel_order: int = 10,
) -> QuadratureGrid:
    """Composite Gauss-Legendre rule for N(0, 1) on [-span, span].

    Panels never straddle a breakpoint, so integrands with jumps or kinks at
    known locations keep full polynomial accuracy on every panel. The tails
    beyond `span` carry mass 2*Phi(-span), about 2e-19 for the default.
    """
    cuts = {-span, span}
    cuts.update(float(b) for b in breakpoints if -span < b < span)
    edges = np.array(sorted(cuts))
    t, w = _legendre(panel_order)
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        npan = max(1, math.ceil((hi - lo) / panel_width - 1e-9))
        sub = np.linspace(lo, hi, npan + 1)
        half = 0.5 * np.diff(sub)
        mid = 0.5 * (sub[:-1] + sub[1:])
        xs.append((mid[:, None] + half[:, None] * t[None, :]).ravel())
        ws.append((half[:, None] * w[None, :]).ravel())
    x = np.concatenate(xs)
    wt = np.concatenate(ws) * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    return QuadratureGrid(x, wt, x.size)


def bisect_monotone(
    fn: Callable[[float], float],
    target: float,
    lo: float,
    hi: float,
    tol: float = 1e-12,
    max_iter: int = 300,
    max_expand: int = 60,
) -> float:
    """Solve fn(x) = target for monotone fn by bracketed bisection.

    The bracket is widened (doubling its width toward the side that needs
    it) until it contains the target. Stops once |fn(x) - target| <= tol or
    the bracket collapses to floating-point resolution.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    flo, fhi = fn(lo) - target, fn(hi) - target
    for _ in range(max_expand):
        if flo * fhi <= 0:
            break
        increasing = fhi >= flo
        width = hi - lo
        if (fhi < 0) == increasing:
            lo, flo = hi, fhi
            hi = hi + 2 * width
            fhi = fn(hi) - target
        else:
            hi, fhi = lo, flo
            lo = lo - 2 * width
            flo = fn(lo) - target
    else:
        raise NumericalError("bisect_monotone: no bracket after expansion")
    if abs(flo) <= tol:
        return lo
    if abs(fhi) <= tol:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = fn(mid) - target
        if abs(fm) <= tol or mid in (lo, hi):
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi, fhi = mid, fm
    return 0.5 * (lo + hi)


# -- proximal operators -------------------------------------------------------


def moreau(kind: str, t, y, w, mu) -> tuple[np.ndarray, np.ndarray]:
    """Minimizer v* and value of  w L(v, y) + mu/2 (t - v)^2  over v.

    Vectorized over broadcastable (t, y, w); mu > 0 is a scalar.
    """
    t, y, w = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float), np.asarray(w, float))
    if kind == "square":
        v = (w * y + mu * t) / (w + mu)
        val = 0.5 * w * mu / (w + mu) * (y - t) ** 2
        return v, val
    if kind != "logistic":
        raise ValueError(f"unknown loss {kind!r}")
    v = _prox_logistic(t, y, w, mu)
    a = np.abs(v)
    val = w * (-y * v + a + np.log1p(np.exp(-2 * a))) + 0.5 * mu * (t - v) ** 2
    return v, val


def _prox_logistic(t, y, w, mu, max_iter: int = 100) -> np.ndarray:
    # Root of g(v) = w (tanh v - y) + mu (v - t), bracketed by
    # [t + w(y-1)/mu, t + w(y+1)/mu] since tanh lies in (-1, 1).
    lo = t + w * (y - 1.0) / mu
    hi = t + w * (y + 1.0) / mu
    th = np.tanh(t)
    v = t + w * (y - th) / (mu + w * (1 - th * th))
    v = np.clip(v, lo, hi)
    dx_old = hi - lo
    for _ in range(max_iter):
        th = np.tanh(v)
        g = w * (th - y) + mu * (v - t)
        conv = np.abs(g) <= PROX_TOL
        if conv.all():
            return v
        neg = g < 0
        lo = np.where(neg, v, lo)
        hi = np.where(neg, hi, v)
        slope = w * (1 - th * th) + mu
        vn = v - g / slope
        # bisect when Newton leaves the bracket or fails to halve the last step
        bad = (vn < lo) | (vn > hi) | (np.abs(2 * g) > np.abs(dx_old * slope))
        vn = np.where(bad, 0.5 * (lo + hi), vn)
        dx_old = vn - v
        stalled = np.abs(vn - v) <= 4e-16 * np.maximum(1.0, np.abs(v))
        v = np.where(conv, v, vn)
        if (conv | stalled).all():
            return v
    raise NumericalError("logistic proximal Newton did not converge")


def prox_loss(loss, a, y, g, mu, w=1.0) -> tuple[np.ndarray, np.ndarray]:
    """u* = argmin_u  w L(a + u, y) + mu/2 (g - u)^2, and the attained value.

    `loss` is a LossFunction (or its kind string); g is already scaled by the
    caller. Requires mu > 0.
    """
    if not mu > 0:
        raise ValueError("prox_loss needs mu > 0")
    kind = loss if isinstance(loss, str) else loss.kind
    a = np.asarray(a, dtype=float)
    v, val = moreau(kind, a + np.asarray(g, dtype=float), y, w, mu)
    return v - a, val


def maximize_concave_scalar(
    fn: Callable[[float], float],
    lo: float = 0.0,
    hi: float = 10.0,
    tol: float = 1e-12,
    dfn: Callable[[float], float] | None = None,
    max_expand: int = 60,
) -> tuple[float, float]:
    """Maximize a concave function on [lo, inf).

    The upper end doubles until the function (or derivative, when given)
    shows descent; the left boundary is checked explicitly so a maximizer at
    `lo` is returned exactly. Returns (argmax, max). If no descent appears
    after `max_expand` doublings the argmax is reported as +inf.
    """
    if dfn is not None:
        if dfn(lo) <= 0:
            return lo, fn(lo)
        a = lo
        for _ in range(max_expand):
            if dfn(hi) < 0:
                break
            a, hi = hi, lo + 2 * (hi - lo)
        else:
            return math.inf, math.nan
        x = brentq(dfn, a, hi, xtol=tol * max(1.0, a), rtol=4 * np.finfo(float).eps, maxiter=500)
        return x, fn(x)

    f_lo = fn(lo)
    for _ in range(max_expand):
        if fn(hi) < fn(0.5 * (lo + hi)):
            break
        hi = lo + 2 * (hi - lo)
    else:
        return math.inf, math.nan
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol * max(1.0, abs(a)):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    x = 0.5 * (a + b)
    fx = fn(x)
    if f_lo >= fx:
        return lo, f_lo
    return x, fx


# -- linear algebra -----------------------------------------------------------


def sym_inv(m: np.ndarray, floor: float = EIG_FLOOR) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via eigendecomposition.

    Raises NumericalError when the smallest eigenvalue is below `floor`.
    """
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < floor:
        raise NumericalError(f"matrix is singular (smallest eigenvalue {vals.min():.3e})")
    return (vecs / vals) @ vecs.T
