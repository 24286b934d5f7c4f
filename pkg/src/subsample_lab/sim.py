"""Finite-sample experiments: synthetic data, surrogate-driven selection,
weighted ridge ERM, and sweeps with an overlay of the limiting theory."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
import numpy as np

from .core import (
    SCORE_CLIP,
    ConfigError,
    Dataset,
    LabelKernel,
    LossFunction,
    NumericalError,
    SurrogateModel,
    curvature,
    make_rng,
    random_direction,
    surrogate_decompose,
)
from .highdim import (
    SaddleSpec,
    misclassification_from_projections,
    population_rule,
    reference_test_error,
    solve_saddle,
    test_error_from_projections,
)
from .numerics import bisect_monotone

# RNG stream tags
_DATA, _SURROGATE, _SELECT, _HOLDOUT, _DIRECTION = range(5)


# -- data --------------------------------------------------------------------------


def generate_synthetic(n: int, p: int, kernel: LabelKernel, rng: np.random.Generator,
                       theta0: np.ndarray | None = None) -> tuple[Dataset, np.ndarray]:
    """x ~ N(0, I_p), y ~ kernel(<theta0, x>). theta0 defaults to a random
    direction scaled to kernel.theta0_norm."""
    if theta0 is None:
        theta0 = kernel.theta0_norm * random_direction(p, rng)
    x = rng.standard_normal((n, p))
    y = kernel.sample(x @ theta0, rng)
    return Dataset(x, y), theta0


def fit_erm(data: Dataset, weights: np.ndarray, loss: LossFunction, ridge: float,
            n_total: int | None = None, max_iter: int = 100) -> np.ndarray:
    """argmin_theta (1/N) sum_i s_i loss(<theta, x_i>, y_i) + ridge/2 |theta|^2.

    `weights` holds the realized selection variable (0 for dropped rows).
    The average is over the full sample size N, not the selected count.
    """
    if ridge <= 0:
        raise ConfigError("ERM needs a positive ridge penalty")
    nt = data.n if n_total is None else n_total
    sel = weights > 0
    x, y, s = data.features[sel], data.labels[sel], weights[sel]
    p = data.p
    if loss.kind == "square":
        a = (x.T * s) @ x / nt + ridge * np.eye(p)
        return np.linalg.solve(a, x.T @ (s * y) / nt)

    theta = np.zeros(p)

    def obj(th):
        u = x @ th
        return float(s @ loss.value(u, y)) / nt + 0.5 * ridge * float(th @ th)

    f = obj(theta)
    grad = x.T @ (s * loss.deriv(x @ theta, y)) / nt + ridge * theta
    tol = 1e-8 * max(1.0, float(np.linalg.norm(grad)))
    for _ in range(max_iter):
        if np.linalg.norm(grad) <= tol:
            return theta
        u = x @ theta
        hess = (x.T * (s * loss.second(u))) @ x / nt + ridge * np.eye(p)
        step = np.linalg.solve(hess, grad)
        slope = float(grad @ step)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = obj(cand)
            if fc <= f - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        theta, f = cand, fc
        grad = x.T @ (s * loss.deriv(x @ theta, y)) / nt + ridge * theta
    if np.linalg.norm(grad) <= tol:
        return theta
    raise NumericalError("ERM Newton iterations did not converge")


def train_surrogate(mode: str, theta0: np.ndarray, kernel: LabelKernel, rng: np.random.Generator,
                    n_su: int = 0, ridge: float = 1e-2, loss: LossFunction | None = None) -> SurrogateModel:
    """perfect: the unit vector along theta0; fitted: ridge ERM on fresh data."""
    if mode == "perfect":
        return SurrogateModel(theta0 / np.linalg.norm(theta0), 1.0, 0.0)
    if mode != "fitted":
        raise ConfigError(f"unknown surrogate mode {mode!r}")
    if n_su < 1:
        raise ConfigError("fitted surrogate needs N_su >= 1")
    if loss is None:
        loss = LossFunction("logistic" if kernel.is_binary else "square")
    data, _ = generate_synthetic(n_su, theta0.size, kernel, rng, theta0)
    th = fit_erm(data, np.ones(n_su), loss, ridge)
    b0, bs, _ = surrogate_decompose(th, theta0)
    return SurrogateModel(th, b0, bs)


# -- selection ---------------------------------------------------------------------


def alpha_family_pi(index: np.ndarray, gamma: float, alpha: float) -> np.ndarray:
    """pi_i = min(c * curvature(T(b_i))^alpha, 1) with sum(pi) = gamma * N.

    alpha = +inf keeps the round(gamma N) points of largest curvature (the
    least confident ones), alpha = -inf the smallest; ties go to the lower
    index.
    """
    b = np.asarray(index, dtype=float)
    n_keep = gamma * b.size
    if not 0 < gamma <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    if alpha == 0:
        return np.full(b.size, gamma)
    cv = curvature(np.clip(b, -SCORE_CLIP, SCORE_CLIP))
    if math.isinf(alpha):
        k = int(round(n_keep))
        key = -cv if alpha > 0 else cv
        order = np.argsort(key, kind="stable")
        pi = np.zeros(b.size)
        pi[order[:k]] = 1.0
        return pi
    logcv = alpha * np.log(cv)
    if gamma == 1:
        return np.ones(b.size)

    def total(lc):
        return float(np.exp(np.minimum(lc + logcv, 0.0)).sum())

    center = math.log(gamma) - float(np.log(np.mean(np.exp(logcv - logcv.max())))) - logcv.max()
    lc = bisect_monotone(total, n_keep, center - 1, center + 1, tol=1e-9 * max(1.0, n_keep))
    return np.exp(np.minimum(lc + logcv, 0.0))


def draw_selection(pi: np.ndarray, rng: np.random.Generator, reweight: bool) -> np.ndarray:
    """Realized selection variable: w_i if kept (w = 1/pi or 1), else 0."""
    keep = rng.random(pi.shape) < pi
    w = np.where(pi > 0, 1.0 / np.where(pi > 0, pi, 1.0), 0.0) if reweight else np.ones_like(pi)
    return np.where(keep, w, 0.0)


# -- measurement -------------------------------------------------------------------

_REF_CACHE: dict = {}


def _reference(kernel: LabelKernel, loss: LossFunction) -> float:
    key = (kernel.kind, kernel.theta0_norm, kernel.eta, kernel.zeta, kernel.tau, id(kernel.h),
           loss.kind, loss.test_kind)
    if key not in _REF_CACHE:
        _REF_CACHE[key] = reference_test_error(kernel, loss)
    return _REF_CACHE[key]


@dataclass(frozen=True)
class Measurement:
    test_error: float
    misclassification: float
    excess: float
    alpha0: float
    alphas: float
    alphaperp: float
    holdout_error: float | None = None


def measure_test_error(theta_hat: np.ndarray, theta0: np.ndarray, kernel: LabelKernel, loss: LossFunction,
                       theta_su: np.ndarray | None = None, holdout: int = 0,
                       rng: np.random.Generator | None = None, chunk: int = 10_000) -> Measurement:
    """Exact Gaussian-design test error from the fit's projections, plus an
    optional Monte Carlo estimate on `holdout` fresh samples."""
    e0 = theta0 / np.linalg.norm(theta0)
    a0 = float(theta_hat @ e0)
    as_ = 0.0
    rest = theta_hat - a0 * e0
    if theta_su is not None:
        _, bs, es = surrogate_decompose(theta_su, theta0)
        if bs > 0:
            as_ = float(theta_hat @ es)
            rest = rest - as_ * es
    ap = float(np.linalg.norm(rest))
    r = math.hypot(as_, ap)
    test = test_error_from_projections(kernel, loss, a0, r)
    mis = misclassification_from_projections(kernel, a0, r)
    hold = None
    if holdout > 0:
        if rng is None:
            raise ConfigError("holdout estimate needs an rng")
        total, done = 0.0, 0
        while done < holdout:
            m = min(chunk, holdout - done)
            data, _ = generate_synthetic(m, theta0.size, kernel, rng, theta0)
            total += float(loss.test_value(data.features @ theta_hat, data.labels).sum())
            done += m
        hold = total / holdout
    return Measurement(test, mis, test - _reference(kernel, loss), a0, as_, ap, hold)


# -- experiments -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    n: int
    p: int
    kernel: LabelKernel
    loss: LossFunction
    selection_kind: str = "alpha-family"
    gammas: tuple[float, ...] = (1.0,)
    alphas: tuple[float, ...] = (0.0,)
    reweight: bool = False
    ridges: tuple[float, ...] = (1e-2,)
    ridge_grid: tuple[float, ...] | None = None
    surrogate_mode: str = "perfect"
    n_su: int = 0
    ridge_su: float = 1e-2
    replicates: int = 1
    seed: int = 0
    holdout: int = 100_000

    def __post_init__(self) -> None:
        if self.n < 1 or self.p < 1 or self.replicates < 1:
            raise ConfigError("N, p and replicates must be positive")
        if any(not 0 < g <= 1 for g in self.gammas):
            raise ConfigError("every gamma must lie in (0, 1]")
        if self.selection_kind not in ("random", "alpha-family", "topk-hard", "topk-easy"):
            raise ConfigError(f"unsupported selection kind {self.selection_kind!r}")

    @property
    def alpha_values(self) -> tuple[float, ...]:
        if self.selection_kind == "random":
            return (0.0,)
        if self.selection_kind == "topk-hard":
            return (math.inf,)
        if self.selection_kind == "topk-easy":
            return (-math.inf,)
        return self.alphas

    @property
    def lambda_values(self) -> tuple[float, ...]:
        return (math.nan,) if self.ridge_grid else self.ridges

    @property
    def scheme(self) -> str:
        return self.selection_kind + ("+reweight" if self.reweight else "")


@dataclass(frozen=True)
class ResultRow:
    scheme: str
    gamma: float
    alpha: float
    lambda_: float
    replicate: int
    realized_n: int
    test_error: float
    misclassification: float
    excess: float
    theory_test_error: float | None
    alpha0_fit: float
    alphas_fit: float
    alphaperp_fit: float
    status: str = "ok"

    @staticmethod
    def header() -> list[str]:
        return [("lambda" if f.name == "lambda_" else f.name) for f in fields(ResultRow)]

    def values(self) -> list:
        return [getattr(self, f.name) for f in fields(ResultRow)]


@dataclass(frozen=True)
class CellSummary:
    scheme: str
    gamma: float
    alpha: float
    lambda_: float
    replicates: int
    median_test_error: float
    q25_test_error: float
    q75_test_error: float
    median_misclassification: float
    theory_test_error: float | None
    theory_misclassification: float | None
    status: str = "ok"

    @staticmethod
    def header() -> list[str]:
        return [("lambda" if f.name == "lambda_" else f.name) for f in fields(CellSummary)]

    def values(self) -> list:
        return [getattr(self, f.name) for f in fields(CellSummary)]

    @property
    def theory_in_iqr(self) -> bool:
        t = self.theory_test_error
        return t is not None and self.q25_test_error <= t <= self.q75_test_error


@dataclass
class ExperimentResult:
    rows: list[ResultRow] = field(default_factory=list)
    summary: list[CellSummary] = field(default_factory=list)


def _run_replicate(cfg: ExperimentConfig, rep: int) -> list[tuple[tuple[int, int, int], ResultRow, float | None]]:
    """All (gamma, alpha, lambda) cells of one replicate on a shared dataset."""
    theta0 = cfg.kernel.theta0_norm * random_direction(cfg.p, make_rng(cfg.seed, _DIRECTION))
    data, _ = generate_synthetic(cfg.n, cfg.p, cfg.kernel, make_rng(cfg.seed, _DATA, rep), theta0)
    sur = train_surrogate(cfg.surrogate_mode, theta0, cfg.kernel, make_rng(cfg.seed, _SURROGATE, rep),
                          cfg.n_su, cfg.ridge_su)
    val_mask = np.zeros(cfg.n, dtype=bool)
    if cfg.ridge_grid:
        val_mask[: max(1, cfg.n // 10)] = True
    train = Dataset(data.features[~val_mask], data.labels[~val_mask])
    val = Dataset(data.features[val_mask], data.labels[val_mask]) if val_mask.any() else None
    index = train.features @ sur.theta_su
    out = []
    for gi, gamma in enumerate(cfg.gammas):
        for ai, alpha in enumerate(cfg.alpha_values):
            pi = alpha_family_pi(index, gamma, alpha)
            sel_rng = make_rng(cfg.seed, _SELECT, gi, ai, rep)
            s = draw_selection(pi, sel_rng, cfg.reweight)
            for li, lam in enumerate(cfg.lambda_values):
                key = (gi, ai, li)
                try:
                    if cfg.ridge_grid:
                        lam, th = _pick_ridge(train, val, s, cfg)
                    else:
                        th = fit_erm(train, s, cfg.loss, lam)
                    meas = measure_test_error(th, theta0, cfg.kernel, cfg.loss, sur.theta_su, cfg.holdout,
                                              make_rng(cfg.seed, _HOLDOUT, gi, ai, li, rep))
                    row = ResultRow(cfg.scheme, gamma, alpha, lam, rep, int((s > 0).sum()), meas.test_error,
                                    meas.misclassification, meas.excess, None, meas.alpha0, meas.alphas,
                                    meas.alphaperp)
                except NumericalError:
                    nan = math.nan
                    row = ResultRow(cfg.scheme, gamma, alpha, lam, rep, int((s > 0).sum()), nan, nan, nan, None,
                                    nan, nan, nan, "erm-failed")
                # surrogate geometry travels with the row for the theory overlay
                out.append((key, row, (sur.beta0, sur.beta_s)))
    return out


def _pick_ridge(train: Dataset, val: Dataset, s: np.ndarray, cfg: ExperimentConfig) -> tuple[float, np.ndarray]:
    best = None
    for lam in cfg.ridge_grid:
        th = fit_erm(train, s, cfg.loss, lam)
        err = float(np.mean(cfg.loss.test_value(val.features @ th, val.labels)))
        if best is None or err < best[0]:
            best = (err, lam, th)
    return best[1], best[2]


def _theory(cfg: ExperimentConfig, gamma: float, alpha: float, lam: float, beta: tuple[float, float]):
    b0, bs = beta
    n_train = cfg.n - (max(1, cfg.n // 10) if cfg.ridge_grid else 0)
    kind = "random" if cfg.selection_kind == "random" else "alpha-family"
    rule = population_rule(kind, gamma, alpha, math.hypot(b0, bs), cfg.reweight)
    lams = cfg.ridge_grid if cfg.ridge_grid else (lam,)
    best = None
    for lm in lams:
        sol = solve_saddle(SaddleSpec(cfg.loss, cfg.kernel, rule, b0, bs, n_train / cfg.p, lm))
        if best is None or sol.test_error < best.test_error:
            best = sol
    return best


def _theory_job(args):
    cfg, key, gamma, alpha, lam, beta = args
    try:
        sol = _theory(cfg, gamma, alpha, lam, beta)
        return key, sol.test_error, sol.misclassification, "ok"
    except (NumericalError, ValueError):
        return key, None, None, "saddle-failed"


def run_sweep(cfg: ExperimentConfig, jobs: int = 1, theory: bool = True) -> ExperimentResult:
    """Every (gamma, alpha, lambda, replicate) cell, with replicate data and
    selection draws keyed by (seed, cell indices, replicate) so the output
    does not depend on `jobs`."""
    reps = list(range(cfg.replicates))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_rep = list(ex.map(_run_replicate, [cfg] * len(reps), reps))
    else:
        per_rep = [_run_replicate(cfg, r) for r in reps]
    cells: dict[tuple[int, int, int], list[tuple[ResultRow, tuple[float, float]]]] = {}
    for rep_out in per_rep:
        for key, row, beta in rep_out:
            cells.setdefault(key, []).append((row, beta))

    theory_out: dict = {}
    if theory:
        tasks = []
        for key in sorted(cells):
            rows = cells[key]
            beta = (float(np.mean([b[0] for _, b in rows])), float(np.mean([b[1] for _, b in rows])))
            r0 = rows[0][0]
            tasks.append((cfg, key, r0.gamma, r0.alpha, r0.lambda_, beta))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(_theory_job, tasks))
        else:
            results = [_theory_job(t) for t in tasks]
        theory_out = {k: (te, mc, st) for k, te, mc, st in results}

    result = ExperimentResult()
    for key in sorted(cells):
        te, mc, st = theory_out.get(key, (None, None, "ok"))
        rows = []
        for row, _ in sorted(cells[key], key=lambda rb: rb[0].replicate):
            status = row.status if row.status != "ok" else st
            rows.append(_with(row, theory_test_error=te, status=status))
        result.rows.extend(rows)
        good = [r for r in rows if r.status != "erm-failed"]
        errs = np.array([r.test_error for r in good])
        mis = np.array([r.misclassification for r in good])
        r0 = rows[0]
        if errs.size:
            q25, med, q75 = np.percentile(errs, [25, 50, 75])
            mmed = float(np.median(mis))
        else:
            q25 = med = q75 = mmed = math.nan
        result.summary.append(CellSummary(r0.scheme, r0.gamma, r0.alpha, r0.lambda_ if not cfg.ridge_grid else math.nan,
                                          len(good), float(med), float(q25), float(q75), mmed, te, mc,
                                          "ok" if good and st == "ok" else (st if good else "erm-failed")))
    return result


def _with(row: ResultRow, **kw) -> ResultRow:
    vals = {f.name: getattr(row, f.name) for f in fields(ResultRow)}
    vals.update(kw)
    return ResultRow(**vals)


def default_jobs() -> int:
    raw = os.environ.get("SUBSAMPLE_LAB_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
