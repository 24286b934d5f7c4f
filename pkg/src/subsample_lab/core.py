"""Shared domain types: datasets, label kernels, losses, selection rules, RNG."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, NumericalError, SubsampleLabError  # noqa: F401
from .numerics import gauss_hermite

# Surrogate index is clipped to this range before the curvature is taken.
SCORE_CLIP = 10.0


# -- random numbers -----------------------------------------------------------


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator addressed by a 64-bit seed and an integer key path.

    Two calls with the same arguments give identical streams, so a
    replicate's randomness never depends on scheduling or worker count.
    """
    if seed < 0 or any(k < 0 for k in key):
        raise ConfigError("seeds and keys must be non-negative integers")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def random_direction(p: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(p)
    return v / np.linalg.norm(v)


# -- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ConfigError("features must be a non-empty 2-d array")
        if not np.all(np.isfinite(x)):
            raise ConfigError("features contain non-finite values")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=float).reshape(-1)
            if y.shape[0] != x.shape[0]:
                raise ConfigError("labels and features disagree in length")
            if not np.all(np.isfinite(y)):
                raise ConfigError("labels contain non-finite values")
            object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def check_binary(self) -> None:
        if self.labels is None or not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ConfigError("binary kernels require labels in {-1, +1}")


# -- label kernels ------------------------------------------------------------

_KERNEL_KINDS = ("glm-logistic", "sign-flip", "staircase", "gaussian-noise", "deterministic")


@dataclass(frozen=True)
class LabelKernel:
    """Conditional law of the label given the index z = <theta0, x>.

    Kinds:
      glm-logistic    P(y=+1|z) = 1/(1+exp(-2z))
      sign-flip       y = sign(z) with prob. eta, flipped otherwise
      staircase       clean (prob. eta) for |z| < 1/2, prob. zeta beyond
      gaussian-noise  y = z + tau * noise
      deterministic   y = h(z)
    """

    kind: str
    theta0_norm: float = 1.0
    eta: float | None = None
    zeta: float | None = None
    tau: float | None = None
    h: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in _KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if not (self.theta0_norm >= 0 and np.isfinite(self.theta0_norm)):
            raise ConfigError("theta0_norm must be finite and non-negative")
        if self.kind == "sign-flip" and not (self.eta is not None and 0.5 < self.eta <= 1):
            raise ConfigError("sign-flip needs eta in (1/2, 1]")
        if self.kind == "staircase":
            for name in ("eta", "zeta"):
                v = getattr(self, name)
                if v is None or not 0 <= v <= 1:
                    raise ConfigError(f"staircase needs {name} in [0, 1]")
        if self.kind == "gaussian-noise" and not (self.tau is not None and self.tau > 0):
            raise ConfigError("gaussian-noise needs tau > 0")
        if self.kind == "deterministic" and self.h is None:
            raise ConfigError("deterministic kernel needs a link function h")

    # constructors
    @classmethod
    def logistic(cls, theta0_norm: float = 1.0) -> LabelKernel:
        return cls("glm-logistic", theta0_norm)

    @classmethod
    def sign_flip(cls, eta: float, theta0_norm: float = 1.0) -> LabelKernel:
        return cls("sign-flip", theta0_norm, eta=eta)

    @classmethod
    def staircase(cls, eta: float, zeta: float, theta0_norm: float = 1.0) -> LabelKernel:
        return cls("staircase", theta0_norm, eta=eta, zeta=zeta)

    @classmethod
    def gaussian_noise(cls, tau: float, theta0_norm: float = 1.0) -> LabelKernel:
        return cls("gaussian-noise", theta0_norm, tau=tau)

    @classmethod
    def deterministic(cls, h: Callable[[np.ndarray], np.ndarray], theta0_norm: float = 1.0) -> LabelKernel:
        return cls("deterministic", theta0_norm, h=h)

    @classmethod
    def cubic(cls, c: float, theta0_norm: float = 1.0) -> LabelKernel:
        """y = t + c (t^3 - 3t): the cubic term is orthogonal to t under N(0,1)."""
        return cls.deterministic(lambda t: t + c * (t**3 - 3 * t), theta0_norm)

    @property
    def is_binary(self) -> bool:
        return self.kind in ("glm-logistic", "sign-flip", "staircase")

    def breakpoints(self) -> tuple[float, ...]:
        """Points in z where the conditional law jumps."""
        if self.kind == "sign-flip":
            return (0.0,)
        if self.kind == "staircase":
            return (-0.5, 0.0, 0.5)
        return ()

    def prob_positive(self, z: np.ndarray) -> np.ndarray:
        """P(Y > 0 | z)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "glm-logistic":
            return 0.5 * (1.0 + np.tanh(z))
        if self.kind == "sign-flip":
            return np.where(z >= 0, self.eta, 1.0 - self.eta)
        if self.kind == "staircase":
            q = np.where(np.abs(z) < 0.5, self.eta, self.zeta)
            return np.where(z >= 0, q, 1.0 - q)
        if self.kind == "gaussian-noise":
            return ndtr(z / self.tau)
        return (np.asarray(self.h(z)) > 0).astype(float)

    def sample(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.is_binary:
            u = rng.random(z.shape)
            return np.where(u < self.prob_positive(z), 1.0, -1.0)
        if self.kind == "gaussian-noise":
            return z + self.tau * rng.standard_normal(z.shape)
        return np.asarray(self.h(z), dtype=float)

    def label_nodes(self, z: np.ndarray, order: int = 40) -> tuple[np.ndarray, np.ndarray]:
        """Discrete representation of Y | z as (values, probabilities), each (n, K)."""
        z = np.asarray(z, dtype=float).reshape(-1)
        if self.is_binary:
            f = self.prob_positive(z)
            vals = np.broadcast_to(np.array([1.0, -1.0]), (z.size, 2))
            return vals.copy(), np.stack([f, 1.0 - f], axis=1)
        if self.kind == "gaussian-noise":
            q = gauss_hermite(order)
            vals = z[:, None] + self.tau * q.nodes[None, :]
            return vals, np.broadcast_to(q.weights, vals.shape).copy()
        return np.asarray(self.h(z), dtype=float).reshape(-1, 1), np.ones((z.size, 1))

    def conditional_expectation(self, z: np.ndarray, fn: Callable[[np.ndarray], np.ndarray],
                                order: int = 40) -> np.ndarray:
        """E[fn(Y) | z] for each entry of z; fn is applied to the (n, K) label nodes."""
        vals, probs = self.label_nodes(z, order)
        return np.sum(probs * fn(vals), axis=1)


def sample_label(kernel: LabelKernel, z, rng: np.random.Generator):
    """Draw labels for indices z; scalar in, scalar out."""
    out = kernel.sample(np.asarray(z, dtype=float), rng)
    return float(out) if np.ndim(z) == 0 else out


# -- losses -------------------------------------------------------------------


@dataclass(frozen=True)
class LossFunction:
    """Training loss in the +-1 label convention.

    square:    (y - u)^2 / 2
    logistic:  -y u + log(e^u + e^-u)
    """

    kind: str
    test_kind: str = "same-as-train"

    def __post_init__(self) -> None:
        if self.kind not in ("square", "logistic"):
            raise ConfigError(f"unknown loss {self.kind!r}")
        if self.test_kind not in ("same-as-train", "misclassification"):
            raise ConfigError(f"unknown test loss {self.test_kind!r}")

    def value(self, u, y):
        u = np.asarray(u, dtype=float)
        if self.kind == "square":
            return 0.5 * (y - u) ** 2
        a = np.abs(u)
        return -y * u + a + np.log1p(np.exp(-2.0 * a))

    def deriv(self, u, y):
        u = np.asarray(u, dtype=float)
        if self.kind == "square":
            return u - y
        return np.tanh(u) - y

    def second(self, u, y=None):
        u = np.asarray(u, dtype=float)
        if self.kind == "square":
            return np.ones_like(u)
        return 1.0 - np.tanh(u) ** 2

    def test_value(self, u, y):
        if self.test_kind == "misclassification":
            return (np.asarray(y) * np.asarray(u) <= 0).astype(float)
        return self.value(u, y)


def curvature(t) -> np.ndarray:
    """Second derivative of log(e^t + e^-t), i.e. 1 - tanh(t)^2."""
    return 1.0 - np.tanh(np.asarray(t, dtype=float)) ** 2


# -- surrogates ---------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateModel:
    theta_su: np.ndarray
    beta0: float
    beta_s: float

    @property
    def beta_norm(self) -> float:
        return float(np.hypot(self.beta0, self.beta_s))


def surrogate_decompose(theta_su: np.ndarray, theta0: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Split theta_su into its component along theta0 and the orthogonal rest.

    Returns (beta0, beta_s, e_s) with theta_su = beta0 * e0 + beta_s * e_s,
    e0 = theta0 / |theta0| and e_s a unit vector orthogonal to e0 (zero
    vector when beta_s == 0).
    """
    theta_su = np.asarray(theta_su, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    n0 = np.linalg.norm(theta0)
    if n0 == 0:
        raise ConfigError("theta0 must be non-zero")
    e0 = theta0 / n0
    beta0 = float(theta_su @ e0)
    rest = theta_su - beta0 * e0
    beta_s = float(np.linalg.norm(rest))
    e_s = rest / beta_s if beta_s > 1e-14 * max(1.0, abs(beta0)) else np.zeros_like(rest)
    if not e_s.any():
        beta_s = 0.0
    return beta0, beta_s, e_s


# -- selection ----------------------------------------------------------------

SELECTION_KINDS = (
    "random",
    "unbiased-influence",
    "nonreweight-optimal",
    "alpha-family",
    "topk-hard",
    "topk-easy",
    "minimax-discrete",
)


@dataclass(frozen=True)
class SelectionRule:
    """Selection probability pi and weight w as functions of a scalar score.

    The score depends on the kind: the influence score for the
    low-dimensional schemes, the surrogate index for the curvature-based
    families, a level index for the discrete minimax rule. `score_fn` maps
    raw features to that score; when absent, inputs are scores already.

    state keys:
      unbiased-influence   c
      nonreweight-optimal  threshold, tie_fraction
      alpha-family         c
      topk-hard/-easy      threshold (on the clipped curvature)
      minimax-discrete     pi_levels
    """

    kind: str
    gamma: float
    alpha: float | None = None
    reweight: bool = False
    state: Mapping[str, Any] = field(default_factory=dict)
    score_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in SELECTION_KINDS:
            raise ConfigError(f"unknown selection kind {self.kind!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")

    def score(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.score_fn(x) if self.score_fn is not None else x, dtype=float)

    def pi_from_score(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        k, st = self.kind, self.state
        if k == "random":
            return np.full(s.shape, self.gamma)
        if k == "unbiased-influence":
            c = st["c"]
            if np.isinf(c):
                return np.ones(s.shape)
            return np.minimum(1.0, c * np.sqrt(np.maximum(s, 0.0)))
        if k == "nonreweight-optimal":
            thr = st["threshold"]
            tie = st.get("tie_fraction", 0.0)
            return np.where(s > thr, 1.0, np.where(s == thr, tie, 0.0))
        if k == "alpha-family":
            return alpha_family_probabilities(s, self.alpha, st["c"])
        if k in ("topk-hard", "topk-easy"):
            cv = curvature(np.clip(s, -SCORE_CLIP, SCORE_CLIP))
            keep = cv >= st["threshold"] if k == "topk-hard" else cv <= st["threshold"]
            return keep.astype(float)
        levels = np.asarray(st["pi_levels"], dtype=float)
        return levels[s.astype(int)]

    def weight_from_pi(self, pi: np.ndarray) -> np.ndarray:
        if not self.reweight:
            return np.ones_like(pi)
        out = np.zeros_like(pi)
        pos = pi > 0
        out[pos] = 1.0 / pi[pos]
        return out

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        if self.score_fn is None and np.ndim(x) == 2:
            if self.kind != "random":
                raise ConfigError(f"{self.kind} rule needs a score function to act on feature rows")
            return np.full(np.shape(x)[0], self.gamma)
        return self.pi_from_score(self.score(x))

    def weights(self, x: np.ndarray) -> np.ndarray:
        return self.weight_from_pi(self.probabilities(x))

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Realized S(x): w(x) with probability pi(x), else 0."""
        pi = self.probabilities(x)
        keep = rng.random(pi.shape) < pi
        return np.where(keep, self.weight_from_pi(pi), 0.0)

    def breakpoints(self) -> tuple[float, ...]:
        """Score values where pi has a kink or jump (curvature families only)."""
        k, st = self.kind, self.state
        if k == "alpha-family":
            if self.alpha == 0:
                return ()
            pts = [-SCORE_CLIP, SCORE_CLIP]
            c = st["c"]
            level = c ** (-1.0 / self.alpha)
            if curvature(SCORE_CLIP) < level < 1.0:
                r = float(np.arccosh(1.0 / np.sqrt(level)))
                pts += [-r, r]
            return tuple(sorted(pts))
        if k in ("topk-hard", "topk-easy"):
            thr = st["threshold"]
            if 0 < thr < 1:
                r = float(np.arccosh(1.0 / np.sqrt(thr)))
                return (-r, r)
        return ()


def alpha_family_probabilities(s, alpha: float, c: float) -> np.ndarray:
    """min(c * curvature(T(s))^alpha, 1) for finite alpha."""
    cv = curvature(np.clip(np.asarray(s, dtype=float), -SCORE_CLIP, SCORE_CLIP))
    if alpha == 0:
        return np.minimum(np.full(cv.shape, c), 1.0)
    with np.errstate(over="ignore", divide="ignore"):
        logv = np.log(c) + alpha * np.log(cv)
    return np.exp(np.minimum(logv, 0.0))


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class EstimationMetric:
    Q: np.ndarray
    kind: str = "custom"

    def __post_init__(self) -> None:
        q = np.asarray(self.Q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ConfigError("metric must be a square matrix")
        if not np.allclose(q, q.T, atol=1e-12 * max(1.0, np.abs(q).max())):
            raise ConfigError("metric must be symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-12:
            raise ConfigError("metric must be positive semi-definite")
        object.__setattr__(self, "Q", q)

    @classmethod
    def identity(cls, p: int) -> EstimationMetric:
        return cls(np.eye(p), "identity")
