"""Tweedie compound Poisson-Gamma distribution mathematics.

Two parameterizations are supported and linked by closed-form maps:
the compound form {lambda, alpha, beta} (Poisson rate, Gamma shape,
Gamma scale) and the exponential-dispersion form {mu, p_index,
dispersion} with variance Var(Y) = dispersion * mu ** p_index and
p_index restricted to (1, 2).

All density work happens in log space.  The intractable marginal is
approximated by a truncated sum over the latent Poisson count; a
high-precision series evaluator serves as the internal ground-truth
oracle for truncation-error tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

LOG_2PI = math.log(2.0 * math.pi)


class InvalidParameterError(ValueError):
    """Distribution parameters violate their invariants."""


class TruncationConfigError(ValueError):
    """Truncation settings violate their invariants."""


class NonConvergenceError(RuntimeError):
    """The series evaluator failed to converge within its term budget."""

    def __init__(self, message: str, last_value: float):
        self.last_value = last_value
        super().__init__(message)


def _require_positive_finite(**fields) -> None:
    for name, value in fields.items():
        if not math.isfinite(value) or value <= 0.0:
            raise InvalidParameterError(f"{name} must be a finite positive real, got {value!r}")


@dataclass(frozen=True)
class CompoundParams:
    """Compound Poisson-Gamma parameters: Poisson rate, Gamma shape/scale."""

    lam: float
    alpha: float
    beta: float

    def __post_init__(self):
        _require_positive_finite(lam=self.lam, alpha=self.alpha, beta=self.beta)


@dataclass(frozen=True)
class EdmParams:
    """Exponential-dispersion parameters: mean, variance power, dispersion."""

    mu: float
    p_index: float
    dispersion: float

    def __post_init__(self):
        _require_positive_finite(mu=self.mu, dispersion=self.dispersion)
        if not (1.0 < self.p_index < 2.0) or not math.isfinite(self.p_index):
            raise InvalidParameterError(
                f"p_index must lie in the open interval (1, 2), got {self.p_index!r}"
            )


@dataclass(frozen=True)
class TruncationConfig:
    """Finite-sum approximation settings for the latent-count marginal.

    ``n_max`` is the number of retained terms.  In adaptive mode the
    n_max-wide summation window is centered on the index that maximizes
    the log summand; in fixed mode the window is always 1..n_max.
    """

    n_max: int = 10
    adaptive: bool = True

    def __post_init__(self):
        if self.n_max < 1:
            raise TruncationConfigError(f"n_max must be >= 1, got {self.n_max}")


# ---------------------------------------------------------------------------
# Parameter maps
# ---------------------------------------------------------------------------

def to_edm(c: CompoundParams) -> EdmParams:
    """Map compound parameters to the mean/power/dispersion form."""
    mu = c.lam * c.alpha * c.beta
    p = (c.alpha + 2.0) / (c.alpha + 1.0)
    phi = c.lam ** (1.0 - p) * (c.alpha * c.beta) ** (2.0 - p) / (2.0 - p)
    return EdmParams(mu=mu, p_index=p, dispersion=phi)


def to_compound(e: EdmParams) -> CompoundParams:
    """Map mean/power/dispersion parameters to the compound form."""
    p, mu, phi = e.p_index, e.mu, e.dispersion
    lam = mu ** (2.0 - p) / (phi * (2.0 - p))
    alpha = (2.0 - p) / (p - 1.0)
    beta = phi * (p - 1.0) * mu ** (p - 1.0)
    return CompoundParams(lam=lam, alpha=alpha, beta=beta)


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------

def joint_log_density(y: float, n: int, c: CompoundParams) -> float:
    """Log joint density of (Y = y, N = n) under the compound law.

    The mismatched branches (y = 0 with n > 0, or y > 0 with n = 0)
    carry zero probability mass and return -inf rather than raising, so
    the truncated-sum marginal stays branch-free.
    """
    if y < 0.0:
        raise InvalidParameterError(f"y must be nonnegative, got {y!r}")
    if n < 0:
        raise InvalidParameterError(f"n must be nonnegative, got {n!r}")
    if n == 0:
        return -c.lam if y == 0.0 else -math.inf
    if y == 0.0:
        return -math.inf
    return _log_summand(y, np.array([n], dtype=float), c)[0]


def _log_summand(y: float, n, c: CompoundParams) -> np.ndarray:
    """Log of the n-th term of the latent-count sum, for y > 0, n >= 1.

    Gamma(y; shape n*alpha, scale beta) * Poisson(n; lambda), vectorized
    over n.
    """
    n = np.asarray(n, dtype=float)
    na = n * c.alpha
    log_y = math.log(y)
    log_beta = math.log(c.beta)
    log_lam = math.log(c.lam)
    return (
        (na - 1.0) * log_y
        - y / c.beta
        - na * log_beta
        - gammaln(na)
        + n * log_lam
        - c.lam
        - gammaln(n + 1.0)
    )


def _summand_mode(y: float, c: CompoundParams) -> int:
    """Index n >= 1 maximizing the log summand.

    Starts from the continuous approximation jmax = y^(2-p) / ((2-p) phi)
    and refines by the discrete derivative of the log summand.
    """
    e = to_edm(c)
    jmax = y ** (2.0 - e.p_index) / ((2.0 - e.p_index) * e.dispersion)
    n = max(1, int(round(jmax)))

    def s(k: int) -> float:
        return float(_log_summand(y, k, c))

    while s(n + 1) > s(n):
        n += 1
    while n > 1 and s(n - 1) > s(n):
        n -= 1
    return n


def truncation_window(y: float, c: CompoundParams, t: TruncationConfig) -> np.ndarray:
    """Indices summed by :func:`marginal_log_likelihood` for y > 0."""
    if t.adaptive:
        mode = _summand_mode(y, c)
        lo = max(1, mode - t.n_max // 2)
    else:
        lo = 1
    return np.arange(lo, lo + t.n_max)


def marginal_log_likelihood(y: float, c: CompoundParams, t: TruncationConfig) -> float:
    """Truncated-sum approximation of the marginal log density of Y.

    Exact at y = 0 (the zero branch is a single term, -lambda); for
    y > 0 the latent count is summed over a finite window, giving a
    lower bound that is nondecreasing in ``n_max``.
    """
    if y < 0.0:
        raise InvalidParameterError(f"y must be nonnegative, got {y!r}")
    if y == 0.0:
        return -c.lam
    terms = _log_summand(y, truncation_window(y, c, t), c)
    return _logsumexp(terms)


def _logsumexp(values: np.ndarray) -> float:
    m = float(values.max())
    if math.isinf(m) and m < 0:
        return -math.inf
    return m + math.log(float(np.exp(values - m).sum()))


def series_log_density_oracle(y: float, e: EdmParams, rel_tol: float = 1e-12) -> float:
    """High-precision log density by summing the latent-count series.

    Terms are added from n = 1 upward until the next term contributes
    less than ``rel_tol`` of the running sum and n has passed the
    summand's mode.  This is the internal ground truth against which the
    truncated marginal is tested; it is not tied to any published
    evaluator.
    """
    if y < 0.0:
        raise InvalidParameterError(f"y must be nonnegative, got {y!r}")
    if not (0.0 < rel_tol <= 1e-3):
        raise InvalidParameterError(f"rel_tol must lie in (0, 1e-3], got {rel_tol!r}")
    c = to_compound(e)
    if y == 0.0:
        return -c.lam
    mode = _summand_mode(y, c)
    max_terms = 100_000
    log_sum = -math.inf
    for n in range(1, max_terms + 1):
        log_t = float(_log_summand(y, n, c))
        log_sum = np.logaddexp(log_sum, log_t)
        if n > mode and log_t - log_sum < math.log(rel_tol):
            return float(log_sum)
    raise NonConvergenceError(
        f"series did not converge within {max_terms} terms (y={y}, {e})",
        last_value=float(log_sum),
    )


# ---------------------------------------------------------------------------
# Vectorized fast path (shared p_index and dispersion across observations)
# ---------------------------------------------------------------------------

def _window_starts(y: np.ndarray, mu: np.ndarray, p: float, phi: float,
                   n_max: int, adaptive: bool) -> np.ndarray:
    """Vectorized first summation index per observation (y > 0 entries)."""
    if not adaptive:
        return np.ones(y.shape, dtype=int)
    jmax = y ** (2.0 - p) / ((2.0 - p) * phi)
    mode = np.maximum(1, np.rint(jmax).astype(int))

    alpha = (2.0 - p) / (p - 1.0)
    log_beta = np.log(phi * (p - 1.0)) + (p - 1.0) * np.log(mu)
    log_lam = (2.0 - p) * np.log(mu) - math.log(phi * (2.0 - p))
    log_y = np.log(y)

    def s(n):
        na = n * alpha
        return (na - 1.0) * log_y - na * log_beta - gammaln(na) + n * log_lam - gammaln(n + 1.0)

    # refine the continuous argmax by the discrete derivative
    for _ in range(64):
        up = s(mode + 1) > s(mode)
        if not up.any():
            break
        mode = np.where(up, mode + 1, mode)
    for _ in range(64):
        down = (mode > 1) & (s(np.maximum(mode - 1, 1)) > s(mode))
        if not down.any():
            break
        mode = np.where(down, mode - 1, mode)
    return np.maximum(1, mode - n_max // 2)


def tweedie_log_pdf(y: np.ndarray, mu: np.ndarray, p: float, phi: float,
                    t: TruncationConfig) -> np.ndarray:
    """Truncated marginal log density for arrays of y and mu.

    Same windowed sum as :func:`marginal_log_likelihood`, vectorized for
    a shared index parameter and dispersion across observations.
    """
    y = np.asarray(y, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), y.shape)
    if (y < 0).any():
        raise InvalidParameterError("y must be nonnegative")
    lam = mu ** (2.0 - p) / (phi * (2.0 - p))
    out = np.empty(y.shape)
    zero = y == 0.0
    out[zero] = -lam[zero]
    if (~zero).any():
        yp = y[~zero]
        mup = mu[~zero]
        lamp = lam[~zero]
        alpha = (2.0 - p) / (p - 1.0)
        beta = phi * (p - 1.0) * mup ** (p - 1.0)
        lo = _window_starts(yp, mup, p, phi, t.n_max, t.adaptive)
        ns = lo[:, None] + np.arange(t.n_max)[None, :]
        na = ns * alpha
        log_y = np.log(yp)[:, None]
        terms = (
            (na - 1.0) * log_y
            - (yp / beta)[:, None]
            - na * np.log(beta)[:, None]
            - gammaln(na)
            + ns * np.log(lamp)[:, None]
            - lamp[:, None]
            - gammaln(ns + 1.0)
        )
        m = terms.max(axis=1, keepdims=True)
        out[~zero] = (m[:, 0] + np.log(np.exp(terms - m).sum(axis=1)))
    return out


# ---------------------------------------------------------------------------
# Sampling and moments
# ---------------------------------------------------------------------------

def tweedie_sample(c: CompoundParams, rng: np.random.Generator) -> float:
    """One draw: N ~ Poisson(lambda), then the sum of N Gamma(alpha, beta)."""
    n = int(rng.poisson(c.lam))
    if n == 0:
        return 0.0
    # sum of n iid Gamma(alpha, scale beta) is Gamma(n * alpha, scale beta)
    return float(rng.gamma(n * c.alpha, c.beta))


def tweedie_sample_array(lam: np.ndarray, alpha: float, beta: np.ndarray,
                         rng: np.random.Generator) -> np.ndarray:
    """Vectorized compound draws with per-observation rate and scale."""
    lam = np.asarray(lam, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), lam.shape)
    n = rng.poisson(lam)
    y = np.zeros(lam.shape)
    pos = n > 0
    if pos.any():
        y[pos] = rng.gamma(n[pos] * alpha, beta[pos])
    return y


def tweedie_moments(e: EdmParams) -> tuple[float, float]:
    """Mean and variance: (mu, dispersion * mu ** p_index)."""
    return e.mu, e.dispersion * e.mu ** e.p_index
