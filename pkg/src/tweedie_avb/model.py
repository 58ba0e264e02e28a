"""Per-observation Tweedie parameters from data and latent draws.

A dataset couples a nonnegative response with a fixed-effect design
matrix and a group index for the random intercept.  A latent assignment
holds one concrete draw of the global latents (fixed-effect weights,
unconstrained index parameter, log dispersion, log random-effect scale)
plus per-group noise.  Constraint maps: p_index = 1 + sigmoid(raw),
dispersion = exp(raw), sigma_b = exp(raw); the link is log.

The log likelihood exists in two forms that agree to rounding: a
differentiable tape graph (used by the variational trainer) and a plain
numpy evaluation (used by the MCMC validator and tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Tape, TapeNode
from .tweedie import (
    LOG_2PI,
    CompoundParams,
    EdmParams,
    InvalidParameterError,
    TruncationConfig,
    to_compound,
    tweedie_log_pdf,
    _window_starts,
)

ETA_OVERFLOW_LIMIT = 30.0


class ShapeError(ValueError):
    """Array dimensions disagree with the dataset structure."""


class FlaggedObservationError(ValueError):
    """A linear predictor overflowed the log link for a known row."""

    def __init__(self, index: int, eta: float):
        self.index = index
        self.eta = eta
        super().__init__(f"linear predictor eta={eta:.3g} at row {index} exceeds +/-{ETA_OVERFLOW_LIMIT}")


@dataclass
class Dataset:
    """Observed rows: response, fixed-effect design, group membership."""

    responses: np.ndarray
    fixed_design: np.ndarray
    group_index: np.ndarray
    group_count: int
    column_names: list[str] = field(default_factory=list)
    group_levels: list[str] | None = None  # original labels, sorted, when loaded from CSV

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=float)
        self.fixed_design = np.asarray(self.fixed_design, dtype=float)
        self.group_index = np.asarray(self.group_index, dtype=int)
        m = self.responses.shape[0]
        if self.fixed_design.ndim != 2 or self.fixed_design.shape[0] != m:
            raise ShapeError(f"fixed_design must be ({m}, D), got {self.fixed_design.shape}")
        if self.group_index.shape != (m,):
            raise ShapeError(f"group_index must have length {m}")
        if (self.responses < 0).any():
            raise InvalidParameterError("responses must be nonnegative")
        if self.group_count > 0 and self.group_index.size and self.group_index.max() >= self.group_count:
            raise ShapeError("group index out of range")
        if self.group_index.size and self.group_index.min() < 0:
            raise ShapeError("group index must be nonnegative")

    @property
    def n_obs(self) -> int:
        return self.responses.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.fixed_design.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            responses=self.responses[rows],
            fixed_design=self.fixed_design[rows],
            group_index=self.group_index[rows],
            group_count=self.group_count,
            column_names=list(self.column_names),
            group_levels=self.group_levels,
        )


@dataclass
class LatentAssignment:
    """One draw of the global latents plus per-group random-effect noise.

    Fields hold floats/arrays on the numpy path, or TapeNodes when the
    assignment participates in a differentiable graph.
    """

    fixed_weights: object  # length D+1 including intercept
    raw_p: object
    raw_log_dispersion: object
    raw_log_sigma_b: object
    group_noise: np.ndarray

    @property
    def p_index(self) -> float:
        return 1.0 + float(expit(_value(self.raw_p)))

    @property
    def dispersion(self) -> float:
        return math.exp(_value(self.raw_log_dispersion))

    @property
    def sigma_b(self) -> float:
        return math.exp(_value(self.raw_log_sigma_b))


def _value(x) -> float:
    return x.value if isinstance(x, TapeNode) else float(x)


# ---------------------------------------------------------------------------
# Predictor assembly
# ---------------------------------------------------------------------------

def reparam_random_effects(sigma_b, noise):
    """Random intercepts b_g = sigma_b * noise_g (pathwise differentiable)."""
    if isinstance(sigma_b, TapeNode):
        return [sigma_b * float(e) for e in np.asarray(noise, dtype=float)]
    return float(sigma_b) * np.asarray(noise, dtype=float)


def linear_predictor(data: Dataset, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """eta_i = w_0 + X_i . w_1:D + b[group_i] (numpy path)."""
    w = np.asarray(w, dtype=float)
    if w.shape != (data.n_covariates + 1,):
        raise ShapeError(f"w must have length {data.n_covariates + 1}, got {w.shape}")
    eta = w[0] + data.fixed_design @ w[1:]
    if data.group_count > 0:
        b = np.asarray(b, dtype=float)
        if b.shape != (data.group_count,):
            raise ShapeError(f"b must have length {data.group_count}, got {b.shape}")
        eta = eta + b[data.group_index]
    return eta


def per_obs_params(eta: np.ndarray, p_index: float, dispersion: float) -> list[CompoundParams]:
    """Compound parameters per observation under the log link.

    p_index and dispersion are shared; mu_i = exp(eta_i).  Overflowing
    predictors are flagged with their row index rather than silently
    producing infinities.
    """
    eta = np.asarray(eta, dtype=float)
    big = np.abs(eta) > ETA_OVERFLOW_LIMIT
    if big.any():
        i = int(np.argmax(big))
        raise FlaggedObservationError(i, float(eta[i]))
    return [
        to_compound(EdmParams(mu=math.exp(e), p_index=p_index, dispersion=dispersion))
        for e in eta
    ]


# ---------------------------------------------------------------------------
# Log likelihood: numpy path
# ---------------------------------------------------------------------------

def model_log_likelihood_value(data: Dataset, z: LatentAssignment,
                               t: TruncationConfig, b=None) -> float:
    """Data log likelihood plus the random-intercept prior term (numpy).

    ``b`` overrides the default reparameterization sigma_b * group_noise
    with explicit intercept values (used by the MCMC sampler and by the
    learned per-group posterior in training).
    """
    p = z.p_index
    phi = z.dispersion
    sigma_b = z.sigma_b
    if b is None:
        b = reparam_random_effects(sigma_b, z.group_noise)
    eta = linear_predictor(data, np.asarray(z.fixed_weights, dtype=float), b)
    big = np.abs(eta) > ETA_OVERFLOW_LIMIT
    if big.any():
        i = int(np.argmax(big))
        raise FlaggedObservationError(i, float(eta[i]))
    mu = np.exp(eta)
    data_term = float(tweedie_log_pdf(data.responses, mu, p, phi, t).sum())
    prior_term = 0.0
    if data.group_count > 0:
        b = np.asarray(b, dtype=float)
        prior_term = float(
            np.sum(-0.5 * LOG_2PI - math.log(sigma_b) - b * b / (2.0 * sigma_b ** 2))
        )
    return data_term + prior_term


# ---------------------------------------------------------------------------
# Log likelihood: tape path
# ---------------------------------------------------------------------------

def model_log_likelihood(tape: Tape, data: Dataset, z: LatentAssignment,
                         t: TruncationConfig, b=None,
                         data_scale: float = 1.0) -> TapeNode:
    """Differentiable version of :func:`model_log_likelihood_value`.

    ``z``'s global fields must be TapeNodes living on ``tape``;
    ``group_noise`` stays a float array.  Gradients flow to every latent
    field (and to explicit ``b`` nodes when provided).  ``data_scale``
    multiplies the per-observation data terms only (minibatch
    reweighting); the intercept prior term is never scaled.
    """
    s = ad.sigmoid(z.raw_p)          # = p - 1
    two_m_p = 1.0 - s                # = 2 - p
    log_pm1 = ad.log(s)
    log_2mp = ad.log(two_m_p)
    alpha = two_m_p / s
    log_phi = z.raw_log_dispersion
    sigma_b = ad.exp(z.raw_log_sigma_b)

    # shared affine offsets for per-observation log(lambda) and log(beta)
    c_lam = ad.neg(log_phi + log_2mp)
    c_beta = log_phi + log_pm1

    w_nodes = list(z.fixed_weights)
    if len(w_nodes) != data.n_covariates + 1:
        raise ShapeError(f"fixed_weights must have length {data.n_covariates + 1}")

    if data.group_count > 0:
        if b is None:
            b = reparam_random_effects(sigma_b, z.group_noise)
        b_nodes = list(b)
    else:
        b_nodes = []

    # window selection uses plain float values (non-differentiable choice)
    p_val = 1.0 + s.value
    phi_val = math.exp(log_phi.value)
    w_val = np.array([n.value for n in w_nodes])
    b_val = np.array([_value(n) for n in b_nodes]) if b_nodes else np.zeros(0)
    eta_val = linear_predictor(data, w_val, b_val)
    big = np.abs(eta_val) > ETA_OVERFLOW_LIMIT
    if big.any():
        i = int(np.argmax(big))
        raise FlaggedObservationError(i, float(eta_val[i]))
    y = data.responses
    pos = y > 0.0
    mu_val = np.exp(eta_val)
    lo = np.ones(data.n_obs, dtype=int)
    if t.adaptive and pos.any():
        lo[pos] = _window_starts(y[pos], mu_val[pos], p_val, phi_val, t.n_max, t.adaptive)

    na_cache: dict[int, tuple[TapeNode, TapeNode]] = {}

    def nalpha_terms(n: int) -> tuple[TapeNode, TapeNode]:
        cached = na_cache.get(n)
        if cached is None:
            na = alpha * float(n)
            cached = (na, ad.log_gamma(na))
            na_cache[n] = cached
        return cached

    contributions = []
    for i in range(data.n_obs):
        pairs = [(wn, x) for wn, x in zip(w_nodes[1:], data.fixed_design[i])]
        if b_nodes:
            pairs.append((b_nodes[data.group_index[i]], 1.0))
        eta_i = ad.dot(pairs, bias=w_nodes[0])
        log_lam_i = ad.dot([(two_m_p, eta_i)], bias=c_lam)
        lam_i = ad.exp(log_lam_i)
        if y[i] == 0.0:
            contributions.append(ad.neg(lam_i))
            continue
        log_y = math.log(y[i])
        log_beta_i = ad.dot([(s, eta_i)], bias=c_beta)
        lydiff_i = log_y - log_beta_i
        y_over_beta_i = float(y[i]) * ad.exp(ad.neg(log_beta_i))
        terms = []
        for n in range(lo[i], lo[i] + t.n_max):
            na, lg_na = nalpha_terms(n)
            terms.append(
                ad.dot(
                    [
                        (na, lydiff_i),
                        (lg_na, -1.0),
                        (log_lam_i, float(n)),
                        (y_over_beta_i, -1.0),
                        (lam_i, -1.0),
                    ],
                    bias=-log_y - math.lgamma(n + 1.0),
                )
            )
        contributions.append(ad.log_sum_exp(terms))

    total = ad.dot([(c, data_scale) for c in contributions])

    if b_nodes:
        g = data.group_count
        # log N(b_g; 0, sigma_b^2) summed over groups
        log_sigma_b = z.raw_log_sigma_b
        inv_two_var = 0.5 * ad.exp(-2.0 * log_sigma_b)
        bsq = ad.dot([(bn, bn) for bn in b_nodes])
        prior = ad.dot(
            [(log_sigma_b, -float(g)), (bsq, ad.neg(inv_two_var))],
            bias=-0.5 * LOG_2PI * g,
        )
        total = total + prior
    return total
