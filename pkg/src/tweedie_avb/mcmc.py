"""Blockwise random-walk Metropolis over the same posterior as the
variational fit, for desk-scale validation.

Blocks: fixed-effect weights, the unconstrained index parameter, log
dispersion, log random-effect scale, and the per-group intercepts.
Proposals are Gaussian per block with step sizes auto-tuned during
burn-in toward a target acceptance rate.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .model import Dataset, LatentAssignment, model_log_likelihood_value
from .tweedie import LOG_2PI, TruncationConfig

BLOCK_ORDER = ("w", "raw_p", "raw_log_dispersion", "raw_log_sigma_b", "b")


class ChainConfigError(ValueError):
    """Chain settings violate their invariants."""


def _default_step_sizes() -> dict:
    return {
        "w": 0.05,
        "raw_p": 0.2,
        "raw_log_dispersion": 0.2,
        "raw_log_sigma_b": 0.5,
        "b": 0.1,
    }


@dataclass
class ChainConfig:
    """Random-walk Metropolis settings."""

    step_sizes: dict = field(default_factory=_default_step_sizes)
    iterations: int = 20000
    burn_in: int = 5000
    thinning: int = 10
    seed: int = 0
    tune: bool = True
    tune_interval: int = 100
    target_acceptance: float = 0.25

    def __post_init__(self):
        if self.burn_in >= self.iterations:
            raise ChainConfigError(
                f"burn_in ({self.burn_in}) must be < iterations ({self.iterations})"
            )
        if self.thinning < 1:
            raise ChainConfigError("thinning must be >= 1")
        for name, step in self.step_sizes.items():
            if step <= 0:
                raise ChainConfigError(f"step size for block {name!r} must be > 0")

    def to_dict(self) -> dict:
        return {
            "step_sizes": dict(self.step_sizes),
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "thinning": self.thinning,
            "seed": self.seed,
            "tune": self.tune,
            "tune_interval": self.tune_interval,
            "target_acceptance": self.target_acceptance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainConfig":
        return cls(**d)


@dataclass
class ChainResult:
    """Retained draws per block plus per-block acceptance rates."""

    draws: dict
    acceptance: dict

    def __post_init__(self):
        for name, rate in self.acceptance.items():
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"acceptance rate for {name!r} outside [0, 1]: {rate}")

    @property
    def retained(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    def to_json_dict(self) -> dict:
        """Same draws schema as the variational FitResult JSON."""
        w = np.asarray(self.draws["w"])
        p = 1.0 + expit(np.asarray(self.draws["raw_p"]))
        phi = np.exp(np.asarray(self.draws["raw_log_dispersion"]))
        sigma_b = np.exp(np.asarray(self.draws["raw_log_sigma_b"]))
        return {
            "metadata": {"sampler": "random-walk metropolis"},
            "draws": {
                "fixed_weights": w.tolist(),
                "p_index": p.tolist(),
                "dispersion": phi.tolist(),
                "sigma_b": sigma_b.tolist(),
                "b": np.asarray(self.draws["b"]).tolist(),
            },
            "acceptance": {k: float(v) for k, v in self.acceptance.items()},
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def log_unnormalized_posterior(data: Dataset, z: LatentAssignment,
                               prior_loc: np.ndarray, prior_scale: np.ndarray,
                               t: TruncationConfig, b=None) -> float:
    """Model log likelihood plus a fixed Gaussian prior on the raw globals.

    Shares the likelihood code path with the variational fit; the prior
    snapshot (location/scale per raw global coordinate) is frozen.
    """
    raw = np.concatenate([
        np.asarray(z.fixed_weights, dtype=float),
        [float(z.raw_p), float(z.raw_log_dispersion), float(z.raw_log_sigma_b)],
    ])
    resid = (raw - prior_loc) / prior_scale
    prior = float(np.sum(-0.5 * LOG_2PI - np.log(prior_scale) - 0.5 * resid ** 2))
    return model_log_likelihood_value(data, z, t, b=b) + prior


def _b_prior_only(raw_log_sigma_b: float, b: np.ndarray) -> float:
    sigma = math.exp(raw_log_sigma_b)
    return float(np.sum(-0.5 * LOG_2PI - math.log(sigma) - b * b / (2.0 * sigma ** 2)))


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

def run_chain_generic(log_target: Callable[[dict], float], init: dict,
                      cfg: ChainConfig) -> ChainResult:
    """Blockwise Gaussian-proposal Metropolis over a dict-valued state.

    Deterministic given the seed.  Acceptance uses the detailed-balance
    rule min(1, exp(delta log target)).  During burn-in, step sizes are
    re-scaled every ``tune_interval`` iterations toward the target
    acceptance rate.
    """
    rng = np.random.default_rng(cfg.seed)
    state = {k: np.atleast_1d(np.asarray(v, dtype=float)).copy() for k, v in init.items()}
    blocks = [k for k in BLOCK_ORDER if k in state] + [k for k in state if k not in BLOCK_ORDER]
    steps = {k: float(cfg.step_sizes.get(k, 0.1)) for k in blocks}
    current_lp = log_target(state)
    if not math.isfinite(current_lp):
        raise ValueError("log target is non-finite at the initial state")

    accepted = {k: 0 for k in blocks}
    proposed = {k: 0 for k in blocks}
    tune_accepted = {k: 0 for k in blocks}
    tune_proposed = {k: 0 for k in blocks}
    kept: dict[str, list] = {k: [] for k in blocks}

    for it in range(cfg.iterations):
        in_burn = it < cfg.burn_in
        for name in blocks:
            proposal = state[name] + steps[name] * rng.standard_normal(state[name].shape)
            old = state[name]
            state[name] = proposal
            lp = log_target(state)
            accept = math.isfinite(lp) and math.log(rng.random()) < lp - current_lp
            if accept:
                current_lp = lp
            else:
                state[name] = old
            if in_burn:
                tune_proposed[name] += 1
                tune_accepted[name] += int(accept)
            else:
                proposed[name] += 1
                accepted[name] += int(accept)
        if cfg.tune and in_burn and (it + 1) % cfg.tune_interval == 0:
            for name in blocks:
                if tune_proposed[name]:
                    rate = tune_accepted[name] / tune_proposed[name]
                    steps[name] *= math.exp(rate - cfg.target_acceptance)
                tune_accepted[name] = 0
                tune_proposed[name] = 0
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
            for name in blocks:
                kept[name].append(state[name].copy())

    acceptance = {
        k: (accepted[k] / proposed[k]) if proposed[k] else 0.0 for k in blocks
    }
    for name, rate in acceptance.items():
        if rate < 0.01:
            warnings.warn(
                f"block {name!r} accepted {rate:.3%} of proposals; "
                f"reduce its step size (current {steps[name]:.3g})",
                RuntimeWarning,
            )
    draws = {k: np.asarray(v) for k, v in kept.items()}
    return ChainResult(draws=draws, acceptance=acceptance)


def run_chain(data: Dataset, cfg: ChainConfig,
              t: Optional[TruncationConfig] = None,
              prior_loc: Optional[np.ndarray] = None,
              prior_scale: Optional[np.ndarray] = None,
              include_likelihood: bool = True) -> ChainResult:
    """Sample the Tweedie mixed-model posterior for a dataset.

    With ``include_likelihood=False`` the chain targets the prior alone
    (global Gaussian prior plus the sigma_b-scaled intercept prior),
    which is the stationarity smoke test.
    """
    t = t or TruncationConfig()
    d1 = data.n_covariates + 1
    dim = d1 + 3
    prior_loc = np.zeros(dim) if prior_loc is None else np.asarray(prior_loc, dtype=float)
    prior_scale = np.ones(dim) if prior_scale is None else np.asarray(prior_scale, dtype=float)
    g = data.group_count

    def log_target(state: dict) -> float:
        raw = np.concatenate([state["w"], state["raw_p"], state["raw_log_dispersion"],
                              state["raw_log_sigma_b"]])
        resid = (raw - prior_loc) / prior_scale
        lp = float(np.sum(-0.5 * LOG_2PI - np.log(prior_scale) - 0.5 * resid ** 2))
        b = state.get("b", np.zeros(0))
        if include_likelihood:
            z = LatentAssignment(
                fixed_weights=state["w"],
                raw_p=float(state["raw_p"][0]),
                raw_log_dispersion=float(state["raw_log_dispersion"][0]),
                raw_log_sigma_b=float(state["raw_log_sigma_b"][0]),
                group_noise=np.zeros(g),
            )
            try:
                return lp + model_log_likelihood_value(data, z, t, b=b)
            except (OverflowError, FloatingPointError, ValueError):
                return -math.inf
        if g:
            lp += _b_prior_only(float(state["raw_log_sigma_b"][0]), b)
        return lp

    init = {
        "w": np.zeros(d1),
        "raw_p": np.zeros(1),
        "raw_log_dispersion": np.zeros(1),
        "raw_log_sigma_b": np.zeros(1),
    }
    if g:
        init["b"] = np.zeros(g)
    return run_chain_generic(log_target, init, cfg)
