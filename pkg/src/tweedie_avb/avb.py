"""Adversarial variational inference for the Tweedie mixed model.

Three small networks drive the fit: an inference network mapping noise
to the global latents, a discriminator (critic) estimating the log
density ratio between posterior and prior samples of those globals, and
a trainable Gaussian hyper prior.  Per-group random intercepts are
handled in closed form by a reparameterized Gaussian posterior, so the
adversarial ratio is only needed for the intractable globals.

Training alternates a fixed number of critic updates with one update of
the inference-side parameters, all via Adam on the scalar tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import (
    AdamState,
    ParamStore,
    Tape,
    TapeNode,
    adam_step,
    clip_global_norm,
    collect_gradient,
    slice_leaves,
)
from .model import Dataset, LatentAssignment, model_log_likelihood, model_log_likelihood_value
from .tweedie import TruncationConfig, tweedie_sample_array

LOG_2PI_E = math.log(2.0 * math.pi) + 1.0


class TrainingAbortError(RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step: int, message: str, checkpoint: Optional["FitResult"] = None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"training aborted at step {step}: {message}")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class MLP:
    """Feedforward net with tanh hidden layers and a linear output layer.

    Parameters live in a shared ParamStore under ``prefix.W{l}`` /
    ``prefix.b{l}`` so several components can be trained by one
    optimizer.
    """

    def __init__(self, prefix: str, sizes: Sequence[int], store: ParamStore,
                 rng: np.random.Generator, weight_scale: float = 1.0):
        self.prefix = prefix
        self.sizes = list(sizes)
        self.store = store
        for l in range(len(sizes) - 1):
            fan_in, fan_out = sizes[l], sizes[l + 1]
            w = rng.standard_normal((fan_out, fan_in)) * (weight_scale / math.sqrt(fan_in))
            store.register(f"{prefix}.W{l}", w.ravel())
            store.register(f"{prefix}.b{l}", np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def weight(self, layer: int) -> np.ndarray:
        fan_in, fan_out = self.sizes[layer], self.sizes[layer + 1]
        return self.store.get(f"{self.prefix}.W{layer}").reshape(fan_out, fan_in)

    def bias(self, layer: int) -> np.ndarray:
        return self.store.get(f"{self.prefix}.b{layer}")

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for l in range(self.n_layers):
            h = h @ self.weight(l).T + self.bias(l)
            if l < self.n_layers - 1:
                h = np.tanh(h)
        return h

    def forward_tape(self, tape: Tape, x: Sequence, leaves=None) -> list:
        """Build the forward graph for one input vector.

        ``x`` entries may be nodes or floats.  With ``leaves`` given
        (aligned with the store), weights are trainable nodes; without,
        current weight values enter as constants so gradients flow only
        to node-valued inputs.
        """
        h = list(x)
        for l in range(self.n_layers):
            fan_in, fan_out = self.sizes[l], self.sizes[l + 1]
            if leaves is not None:
                w_nodes = slice_leaves(leaves, self.store, f"{self.prefix}.W{l}")
                b_nodes = slice_leaves(leaves, self.store, f"{self.prefix}.b{l}")
                rows = [w_nodes[u * fan_in:(u + 1) * fan_in] for u in range(fan_out)]
                biases = b_nodes
            else:
                w = self.weight(l)
                rows = [list(w[u]) for u in range(fan_out)]
                biases = list(self.bias(l))
            out = [ad.affine(rows[u], h, biases[u]) for u in range(fan_out)]
            if l < self.n_layers - 1:
                out = [ad.tanh(u) for u in out]
            h = out
        return h


class InferenceNet:
    """Maps a noise vector to the raw global latents (w, raw_p, raw_log_phi, raw_log_sigma_b)."""

    def __init__(self, n_covariates: int, store: ParamStore, rng: np.random.Generator,
                 noise_dim: int = 8, hidden: Sequence[int] = (32,), prefix: str = "q"):
        self.n_covariates = n_covariates
        self.noise_dim = noise_dim
        self.out_dim = n_covariates + 4
        self.net = MLP(prefix, [noise_dim, *hidden, self.out_dim], store, rng, weight_scale=0.1)
        self.store = store

    def latents_np(self, eps: np.ndarray) -> np.ndarray:
        return self.net.forward_np(eps)

    def forward_tape(self, tape: Tape, leaves, eps: np.ndarray) -> list:
        return self.net.forward_tape(tape, [float(v) for v in eps], leaves)


class Discriminator:
    """Critic mapping a raw global-latent vector to a scalar logit."""

    def __init__(self, latent_dim: int, store: ParamStore, rng: np.random.Generator,
                 hidden: Sequence[int] = (32, 32), prefix: str = "critic"):
        self.latent_dim = latent_dim
        self.net = MLP(prefix, [latent_dim, *hidden, 1], store, rng)
        self.store = store

    def logit_np(self, z: np.ndarray) -> np.ndarray:
        out = self.net.forward_np(z)
        return out[..., 0]

    def logit_tape(self, tape: Tape, z: Sequence, leaves=None) -> TapeNode:
        return self.net.forward_tape(tape, z, leaves)[0]


class HyperPrior:
    """Trainable Gaussian prior over the raw global latents."""

    def __init__(self, dim: int, store: ParamStore, prefix: str = "prior"):
        self.dim = dim
        self.store = store
        self.prefix = prefix
        store.register(f"{prefix}.loc", np.zeros(dim))
        store.register(f"{prefix}.log_scale", np.zeros(dim))

    @property
    def loc(self) -> np.ndarray:
        return self.store.get(f"{self.prefix}.loc")

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.store.get(f"{self.prefix}.log_scale"))

    def sample_np(self, rng: np.random.Generator, count: Optional[int] = None) -> np.ndarray:
        shape = (self.dim,) if count is None else (count, self.dim)
        return self.loc + self.scale * rng.standard_normal(shape)

    def sample_tape(self, tape: Tape, leaves, eps: np.ndarray) -> list:
        loc = slice_leaves(leaves, self.store, f"{self.prefix}.loc")
        log_scale = slice_leaves(leaves, self.store, f"{self.prefix}.log_scale")
        return [loc[i] + ad.exp(log_scale[i]) * float(eps[i]) for i in range(self.dim)]

    def log_density_np(self, z: np.ndarray) -> float:
        scale = self.scale
        resid = (np.asarray(z, dtype=float) - self.loc) / scale
        return float(np.sum(-0.5 * math.log(2.0 * math.pi) - np.log(scale) - 0.5 * resid ** 2))


class GroupPosterior:
    """Reparameterized Gaussian posterior over the per-group intercepts.

    The spec's fresh-noise reparameterization b = sigma_b * eps cannot
    adapt to the data (its mean is zero by construction), which provably
    collapses the random-effect scale during training.  A per-group
    location/scale pair keeps the random-effect treatment tractable and
    in closed form while letting the intercepts be inferred; its entropy
    enters the generator objective so the scale stays well defined.
    """

    def __init__(self, group_count: int, store: ParamStore, prefix: str = "b_post"):
        self.group_count = group_count
        self.store = store
        self.prefix = prefix
        store.register(f"{prefix}.loc", np.zeros(group_count))
        store.register(f"{prefix}.log_scale", np.full(group_count, math.log(0.3)))

    @property
    def loc(self) -> np.ndarray:
        return self.store.get(f"{self.prefix}.loc")

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.store.get(f"{self.prefix}.log_scale"))

    def sample_np(self, rng: np.random.Generator) -> np.ndarray:
        return self.loc + self.scale * rng.standard_normal(self.group_count)

    def sample_tape(self, tape: Tape, leaves, eps: np.ndarray) -> list:
        loc = slice_leaves(leaves, self.store, f"{self.prefix}.loc")
        log_scale = slice_leaves(leaves, self.store, f"{self.prefix}.log_scale")
        return [loc[g] + ad.exp(log_scale[g]) * float(eps[g]) for g in range(self.group_count)]

    def entropy_tape(self, tape: Tape, leaves) -> TapeNode:
        log_scale = slice_leaves(leaves, self.store, f"{self.prefix}.log_scale")
        return ad.dot([(s, 1.0) for s in log_scale], bias=0.5 * LOG_2PI_E * self.group_count)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Knobs for the alternating minimax loop.

    The paper-level quantities are ``n_critic`` (critic updates per
    outer step) and the truncation of the latent-count sum; everything
    else (architectures, optimizer settings, batch sizes) is an
    artifact-level choice and overridable.
    """

    n_critic: int = 3
    minibatch_size: int = 256
    outer_steps: int = 5000
    truncation: TruncationConfig = field(default_factory=TruncationConfig)
    seed: int = 0
    latent_sample_count: int = 1000

    noise_dim: int = 8
    inference_hidden: tuple = (32,)
    critic_hidden: tuple = (32, 32)
    critic_batch: int = 64

    generator_learning_rate: float = 1e-3
    critic_learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip_norm: float = 10.0

    eval_every: int = 50
    patience: int = 10
    valid_draws: int = 4

    def __post_init__(self):
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.outer_steps < 1:
            raise ValueError(f"outer_steps must be >= 1, got {self.outer_steps}")
        if isinstance(self.truncation, dict):
            self.truncation = TruncationConfig(**self.truncation)
        if isinstance(self.inference_hidden, list):
            self.inference_hidden = tuple(self.inference_hidden)
        if isinstance(self.critic_hidden, list):
            self.critic_hidden = tuple(self.critic_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["truncation"] = {"n_max": self.truncation.n_max, "adaptive": self.truncation.adaptive}
        d["inference_hidden"] = list(self.inference_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class FitResult:
    """Posterior draws, loss traces, and the final network parameters."""

    draws: dict
    critic_trace: np.ndarray
    generator_trace: np.ndarray
    config: dict
    metadata: dict
    gen_params: dict
    critic_params: dict

    def __post_init__(self):
        p = np.asarray(self.draws["p_index"])
        if ((p <= 1.0) | (p >= 2.0)).any():
            raise ValueError("stored p_index draws must lie in (1, 2)")
        if (np.asarray(self.draws["sigma_b"]) <= 0).any():
            raise ValueError("stored sigma_b draws must be positive")

    def to_json_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "config": self.config,
            "draws": {k: np.asarray(v).tolist() for k, v in self.draws.items()},
            "traces": {
                "critic_loss": np.asarray(self.critic_trace).tolist(),
                "generator_loss": np.asarray(self.generator_trace).tolist(),
            },
            "parameters": {"generator": self.gen_params, "critic": self.critic_params},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FitResult":
        return cls(
            draws={k: np.asarray(v) for k, v in d["draws"].items()},
            critic_trace=np.asarray(d["traces"]["critic_loss"]),
            generator_trace=np.asarray(d["traces"]["generator_loss"]),
            config=d["config"],
            metadata=d["metadata"],
            gen_params=d.get("parameters", {}).get("generator", {}),
            critic_params=d.get("parameters", {}).get("critic", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path) -> "FitResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class LossGraph:
    """A built loss with the leaves of the store being trained."""

    tape: Tape
    loss: TapeNode
    leaves: list

    def gradient(self) -> np.ndarray:
        ad.backward(self.loss)
        return collect_gradient(self.leaves)


# ---------------------------------------------------------------------------
# Sampling operations
# ---------------------------------------------------------------------------

def split_raw_globals(raw: np.ndarray, n_covariates: int):
    """(fixed_weights, raw_p, raw_log_dispersion, raw_log_sigma_b)."""
    d1 = n_covariates + 1
    return raw[:d1], raw[d1], raw[d1 + 1], raw[d1 + 2]


def sample_posterior(q: InferenceNet, rng: np.random.Generator,
                     group_count: int = 0) -> LatentAssignment:
    """One posterior draw: globals from the inference net, fresh group noise."""
    raw = q.latents_np(rng.standard_normal(q.noise_dim))
    w, raw_p, raw_ld, raw_ls = split_raw_globals(raw, q.n_covariates)
    return LatentAssignment(
        fixed_weights=np.asarray(w, dtype=float),
        raw_p=float(raw_p),
        raw_log_dispersion=float(raw_ld),
        raw_log_sigma_b=float(raw_ls),
        group_noise=rng.standard_normal(group_count),
    )


def sample_prior(h: HyperPrior, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw from the hyper prior over the raw globals."""
    return h.sample_np(rng)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def discriminator_loss(disc: Discriminator, posterior_batch: np.ndarray,
                       prior_batch: np.ndarray) -> LossGraph:
    """Logistic density-ratio loss; gradients reach only critic parameters.

    mean[-log sigmoid(T(z_Q))] + mean[-log(1 - sigmoid(T(z_P)))], with
    the latent batches entering as constants.
    """
    posterior_batch = np.atleast_2d(np.asarray(posterior_batch, dtype=float))
    prior_batch = np.atleast_2d(np.asarray(prior_batch, dtype=float))
    if posterior_batch.shape[0] == 0 or prior_batch.shape[0] == 0:
        raise ValueError("batches must be non-empty")
    tape = Tape()
    leaves = disc.store.leaves(tape)
    terms = []
    for z in posterior_batch:
        t = disc.logit_tape(tape, list(z), leaves)
        terms.append((ad.softplus(ad.neg(t)), 1.0 / posterior_batch.shape[0]))
    for z in prior_batch:
        t = disc.logit_tape(tape, list(z), leaves)
        terms.append((ad.softplus(t), 1.0 / prior_batch.shape[0]))
    loss = ad.dot(terms)
    return LossGraph(tape, loss, leaves)


def generator_loss(batch: Dataset, q: InferenceNet, disc: Discriminator,
                   h: HyperPrior, cfg: TrainConfig, rng: np.random.Generator,
                   group_posterior: Optional[GroupPosterior] = None,
                   data_scale: float = 1.0, n_draws: int = 1) -> LossGraph:
    """Critic-estimated negative ELBO; gradients reach the inference side.

    mean over latent draws of [T(z_Q) - model log likelihood], with the
    critic's parameters entering as constants.  The intercept
    posterior's entropy is added when one is supplied so the
    random-effect scale stays identified.
    """
    tape = Tape()
    leaves = q.store.leaves(tape)
    draw_terms = []
    for _ in range(n_draws):
        eps = rng.standard_normal(q.noise_dim)
        raw_nodes = q.forward_tape(tape, leaves, eps)
        d1 = q.n_covariates + 1
        z = LatentAssignment(
            fixed_weights=raw_nodes[:d1],
            raw_p=raw_nodes[d1],
            raw_log_dispersion=raw_nodes[d1 + 1],
            raw_log_sigma_b=raw_nodes[d1 + 2],
            group_noise=rng.standard_normal(batch.group_count),
        )
        t_node = disc.logit_tape(tape, raw_nodes, leaves=None)
        b_nodes = None
        if group_posterior is not None and batch.group_count > 0:
            b_nodes = group_posterior.sample_tape(tape, leaves, z.group_noise)
        mll = model_log_likelihood(tape, batch, z, cfg.truncation, b=b_nodes,
                                   data_scale=data_scale)
        term = t_node - mll
        if b_nodes is not None:
            term = term - group_posterior.entropy_tape(tape, leaves)
        draw_terms.append((term, 1.0 / n_draws))
    loss = ad.dot(draw_terms)
    return LossGraph(tape, loss, leaves)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class _Trainer:
    """Bundles the stores and nets built by :func:`train` (also reused for tests)."""

    q: InferenceNet
    disc: Discriminator
    hyper: HyperPrior
    group_posterior: Optional[GroupPosterior]
    gen_store: ParamStore
    critic_store: ParamStore


def build_trainer(n_covariates: int, group_count: int, cfg: TrainConfig,
                  rng: np.random.Generator) -> _Trainer:
    gen_store = ParamStore()
    q = InferenceNet(n_covariates, gen_store, rng, noise_dim=cfg.noise_dim,
                     hidden=cfg.inference_hidden)
    hyper = HyperPrior(n_covariates + 4, gen_store)
    gp = GroupPosterior(group_count, gen_store) if group_count > 0 else None
    critic_store = ParamStore()
    disc = Discriminator(n_covariates + 4, critic_store, rng, hidden=cfg.critic_hidden)
    return _Trainer(q, disc, hyper, gp, gen_store, critic_store)


def _validation_nll(trainer: _Trainer, valid: Dataset, cfg: TrainConfig,
                    rng: np.random.Generator) -> float:
    total = 0.0
    for _ in range(cfg.valid_draws):
        z = sample_posterior(trainer.q, rng, valid.group_count)
        b = trainer.group_posterior.loc if trainer.group_posterior is not None else None
        total += -model_log_likelihood_value(valid, z, cfg.truncation, b=b)
    return total / cfg.valid_draws


def _collect_draws(trainer: _Trainer, count: int, rng: np.random.Generator) -> dict:
    d1 = trainer.q.n_covariates + 1
    w = np.empty((count, d1))
    p = np.empty(count)
    phi = np.empty(count)
    sigma_b = np.empty(count)
    g = trainer.group_posterior.group_count if trainer.group_posterior is not None else 0
    b = np.empty((count, g))
    for s in range(count):
        raw = trainer.q.latents_np(rng.standard_normal(trainer.q.noise_dim))
        wv, raw_p, raw_ld, raw_ls = split_raw_globals(raw, trainer.q.n_covariates)
        w[s] = wv
        p[s] = 1.0 + expit(raw_p)
        phi[s] = math.exp(raw_ld)
        sigma_b[s] = math.exp(raw_ls)
        if g:
            b[s] = trainer.group_posterior.sample_np(rng)
    return {"fixed_weights": w, "p_index": p, "dispersion": phi, "sigma_b": sigma_b, "b": b}


def train(data: Dataset, cfg: TrainConfig, valid: Optional[Dataset] = None) -> FitResult:
    """Run the alternating minimax loop and collect posterior draws.

    Each outer step performs exactly ``n_critic`` critic Adam updates on
    the density-ratio loss, then one Adam update of the inference-side
    parameters on the critic-estimated negative ELBO.  Deterministic
    given the seed.  A non-finite loss aborts with the last good
    parameter checkpoint attached.
    """
    if data.n_obs == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    trainer = build_trainer(data.n_covariates, data.group_count, cfg, rng)
    adam_gen = AdamState.for_store(trainer.gen_store, cfg.generator_learning_rate,
                                   cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    adam_critic = AdamState.for_store(trainer.critic_store, cfg.critic_learning_rate,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)

    critic_trace = []
    gen_trace = []
    m = data.n_obs
    batch_size = min(cfg.minibatch_size, m)
    best_nll = math.inf
    best_params = None
    stale_evals = 0
    last_good = (trainer.gen_store.copy(), trainer.critic_store.copy())

    def _abort(step: int, message: str):
        gen_snap, critic_snap = last_good
        checkpoint = _finalize(trainer, cfg, data, critic_trace, gen_trace,
                               gen_snap, critic_snap, rng)
        raise TrainingAbortError(step, message, checkpoint)

    for step in range(cfg.outer_steps):
        last_good = (trainer.gen_store.copy(), trainer.critic_store.copy())
        critic_loss = math.nan
        for _ in range(cfg.n_critic):
            post = np.stack([
                trainer.q.latents_np(rng.standard_normal(cfg.noise_dim))
                for _ in range(cfg.critic_batch)
            ])
            prior = trainer.hyper.sample_np(rng, cfg.critic_batch)
            graph = discriminator_loss(trainer.disc, post, prior)
            critic_loss = graph.loss.value
            if not math.isfinite(critic_loss):
                _abort(step, f"non-finite critic loss {critic_loss!r}")
            grad = clip_global_norm(graph.gradient(), cfg.grad_clip_norm)
            adam_step(trainer.critic_store, grad, adam_critic)
        rows = rng.choice(m, size=batch_size, replace=False)
        minibatch = data.subset(np.sort(rows))
        graph = generator_loss(minibatch, trainer.q, trainer.disc, trainer.hyper,
                               cfg, rng, group_posterior=trainer.group_posterior,
                               data_scale=m / batch_size)
        gen_loss = graph.loss.value
        if not math.isfinite(gen_loss):
            _abort(step, f"non-finite generator loss {gen_loss!r}")
        grad = clip_global_norm(graph.gradient(), cfg.grad_clip_norm)
        adam_step(trainer.gen_store, grad, adam_gen)
        critic_trace.append(critic_loss)
        gen_trace.append(gen_loss)

        if valid is not None and (step + 1) % cfg.eval_every == 0:
            nll = _validation_nll(trainer, valid, cfg, rng)
            if nll < best_nll - 1e-9:
                best_nll = nll
                best_params = trainer.gen_store.copy()
                stale_evals = 0
            else:
                stale_evals += 1
                if stale_evals >= cfg.patience:
                    break

    if best_params is not None:
        trainer.gen_store.values[:] = best_params.values
    return _finalize(trainer, cfg, data, critic_trace, gen_trace,
                     trainer.gen_store, trainer.critic_store, rng)


def _finalize(trainer: _Trainer, cfg: TrainConfig, data: Dataset,
              critic_trace, gen_trace, gen_store: ParamStore,
              critic_store: ParamStore, rng: np.random.Generator) -> FitResult:
    trainer.gen_store.values[:] = gen_store.values
    trainer.critic_store.values[:] = critic_store.values
    draws = _collect_draws(trainer, cfg.latent_sample_count, rng)
    return FitResult(
        draws=draws,
        critic_trace=np.asarray(critic_trace, dtype=float),
        generator_trace=np.asarray(gen_trace, dtype=float),
        config=cfg.to_dict(),
        metadata={
            "n_covariates": data.n_covariates,
            "group_count": data.group_count,
            "n_obs": data.n_obs,
            "column_names": list(data.column_names),
        },
        gen_params={k: gen_store.get(k).tolist() for k in gen_store.names},
        critic_params={k: critic_store.get(k).tolist() for k in critic_store.names},
    )


# ---------------------------------------------------------------------------
# Posterior prediction
# ---------------------------------------------------------------------------

def posterior_predict(fit: FitResult, fixed_design: np.ndarray,
                      group_ids: np.ndarray, rng: np.random.Generator,
                      latent_sample_count: Optional[int] = None,
                      quantiles: Sequence[float] = (0.05, 0.5, 0.95)) -> dict:
    """Per-row predictive mean and response quantiles.

    Group ids outside [0, group_count) are treated as unseen groups and
    integrated over fresh sigma_b-scaled intercepts per draw.
    """
    fixed_design = np.atleast_2d(np.asarray(fixed_design, dtype=float))
    group_ids = np.asarray(group_ids, dtype=int)
    d = fit.metadata["n_covariates"]
    g = fit.metadata["group_count"]
    if fixed_design.shape[1] != d:
        raise ValueError(
            f"covariate dimension mismatch: expected {d}, got {fixed_design.shape[1]}"
        )
    if group_ids.shape[0] != fixed_design.shape[0]:
        raise ValueError("group id count must match the number of rows")
    w = np.asarray(fit.draws["fixed_weights"], dtype=float)
    p = np.asarray(fit.draws["p_index"], dtype=float)
    phi = np.asarray(fit.draws["dispersion"], dtype=float)
    sigma_b = np.asarray(fit.draws["sigma_b"], dtype=float)
    b = np.asarray(fit.draws["b"], dtype=float)
    n_draws = w.shape[0]
    if latent_sample_count is not None:
        n_draws = min(n_draws, latent_sample_count)
    n_rows = fixed_design.shape[0]
    seen = (group_ids >= 0) & (group_ids < g)
    mu = np.empty((n_draws, n_rows))
    samples = np.empty((n_draws, n_rows))
    for s in range(n_draws):
        eta = w[s, 0] + fixed_design @ w[s, 1:]
        if g and seen.any():
            eta[seen] = eta[seen] + b[s, group_ids[seen]]
        if (~seen).any():
            eta[~seen] = eta[~seen] + sigma_b[s] * rng.standard_normal((~seen).sum())
        eta = np.clip(eta, -30.0, 30.0)
        mu[s] = np.exp(eta)
        lam = mu[s] ** (2.0 - p[s]) / (phi[s] * (2.0 - p[s]))
        alpha = (2.0 - p[s]) / (p[s] - 1.0)
        beta = phi[s] * (p[s] - 1.0) * mu[s] ** (p[s] - 1.0)
        samples[s] = tweedie_sample_array(lam, alpha, beta, rng)
    out = {"mean": mu.mean(axis=0)}
    qs = np.quantile(samples, quantiles, axis=0)
    for level, row in zip(quantiles, qs):
        out[f"q{int(round(level * 100)):02d}"] = row
    return out
