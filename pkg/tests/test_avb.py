"""Adversarial variational training: networks, losses, loop, prediction."""

import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from tweedie_avb.autodiff import ParamStore, Tape, backward, collect_gradient, finite_diff_check
from tweedie_avb.avb import (
    Discriminator,
    FitResult,
    GroupPosterior,
    HyperPrior,
    InferenceNet,
    MLP,
    TrainConfig,
    TrainingAbortError,
    build_trainer,
    discriminator_loss,
    generator_loss,
    posterior_predict,
    sample_posterior,
    sample_prior,
    split_raw_globals,
    train,
)
from tweedie_avb.data import SimTruth, simulate_dataset
from tweedie_avb.model import model_log_likelihood_value
from tweedie_avb.tweedie import TruncationConfig


def small_dataset(m=40, d=1, g=2, seed=0):
    truth = SimTruth(
        fixed_weights=np.array([0.1] + [0.3] * d),
        p_index=1.5, dispersion=1.0, sigma_b=0.4, n_obs=m, group_count=g,
    )
    data, _ = simulate_dataset(truth, np.random.default_rng(seed))
    return data


class TestMLP:
    def test_forward_paths_agree(self):
        store = ParamStore()
        net = MLP("m", [3, 5, 2], store, np.random.default_rng(0))
        x = np.array([0.3, -1.2, 0.7])
        want = net.forward_np(x)
        tape = Tape()
        got = [n.value for n in net.forward_tape(tape, [tape.leaf(v) for v in x])]
        assert_allclose(got, want, rtol=1e-12)

    def test_forward_tape_with_leaves(self):
        store = ParamStore()
        net = MLP("m", [2, 3, 1], store, np.random.default_rng(1))
        tape = Tape()
        leaves = store.leaves(tape)
        out = net.forward_tape(tape, [0.5, -0.5], leaves)[0]
        assert_allclose(out.value, net.forward_np(np.array([0.5, -0.5]))[0], rtol=1e-12)
        backward(out)
        assert np.abs(collect_gradient(leaves)).sum() > 0

    def test_batched_forward(self):
        store = ParamStore()
        net = MLP("m", [2, 4, 1], store, np.random.default_rng(2))
        batch = np.random.default_rng(3).standard_normal((6, 2))
        out = net.forward_np(batch)
        assert out.shape == (6, 1)
        for i in range(6):
            assert_allclose(out[i], net.forward_np(batch[i]), rtol=1e-12)


class TestSampling:
    def test_zero_network_maps_to_constraint_midpoints(self):
        store = ParamStore()
        q = InferenceNet(2, store, np.random.default_rng(0))
        store.values[:] = 0.0
        z = sample_posterior(q, np.random.default_rng(1), group_count=3)
        assert z.p_index == 1.5
        assert z.dispersion == 1.0
        assert z.sigma_b == 1.0
        assert len(z.fixed_weights) == 3
        assert z.group_noise.shape == (3,)

    def test_posterior_deterministic_given_seed(self):
        store = ParamStore()
        q = InferenceNet(1, store, np.random.default_rng(4))
        a = sample_posterior(q, np.random.default_rng(9), 2)
        b = sample_posterior(q, np.random.default_rng(9), 2)
        assert (np.asarray(a.fixed_weights) == np.asarray(b.fixed_weights)).all()
        assert (a.group_noise == b.group_noise).all()

    def test_output_dimension(self):
        store = ParamStore()
        q = InferenceNet(5, store, np.random.default_rng(0))
        assert q.out_dim == 5 + 4  # D weights + intercept + three raw globals

    def test_prior_location(self):
        store = ParamStore()
        h = HyperPrior(3, store)
        draws = h.sample_np(np.random.default_rng(0), count=100_000)
        se = 1.0 / math.sqrt(100_000)
        assert np.abs(draws.mean(axis=0)).max() < 3 * se

    def test_prior_reparam_gradient(self):
        store = ParamStore()
        h = HyperPrior(2, store)
        tape = Tape()
        leaves = store.leaves(tape)
        draw = h.sample_tape(tape, leaves, np.array([0.3, -0.8]))
        backward(draw[0])
        grads = collect_gradient(leaves)
        offset, _ = store.names["prior.loc"]
        assert grads[offset] == 1.0
        assert grads[offset + 1] == 0.0


class TestDiscriminatorLoss:
    def make_disc(self, dim=2, seed=0):
        store = ParamStore()
        return Discriminator(dim, store, np.random.default_rng(seed))

    def test_zero_critic_gives_two_log_two(self):
        disc = self.make_disc()
        disc.store.values[:] = 0.0
        batch = np.random.default_rng(1).standard_normal((5, 2))
        graph = discriminator_loss(disc, batch, batch + 1.0)
        assert_allclose(graph.loss.value, 2.0 * math.log(2.0), rtol=1e-12)

    def test_perfect_separation_near_zero_loss(self):
        store = ParamStore()
        disc = Discriminator(1, store, np.random.default_rng(0), hidden=())
        store.set("critic.W0", np.array([40.0]))
        store.set("critic.b0", np.array([0.0]))
        graph = discriminator_loss(disc, np.array([[0.5]]), np.array([[-0.5]]))
        assert graph.loss.value < 1e-8

    def test_swap_symmetry_with_negated_critic(self):
        store = ParamStore()
        disc = Discriminator(1, store, np.random.default_rng(2), hidden=())
        store.set("critic.W0", np.array([1.3]))
        store.set("critic.b0", np.array([0.2]))
        post = np.random.default_rng(3).standard_normal((6, 1))
        prior = np.random.default_rng(4).standard_normal((6, 1))
        direct = discriminator_loss(disc, post, prior).loss.value
        store.set("critic.W0", np.array([-1.3]))
        store.set("critic.b0", np.array([-0.2]))
        swapped = discriminator_loss(disc, prior, post).loss.value
        assert_allclose(direct, swapped, rtol=1e-12)

    def test_empty_batch_rejected(self):
        disc = self.make_disc()
        with pytest.raises(ValueError):
            discriminator_loss(disc, np.zeros((0, 2)), np.zeros((1, 2)))

    def test_gradient_vs_central_differences(self):
        store = ParamStore()
        disc = Discriminator(2, store, np.random.default_rng(5), hidden=(4,))
        post = np.random.default_rng(6).standard_normal((8, 2))
        prior = np.random.default_rng(7).standard_normal((8, 2))

        def f(p):
            saved = store.values.copy()
            store.values[:] = p.values
            graph = discriminator_loss(disc, post, prior)
            value = graph.loss.value
            grad = graph.gradient()
            store.values[:] = saved
            return value, grad

        assert finite_diff_check(f, store.copy(), h=1e-5) < 1e-4


class TestGeneratorLoss:
    def test_zero_critic_reduces_to_negative_log_likelihood(self):
        # M=1, y=0, no groups; inference net forced to a constant output
        # mapping to mu=1, p=1.5, phi=2 so that lam=1 and loss = 1.0
        from tweedie_avb.model import Dataset
        data = Dataset(responses=np.array([0.0]), fixed_design=np.zeros((1, 0)),
                       group_index=np.zeros(1, dtype=int), group_count=0)
        cfg = TrainConfig(outer_steps=1, seed=0)
        store = ParamStore()
        rng = np.random.default_rng(0)
        q = InferenceNet(0, store, rng, noise_dim=cfg.noise_dim,
                         hidden=cfg.inference_hidden)
        hyper = HyperPrior(4, store)
        store.values[:] = 0.0
        store.set("q.b1", np.array([0.0, 0.0, math.log(2.0), 0.0]))
        critic_store = ParamStore()
        disc = Discriminator(4, critic_store, rng)
        critic_store.values[:] = 0.0
        graph = generator_loss(data, q, disc, hyper, cfg, np.random.default_rng(1))
        assert_allclose(graph.loss.value, 1.0, rtol=1e-12)

    def test_gradient_vs_central_differences(self):
        data = small_dataset(m=5, d=2, g=2, seed=1)
        cfg = TrainConfig(outer_steps=1, seed=0, inference_hidden=(4,),
                          critic_hidden=(4,))
        rng = np.random.default_rng(2)
        trainer = build_trainer(data.n_covariates, data.group_count, cfg, rng)

        def f(p):
            saved = trainer.gen_store.values.copy()
            trainer.gen_store.values[:] = p.values
            graph = generator_loss(data, trainer.q, trainer.disc, trainer.hyper,
                                   cfg, np.random.default_rng(3),
                                   group_posterior=trainer.group_posterior)
            value = graph.loss.value
            grad = graph.gradient()
            trainer.gen_store.values[:] = saved
            return value, grad

        assert finite_diff_check(f, trainer.gen_store.copy(), h=1e-5) < 1e-4

    def test_critic_parameters_not_trained_by_generator(self):
        data = small_dataset(m=4, d=1, g=2, seed=2)
        cfg = TrainConfig(outer_steps=1, seed=0)
        trainer = build_trainer(1, 2, cfg, np.random.default_rng(0))
        graph = generator_loss(data, trainer.q, trainer.disc, trainer.hyper,
                               cfg, np.random.default_rng(1),
                               group_posterior=trainer.group_posterior)
        assert len(graph.leaves) == trainer.gen_store.size
        before = trainer.critic_store.values.copy()
        graph.gradient()
        assert (trainer.critic_store.values == before).all()


class TestGroupPosterior:
    def test_entropy_value(self):
        store = ParamStore()
        gp = GroupPosterior(2, store)
        store.set("b_post.log_scale", np.array([0.0, math.log(2.0)]))
        tape = Tape()
        leaves = store.leaves(tape)
        entropy = gp.entropy_tape(tape, leaves)
        want = 2 * 0.5 * (math.log(2 * math.pi) + 1.0) + math.log(2.0)
        assert_allclose(entropy.value, want, rtol=1e-12)

    def test_sample_paths_agree(self):
        store = ParamStore()
        gp = GroupPosterior(3, store)
        store.set("b_post.loc", np.array([0.1, -0.2, 0.3]))
        eps = np.array([0.5, -1.0, 2.0])
        tape = Tape()
        leaves = store.leaves(tape)
        nodes = gp.sample_tape(tape, leaves, eps)
        want = gp.loc + gp.scale * eps
        assert_allclose([n.value for n in nodes], want, rtol=1e-12)


class TestTrainLoop:
    CFG = dict(outer_steps=12, minibatch_size=16, critic_batch=8,
               latent_sample_count=20, inference_hidden=(8,), critic_hidden=(8,),
               eval_every=5, seed=0)

    def test_smoke_finite_traces(self):
        data = small_dataset(m=30)
        fit = train(data, TrainConfig(**self.CFG))
        assert np.isfinite(fit.critic_trace).all()
        assert np.isfinite(fit.generator_trace).all()
        assert fit.critic_trace.shape == (12,)

    def test_deterministic_given_seed(self):
        data = small_dataset(m=30)
        a = train(data, TrainConfig(**self.CFG))
        b = train(data, TrainConfig(**self.CFG))
        assert (a.critic_trace == b.critic_trace).all()
        assert (a.generator_trace == b.generator_trace).all()
        assert (a.draws["p_index"] == b.draws["p_index"]).all()

    def test_draw_constraints(self):
        data = small_dataset(m=30)
        fit = train(data, TrainConfig(**self.CFG))
        p = fit.draws["p_index"]
        assert ((p > 1.0) & (p < 2.0)).all()
        assert (fit.draws["sigma_b"] > 0).all()
        assert (fit.draws["dispersion"] > 0).all()

    def test_early_stopping_uses_validation(self):
        data = small_dataset(m=40)
        valid = small_dataset(m=12, seed=5)
        cfg = TrainConfig(**{**self.CFG, "outer_steps": 2000, "patience": 1,
                             "eval_every": 2})
        fit = train(data, cfg, valid=valid)
        assert fit.generator_trace.size < 2000

    def test_likelihood_ascends_with_frozen_critic(self):
        # with the critic at zero the generator step is maximum-likelihood
        # ascent; check the data log-likelihood trend over the run
        data = small_dataset(m=60, d=1, g=0, seed=3)
        cfg = TrainConfig(outer_steps=150, minibatch_size=60, critic_batch=4,
                          latent_sample_count=10, inference_hidden=(8,),
                          critic_hidden=(8,), critic_learning_rate=0.0, seed=1)
        fit = train(data, cfg)
        t = TruncationConfig()

        def mean_ll(fit_result):
            w = fit_result.draws["fixed_weights"].mean(axis=0)
            from tweedie_avb.model import LatentAssignment
            z = LatentAssignment(
                fixed_weights=w,
                raw_p=float(np.log((fit_result.draws["p_index"].mean() - 1.0)
                                   / (2.0 - fit_result.draws["p_index"].mean()))),
                raw_log_dispersion=float(np.log(fit_result.draws["dispersion"].mean())),
                raw_log_sigma_b=0.0,
                group_noise=np.zeros(0),
            )
            return model_log_likelihood_value(data, z, t)

        start = np.mean(fit.generator_trace[:20])
        end = np.mean(fit.generator_trace[-20:])
        assert end < start  # loss (negative log-likelihood) decreased


class TestFitResult:
    def make_fit(self):
        return FitResult(
            draws={
                "fixed_weights": np.zeros((3, 2)),
                "p_index": np.full(3, 1.5),
                "dispersion": np.ones(3),
                "sigma_b": np.full(3, 0.5),
                "b": np.zeros((3, 2)),
            },
            critic_trace=np.array([1.0, 0.9]),
            generator_trace=np.array([5.0, 4.0]),
            config={"outer_steps": 2},
            metadata={"n_covariates": 1, "group_count": 2},
            gen_params={},
            critic_params={},
        )

    def test_json_round_trip(self, tmp_path):
        fit = self.make_fit()
        path = tmp_path / "fit.json"
        fit.save(path)
        back = FitResult.load(path)
        assert (back.draws["p_index"] == fit.draws["p_index"]).all()
        assert back.metadata == fit.metadata
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        assert set(doc) == {"metadata", "config", "draws", "traces", "parameters"}

    def test_constraint_validation(self):
        with pytest.raises(ValueError):
            FitResult(
                draws={"p_index": np.array([2.5]), "sigma_b": np.array([1.0])},
                critic_trace=np.zeros(1), generator_trace=np.zeros(1),
                config={}, metadata={}, gen_params={}, critic_params={},
            )

    def test_abort_error_carries_checkpoint(self):
        fit = self.make_fit()
        err = TrainingAbortError(17, "non-finite loss", fit)
        assert err.step == 17
        assert err.checkpoint is fit


class TestPosteriorPredict:
    def make_fit(self, w, p=1.5, phi=1.0, sigma_b=0.5, b=None, g=1):
        w = np.atleast_2d(np.asarray(w, dtype=float))
        s = w.shape[0]
        return FitResult(
            draws={
                "fixed_weights": w,
                "p_index": np.full(s, p),
                "dispersion": np.full(s, phi),
                "sigma_b": np.full(s, sigma_b),
                "b": np.zeros((s, g)) if b is None else np.asarray(b, dtype=float),
            },
            critic_trace=np.zeros(1), generator_trace=np.zeros(1),
            config={}, metadata={"n_covariates": w.shape[1] - 1, "group_count": g},
            gen_params={}, critic_params={},
        )

    def test_single_draw_unit_mean(self):
        fit = self.make_fit([[0.0, 0.0]])
        out = posterior_predict(fit, np.array([[0.7]]), np.array([0]),
                                np.random.default_rng(0))
        assert_allclose(out["mean"], [1.0], rtol=1e-12)

    def test_two_draw_average(self):
        fit = self.make_fit([[0.0, 0.0], [math.log(3.0), 0.0]])
        out = posterior_predict(fit, np.array([[0.0]]), np.array([0]),
                                np.random.default_rng(0))
        assert_allclose(out["mean"], [2.0], rtol=1e-12)

    def test_unseen_group_uses_fresh_intercepts(self):
        fit = self.make_fit(np.zeros((200, 2)), sigma_b=0.5)
        out = posterior_predict(fit, np.zeros((1, 1)), np.array([-1]),
                                np.random.default_rng(1))
        # E[exp(sigma_b * eps)] = exp(sigma_b^2 / 2)
        assert abs(out["mean"][0] - math.exp(0.125)) < 0.05

    def test_quantiles_ordered(self):
        fit = self.make_fit(np.zeros((100, 2)))
        out = posterior_predict(fit, np.random.default_rng(2).standard_normal((5, 1)),
                                np.zeros(5, dtype=int), np.random.default_rng(3))
        assert (out["q05"] <= out["q50"]).all()
        assert (out["q50"] <= out["q95"]).all()

    def test_dimension_mismatch(self):
        fit = self.make_fit([[0.0, 0.0]])
        with pytest.raises(ValueError):
            posterior_predict(fit, np.zeros((1, 5)), np.array([0]),
                              np.random.default_rng(0))

    def test_predictive_mean_tracks_truth(self):
        truth = SimTruth(fixed_weights=np.array([0.1, 0.4]), p_index=1.5,
                         dispersion=1.0, sigma_b=0.0, n_obs=4000, group_count=0)
        data, _ = simulate_dataset(truth, np.random.default_rng(5))
        fit = self.make_fit([[0.1, 0.4]], sigma_b=1e-9, g=0)
        out = posterior_predict(fit, data.fixed_design,
                                np.zeros(data.n_obs, dtype=int),
                                np.random.default_rng(6))
        assert abs(out["mean"].mean() - data.responses.mean()) / data.responses.mean() < 0.05
