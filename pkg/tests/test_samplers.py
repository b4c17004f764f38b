import pytest
import numpy as np
from unittest.mock import patch
from numpy.testing import assert_allclose, assert_array_equal

from multimodal_gpc.config import PriorConfig, SamplerConfig
from multimodal_gpc.data import generate_synthetic, normalize_features
from multimodal_gpc.diagnostics import summarize
from multimodal_gpc.errors import ConfigError, FactorizationFailure, FixedPointNoConvergence
from multimodal_gpc.kernels import GramSet, build_gram_set
from multimodal_gpc.metrics import DenseMetric, IdentityMetric
from multimodal_gpc.model import ModelContext, grad_f, log_joint, metric_f, unwhiten
from multimodal_gpc import samplers
from multimodal_gpc.samplers import (generalized_leapfrog, gibbs_scan_AA, hmc_update, initial_state, leapfrog,
                                     metropolis_accept, mh_concentration_update, mh_dirichlet_update, mh_update,
                                     rmhmc_update_fixed_metric, rmhmc_update_position_metric, run_chain,
                                     run_chains)

from conftest import make_grams, make_labels

PRECISION = np.diag([1.0, 4.0])


def gaussian_logdens(x):
    return -0.5 * x @ PRECISION @ x


def gaussian_grad(x):
    return -PRECISION @ x


def exponential_metric(x):
    """One-dimensional metric G(x) = exp(x) with dG/dx = exp(x)."""
    g = np.exp(x[0])
    return DenseMetric(np.array([[g]]), np.array([[[g]]]))


class TestMetropolis:
    def test_draws_exactly_one_uniform(self):
        rng, reference = np.random.default_rng(1), np.random.default_rng(1)
        metropolis_accept(-np.inf, rng)
        reference.random()
        assert rng.random() == reference.random()

    def test_certain_outcomes(self, rng):
        assert metropolis_accept(0.0, rng)
        assert metropolis_accept(5.0, rng)
        assert not metropolis_accept(-np.inf, rng)


class TestIntegrators:
    def test_leapfrog_reversible(self, rng):
        x0, p0 = rng.standard_normal(2), rng.standard_normal(2)
        x1, p1 = leapfrog(x0, p0, gaussian_grad, IdentityMetric(2), 0.1, 20)
        x2, p2 = leapfrog(x1, -p1, gaussian_grad, IdentityMetric(2), 0.1, 20)
        assert_allclose(x2, x0, atol=1e-10)
        assert_allclose(-p2, p0, atol=1e-10)

    def test_generalized_leapfrog_reversible(self, small_ctx, rng):
        theta = rng.standard_normal((3, 2)) * 0.3
        f0 = rng.standard_normal(15)

        def grad(f):
            return grad_f(f, theta, small_ctx)

        def metric_fn(f):
            return metric_f(f, theta, small_ctx)

        p0 = metric_fn(f0).sample_momentum(rng)
        f1, p1, _ = generalized_leapfrog(f0, p0, grad, metric_fn, 0.1, 5, implicit_iters=100, implicit_tol=1e-13)
        f2, p2, _ = generalized_leapfrog(f1, -p1, grad, metric_fn, 0.1, 5, implicit_iters=100, implicit_tol=1e-13)
        assert_allclose(f2, f0, atol=1e-6)
        assert_allclose(-p2, p0, atol=1e-6)

    def test_constant_metric_matches_leapfrog(self, rng):
        M = DenseMetric(np.array([[2.0, 0.3], [0.3, 1.0]]))
        x0, p0 = rng.standard_normal(2), rng.standard_normal(2)
        x1, p1 = leapfrog(x0, p0, gaussian_grad, M, 0.2, 7)
        x2, p2, _ = generalized_leapfrog(x0, p0, gaussian_grad, lambda x: M, 0.2, 7)
        assert_allclose(x2, x1, rtol=1e-10, atol=1e-12)
        assert_allclose(p2, p1, rtol=1e-10, atol=1e-12)

    def test_energy_error_second_order(self, rng):
        starts = [(rng.standard_normal(2), rng.standard_normal(2)) for _ in range(200)]
        step_sizes = np.array([0.2, 0.1, 0.05])
        errors = []
        for eps in step_sizes:
            n_steps = int(round(2.0 / eps))
            total = 0.0
            for x0, p0 in starts:
                x1, p1 = leapfrog(x0, p0, gaussian_grad, IdentityMetric(2), eps, n_steps)
                h0 = -gaussian_logdens(x0) + 0.5 * p0 @ p0
                h1 = -gaussian_logdens(x1) + 0.5 * p1 @ p1
                total += abs(h1 - h0)
            errors.append(total / len(starts))
        slope = np.polyfit(np.log(step_sizes), np.log(errors), 1)[0]
        assert abs(slope - 2.0) < 0.3


class TestUpdates:
    def test_hmc_reproducible(self):
        a = hmc_update(np.ones(2), gaussian_logdens, gaussian_grad, 0.3, 10, np.random.default_rng(4))
        b = hmc_update(np.ones(2), gaussian_logdens, gaussian_grad, 0.3, 10, np.random.default_rng(4))
        assert_array_equal(a.state, b.state)
        assert a.accepted == b.accepted

    def test_identity_fixed_metric_is_hmc(self):
        a = hmc_update(np.ones(2), gaussian_logdens, gaussian_grad, 0.3, 10, np.random.default_rng(4))
        b = rmhmc_update_fixed_metric(np.ones(2), IdentityMetric(2), gaussian_logdens, gaussian_grad, 0.3, 10,
                                      np.random.default_rng(4))
        assert_allclose(b.state, a.state)
        assert a.accepted == b.accepted

    def test_hmc_standard_normal_moments(self, rng):
        x = np.zeros(1)
        draws = []
        for _ in range(5000):
            x = hmc_update(x, lambda v: -0.5 * v @ v, lambda v: -v, 0.3, 10, rng).state
            draws.append(x[0])
        assert abs(np.mean(draws)) < 0.1
        assert_allclose(np.var(draws), 1.0, atol=0.15)

    def test_flat_target_always_accepts(self, rng):
        x = np.zeros(3)
        for _ in range(50):
            transition = mh_update(x, 0.5, lambda v: 0.0, rng)
            assert transition.accepted
            x = transition.state
        assert not np.allclose(x, 0.0)

    def test_divergence_is_rejected(self, rng):
        x = np.ones(2)
        transition = hmc_update(x, lambda v: -0.5e12 * v @ v, lambda v: -1e12 * v, 1.0, 10, rng)
        assert transition.divergent
        assert not transition.accepted
        assert_array_equal(transition.state, x)

    def test_diverging_implicit_step_raises(self):
        with pytest.raises(FixedPointNoConvergence, match="diverged"):
            generalized_leapfrog(np.zeros(1), np.array([10.0]), lambda x: -x, exponential_metric, 10.0, 1,
                                 implicit_iters=50)

    def test_diverging_implicit_step_is_rejected(self, rng):
        x = np.zeros(1)
        for _ in range(20):
            transition = rmhmc_update_position_metric(x, lambda v: -0.5 * v @ v, lambda v: -v, exponential_metric,
                                                      10.0, 3, rng, implicit_iters=50)
            assert transition.fixed_point_failure
            assert not transition.accepted
            assert_array_equal(transition.state, x)

    def test_metric_error_is_rejected(self, rng):
        def failing_metric(x):
            if np.any(x != 0.0):
                raise ValueError("array must not contain infs or NaNs")
            return exponential_metric(x)

        transition = rmhmc_update_position_metric(np.zeros(1), lambda v: -0.5 * v @ v, lambda v: -v, failing_metric,
                                                  0.1, 3, rng)
        assert transition.fixed_point_failure
        assert not transition.accepted

    def test_preconditioned_correlated_gaussian(self, rng):
        covariance = np.array([[1.0, 0.95], [0.95, 1.0]])
        precision = np.linalg.inv(covariance)
        x = np.zeros(2)
        accepted = 0
        for _ in range(2000):
            transition = rmhmc_update_fixed_metric(x, DenseMetric(precision), lambda v: -0.5 * v @ precision @ v,
                                                   lambda v: -precision @ v, 0.5, 10, rng)
            accepted += transition.accepted
            x = transition.state
        assert accepted / 2000 > 0.95

    def test_uncorrected_dirichlet_proposals_are_biased(self):
        # Without the Hastings ratio the chain drifts to the corners of a uniform simplex
        corrected, uncorrected = [], []
        for correction, draws in ((True, corrected), (False, uncorrected)):
            rng = np.random.default_rng(6)
            w = np.array([0.2, 0.3, 0.5])
            for _ in range(5000):
                w = mh_dirichlet_update(w, lambda v: 0.0, 20.0, rng, proposal_correction=correction).state
                draws.append(w.max())
        # E[max] of a uniform point on the 3-simplex is 11/18
        assert_allclose(np.mean(corrected), 11.0 / 18.0, atol=0.05)
        assert np.mean(uncorrected) > 0.8

    def test_fixed_point_failure_is_rejected(self, small_ctx, rng):
        theta = np.zeros((3, 2))
        f = rng.standard_normal(15)
        transition = rmhmc_update_position_metric(
            f, lambda x: log_joint(x, theta, small_ctx), lambda x: grad_f(x, theta, small_ctx),
            lambda x: metric_f(x, theta, small_ctx), 0.5, 3, rng, implicit_iters=1, implicit_tol=1e-15)
        assert transition.fixed_point_failure
        assert not transition.accepted
        assert_array_equal(transition.state, f)

    def test_dirichlet_proposals_stay_on_simplex(self, rng):
        w = np.array([0.2, 0.3, 0.5])
        draws = []
        for _ in range(20000):
            transition = mh_dirichlet_update(w, lambda v: 0.0, 20.0, rng)
            w = transition.state
            draws.append(w)
        draws = np.asarray(draws)
        assert np.all(draws > 0)
        assert_allclose(draws.sum(axis=1), 1.0)
        # Uniform target on the simplex
        assert_allclose(draws.mean(axis=0), 1.0 / 3.0, atol=0.03)

    def test_concentration_update_targets_exponential(self, rng):
        alpha = 1.0
        draws = []
        for _ in range(20000):
            alpha = mh_concentration_update(alpha, 1.0, lambda a: -a + np.log(a), rng).state
            draws.append(alpha)
        assert_allclose(np.mean(draws), 1.0, atol=0.1)


class TestGibbs:
    def test_ancillary_scan_keeps_f_whitened(self, small_ctx, rng):
        config = SamplerConfig(scheme="e").validate()
        state = initial_state(small_ctx, config, rng)
        for _ in range(3):
            state, record = gibbs_scan_AA(state, small_ctx, config, rng)
            assert_allclose(state.f, unwhiten(state.nu, small_ctx.covariances(state.hyper.theta)), atol=1e-10)
        assert [name for name, _ in record.items()] == ["latent", "theta"]

    def test_dirichlet_prior_uses_simplex_moves(self, dirichlet_prior):
        config = SamplerConfig(scheme="e").check_prior(dirichlet_prior)
        assert config.hyper_sampler == "dirichlet_mh"
        with pytest.raises(ConfigError):
            SamplerConfig(scheme="a").check_prior(dirichlet_prior)

    def test_gradient_samplers_need_sufficient_augmentation(self, gamma_prior):
        with pytest.raises(ConfigError):
            SamplerConfig(latent_sampler="hmc", hyper_sampler="hmc", augmentation="AA", scheme=None) \
                .validate().check_prior(gamma_prior)


class TestRunChain:
    def test_kept_samples(self, small_ctx):
        config = SamplerConfig(scheme="e", n_iterations=30, burn_in=10, thin=4, n_chains=1).validate()
        trace = run_chain(small_ctx, config)
        assert trace.n_samples == config.n_kept == 5
        assert_array_equal(trace.iterations, [13, 17, 21, 25, 29])
        assert trace.theta.shape == (5, 3, 2)
        assert trace.f.shape == (5, 15)
        assert set(trace.accepted) == {"latent", "theta"}
        assert trace.proposed_counts["latent"] == 30

    def test_reproducible_per_chain(self, small_ctx):
        config = SamplerConfig(scheme="c", n_iterations=15, burn_in=5, n_chains=1).validate()
        a = run_chain(small_ctx, config, chain_id=1, seed_keys=(2,))
        b = run_chain(small_ctx, config, chain_id=1, seed_keys=(2,))
        c = run_chain(small_ctx, config, chain_id=0, seed_keys=(2,))
        assert_array_equal(a.theta, b.theta)
        assert_array_equal(a.f, b.f)
        assert not np.array_equal(a.f, c.f)
        assert a.seed_keys == (samplers.STREAM_CHAIN, 2, 1)

    def test_dirichlet_chain(self, dirichlet_ctx):
        config = SamplerConfig(scheme="e", n_iterations=20, burn_in=10, n_chains=1).check_prior(
            dirichlet_ctx.prior).validate()
        trace = run_chain(dirichlet_ctx, config)
        assert_allclose(trace.weights.sum(axis=2), 1.0)
        assert trace.alpha.shape == (10,)
        assert np.all(trace.alpha > 0)
        assert "alpha" in trace.accepted

    def test_fixed_weights(self, small_ctx):
        config = SamplerConfig(scheme="e", hyper_sampler="fixed", n_iterations=12, burn_in=2).validate()
        trace = run_chain(small_ctx, config, initial_theta=np.zeros((3, 2)))
        assert np.all(trace.theta == 0.0)
        assert set(trace.proposed_counts) == {"latent"}

    def test_failure_keeps_partial_trace(self, small_ctx):
        config = SamplerConfig(scheme="e", n_iterations=50, burn_in=10, n_chains=1).validate()
        real_scan = samplers.gibbs_scan
        calls = {"n": 0}

        def failing_scan(*args):
            calls["n"] += 1
            if calls["n"] > 30:
                raise FactorizationFailure("not positive definite", jitter=1.0)
            return real_scan(*args)

        with patch("multimodal_gpc.samplers.gibbs_scan", side_effect=failing_scan):
            trace = run_chain(small_ctx, config)
        assert trace.failed
        assert "not positive definite" in trace.error
        assert trace.n_samples == 20

    def test_run_chains_in_order(self, small_ctx):
        config = SamplerConfig(scheme="e", n_iterations=12, burn_in=2, n_chains=3).validate()
        traces = run_chains(small_ctx, config, seed_keys=(0,), jobs=1, progress=False)
        assert [trace.chain_id for trace in traces] == [0, 1, 2]
        assert len({trace.f[-1].tobytes() for trace in traces}) == 3

    @pytest.mark.parametrize("implicit_iters", [6, 50])
    def test_position_metric_weights_survive_large_steps(self, gamma_prior, implicit_iters):
        ctx = ModelContext(make_labels(6, 2), make_grams(6, 2), gamma_prior, use_likelihood=False)
        config = SamplerConfig(scheme="d", step_size_theta=0.5, implicit_iters=implicit_iters, n_iterations=60,
                               burn_in=10, n_chains=1, seed=2).validate()
        trace = run_chain(ctx, config)
        assert not trace.failed
        assert trace.n_samples == 50
        assert trace.proposed_counts["theta"] == 60
        assert np.all(np.isfinite(trace.theta))
        if implicit_iters == 6:
            assert trace.fixed_point_failures > 0

    def test_position_metric_weights_move(self, small_ctx):
        config = SamplerConfig(scheme="d", step_size_theta=0.05, n_iterations=40, burn_in=10, n_chains=1).validate()
        trace = run_chain(small_ctx, config)
        assert not trace.failed
        assert trace.accepted_counts["theta"] > 10

    def test_frozen_theta_metric(self, small_ctx):
        config = SamplerConfig(scheme="d", theta_metric="frozen", step_size_theta=0.1, n_iterations=40, burn_in=10,
                               n_chains=1).validate()
        trace = run_chain(small_ctx, config)
        assert not trace.failed
        assert trace.accepted_counts["theta"] > 0
        assert len({t.tobytes() for t in trace.theta}) > 1

    def test_chains_get_their_own_context(self, gamma_prior):
        # Indefinite by 1e-9, so every new factorization needs jitter
        grams = make_grams(6, 1)
        lowest = np.linalg.eigvalsh(grams.grams[0])[0]
        grams = GramSet(grams.grams - (lowest + 1e-9) * np.eye(6), grams.modality_ids)
        ctx = ModelContext(make_labels(6, 2), grams, gamma_prior)
        config = SamplerConfig(scheme="e", hyper_sampler="fixed", n_iterations=5, burn_in=1, n_chains=2).validate()
        traces = run_chains(ctx, config, initial_theta=np.zeros((2, 1)), jobs=1, progress=False)
        assert [trace.jitter_events for trace in traces] == [2, 2]
        assert ctx.jitter_events == 0


@pytest.mark.slow
class TestPriorRecovery:
    @pytest.mark.parametrize("scheme, step_size_theta, n_iterations", [
        ("a", 0.2, 8000),
        ("d", 0.05, 4000),
        ("e", 0.8, 6000),
    ])
    def test_gamma_weight_quartiles(self, gamma_prior, scheme, step_size_theta, n_iterations):
        ctx = ModelContext(make_labels(6, 2), make_grams(6, 2), gamma_prior, use_likelihood=False)
        config = SamplerConfig(scheme=scheme, n_iterations=n_iterations, burn_in=500, n_chains=4,
                               step_size_theta=step_size_theta, seed=3).validate()
        traces = run_chains(ctx, config, jobs=1, progress=False)
        assert not any(trace.failed for trace in traces)
        weights = np.concatenate([trace.weights.ravel() for trace in traces])
        assert_allclose(np.percentile(weights, [25, 50, 75]), [0.480, 0.839, 1.346], atol=0.05)


@pytest.mark.slow
class TestSchemeEfficiency:
    def test_ancillary_weights_mix_faster(self, gamma_prior):
        dataset = generate_synthetic(40, 3, 3, 5, seed=1)
        ctx = ModelContext(dataset.labels, build_gram_set([normalize_features(X) for X in dataset.modalities]),
                           gamma_prior)
        blocks = {}
        for scheme in ("a", "e"):
            config = SamplerConfig(scheme=scheme, n_iterations=2000, burn_in=1000, n_chains=4, seed=2).validate()
            blocks[scheme] = summarize(run_chains(ctx, config, jobs=1, progress=False)).block_summary()["theta"]
        assert blocks["e"]["rhat_max"] < 1.1
        assert blocks["e"]["rhat_max"] < blocks["a"]["rhat_max"]
        assert blocks["e"]["ess_percent_mean"] > 3.0 * blocks["a"]["ess_percent_mean"]
