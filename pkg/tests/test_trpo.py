import math

import numpy as np
import pytest

from wavedamp.trpo import (
    GaussianPolicy,
    TrpoConfig,
    ValueNet,
    conjugate_gradient,
    fisher_vector_product,
    fit_value,
    gae,
    line_search,
    normalize_advantages,
    surrogate_gradient,
    surrogate_loss,
    trpo_update,
)

CFG = TrpoConfig()


def make_policy(obs_dim=3, act_dim=1, hidden=(8,), seed=0, output="tanh", std=1.0):
    p = GaussianPolicy(
        obs_dim, act_dim, hidden=hidden, rng=np.random.default_rng(seed),
        log_std_init=math.log(std), output_activation=output,
    )
    # give the zero-initialized output layer some structure
    rng = np.random.default_rng(seed + 1)
    flat = p.get_flat()
    flat[: p.mean_net.n_params] += 0.1 * rng.standard_normal(p.mean_net.n_params)
    p.set_flat(flat)
    return p


class TestGae:
    def test_monte_carlo_limit(self):
        rewards = np.array([1.0, 2.0, 3.0, 4.0])
        adv, ret = gae(rewards, np.zeros(4), np.zeros(4, dtype=bool), 1.0, 1.0)
        expected = np.array([10.0, 9.0, 7.0, 4.0])
        assert np.allclose(adv, expected)
        assert np.allclose(ret, expected)

    def test_single_step(self):
        adv, ret = gae([1.0], [0.0], [True], 0.995, 0.97)
        assert adv[0] == pytest.approx(1.0)
        assert ret[0] == pytest.approx(1.0)

    def test_all_zero(self):
        adv, ret = gae(np.zeros(5), np.zeros(5), np.zeros(5, dtype=bool), 0.99, 0.95)
        assert np.all(adv == 0.0)

    def test_terminal_blocks_bootstrap(self):
        # identical rewards; the terminal flag cuts value flow across episodes
        rewards = np.ones(4)
        values = np.full(4, 10.0)
        dones = np.array([False, True, False, False])
        adv, _ = gae(rewards, values, dones, 0.9, 0.9, bootstrap_value=10.0)
        # after-terminal segment is unaffected by the pre-terminal values
        adv2, _ = gae(rewards[2:], values[2:], dones[2:], 0.9, 0.9, bootstrap_value=10.0)
        assert np.allclose(adv[2:], adv2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            gae([1.0, 2.0], [0.0], [False], 0.99, 0.95)

    def test_normalization(self):
        rng = np.random.default_rng(0)
        adv = normalize_advantages(rng.uniform(-5, 20, size=4096))
        assert abs(adv.mean()) < 1e-9
        assert abs(adv.std() - 1.0) < 1e-6


class TestGaussianDistribution:
    def test_log_prob_at_mean(self):
        p = make_policy(std=1.0)
        states = np.zeros((1, 3))
        mu = p.mean(states)
        lp = p.log_prob(states, mu)
        assert lp[0] == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_kl_identical_policies(self):
        p = make_policy(seed=2)
        q = p.clone()
        states = np.random.default_rng(0).standard_normal((10, 3))
        assert np.allclose(p.kl(q, states), 0.0)

    def test_kl_unit_shift(self):
        # N(0,1) vs N(1,1): KL = 0.5
        p = GaussianPolicy(2, 1, hidden=(), log_std_init=0.0, output_activation="identity")
        q = p.clone()
        q.mean_net.biases[0] = np.array([1.0])
        states = np.zeros((4, 2))
        assert np.allclose(p.kl(q, states), 0.5)

    def test_sampling_statistics(self):
        p = make_policy(seed=3, std=0.5)
        states = np.tile(np.array([[0.3, -0.2, 1.0]]), (20000, 1))
        actions, logp = p.sample(states, np.random.default_rng(5))
        mu = p.mean(states[:1])[0, 0]
        assert actions.mean() == pytest.approx(mu, abs=0.02)
        assert actions.std() == pytest.approx(0.5, abs=0.02)
        assert np.allclose(logp, p.log_prob(states, actions))

    def test_flat_round_trip(self):
        p = make_policy(seed=4)
        q = p.clone()
        q.set_flat(p.get_flat())
        states = np.random.default_rng(1).standard_normal((5, 3))
        assert np.array_equal(p.mean(states), q.mean(states))

    def test_serialization_round_trip(self):
        p = make_policy(seed=5)
        q = GaussianPolicy.from_dict(p.to_dict())
        states = np.random.default_rng(2).standard_normal((5, 3))
        assert np.array_equal(p.mean(states), q.mean(states))
        assert np.array_equal(p.log_std, q.log_std)


class TestSurrogate:
    def _batch(self, p, n=64, seed=0):
        rng = np.random.default_rng(seed)
        states = rng.standard_normal((n, p.obs_dim))
        actions, logp = p.sample(states, rng)
        adv = rng.standard_normal(n)
        return states, actions, adv, logp

    def test_at_old_policy_equals_mean_advantage(self):
        p = make_policy(seed=6)
        states, actions, adv, logp = self._batch(p)
        assert surrogate_loss(p, states, actions, adv, logp) == pytest.approx(adv.mean())

    def test_normalized_advantages_zero_at_old(self):
        p = make_policy(seed=7)
        states, actions, adv, logp = self._batch(p)
        adv = normalize_advantages(adv)
        assert abs(surrogate_loss(p, states, actions, adv, logp)) < 1e-9

    def test_uniform_ratio_scales(self):
        p = make_policy(seed=8)
        states, actions, _, logp = self._batch(p)
        adv = np.ones(len(states))
        shifted = logp - math.log(1.1)
        assert surrogate_loss(p, states, actions, adv, shifted) == pytest.approx(1.1)

    def test_gradient_matches_finite_differences(self):
        p = make_policy(seed=9, hidden=(6,))
        states, actions, adv, logp = self._batch(p, n=32, seed=3)
        g = surrogate_gradient(p, states, actions, adv, logp)
        theta = p.get_flat()
        eps = 1e-6
        probe = p.clone()
        for k in np.random.default_rng(4).choice(p.n_params, 12, replace=False):
            e = np.zeros_like(theta)
            e[k] = eps
            probe.set_flat(theta + e)
            up = surrogate_loss(probe, states, actions, adv, logp)
            probe.set_flat(theta - e)
            dn = surrogate_loss(probe, states, actions, adv, logp)
            assert (up - dn) / (2 * eps) == pytest.approx(g[k], abs=1e-5, rel=1e-4)


class TestFisherVectorProduct:
    def test_zero_vector(self):
        p = make_policy(seed=10)
        states = np.random.default_rng(0).standard_normal((16, 3))
        out = fisher_vector_product(p, states, np.zeros(p.n_params))
        assert np.all(out == 0.0)

    def test_positive_semidefinite(self):
        p = make_policy(seed=11)
        rng = np.random.default_rng(1)
        states = rng.standard_normal((32, 3))
        for _ in range(20):
            v = rng.standard_normal(p.n_params)
            q = float(v @ fisher_vector_product(p, states, v))
            assert q >= -1e-10

    def test_damping_additivity(self):
        p = make_policy(seed=12)
        rng = np.random.default_rng(2)
        states = rng.standard_normal((16, 3))
        v = rng.standard_normal(p.n_params)
        lo = fisher_vector_product(p, states, v, damping=0.0)
        hi = fisher_vector_product(p, states, v, damping=0.25)
        assert np.allclose(hi - lo, 0.25 * v)

    def test_matches_analytic_fisher_linear_policy(self):
        # mean = w s + b, params (w, b, log_std); the Fisher is block diagonal
        p = GaussianPolicy(1, 1, hidden=(), log_std_init=math.log(0.7),
                           output_activation="identity")
        p.mean_net.weights[0] = np.array([[0.4]])
        p.mean_net.biases[0] = np.array([-0.2])
        rng = np.random.default_rng(3)
        states = rng.standard_normal((256, 1))
        s = states[:, 0]
        inv_var = 1.0 / 0.7 ** 2
        F = np.array([
            [np.mean(s * s) * inv_var, np.mean(s) * inv_var, 0.0],
            [np.mean(s) * inv_var, inv_var, 0.0],
            [0.0, 0.0, 2.0],
        ])
        for _ in range(5):
            v = rng.standard_normal(3)
            assert np.allclose(fisher_vector_product(p, states, v), F @ v, atol=1e-10)


class TestConjugateGradient:
    def test_identity_operator(self):
        g = np.array([1.0, -2.0, 3.0])
        x = conjugate_gradient(lambda v: v, g, iterations=1)
        assert np.allclose(x, g)

    def test_spd_system_matches_direct_solve(self):
        A = np.array([[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]])
        b = np.array([1.0, -1.0, 2.0])
        x = conjugate_gradient(lambda v: A @ v, b, iterations=50)
        assert np.allclose(x, np.linalg.solve(A, b), atol=1e-8)

    def test_zero_rhs(self):
        x = conjugate_gradient(lambda v: 2 * v, np.zeros(4))
        assert np.all(x == 0.0)

    def test_natural_gradient_matches_analytic_inverse(self):
        # quadratic surrogate with exact curvature: CG must reproduce F^-1 g
        p = GaussianPolicy(1, 1, hidden=(), log_std_init=math.log(0.5),
                           output_activation="identity")
        p.mean_net.weights[0] = np.array([[1.0]])
        rng = np.random.default_rng(8)
        states = rng.standard_normal((512, 1))
        s = states[:, 0]
        inv_var = 4.0
        F = np.array([
            [np.mean(s * s) * inv_var, np.mean(s) * inv_var, 0.0],
            [np.mean(s) * inv_var, inv_var, 0.0],
            [0.0, 0.0, 2.0],
        ])
        g = np.array([0.3, -0.7, 0.2])
        direction = conjugate_gradient(
            lambda v: fisher_vector_product(p, states, v, damping=0.0), g,
            iterations=50,
        )
        assert np.allclose(direction, np.linalg.solve(F, g), atol=1e-6)


class TestLineSearch:
    def _setup(self, seed=0):
        p = make_policy(seed=seed)
        rng = np.random.default_rng(seed)
        states = rng.standard_normal((64, 3))
        actions, logp = p.sample(states, rng)
        adv = normalize_advantages(rng.standard_normal(64))
        return p, states, actions, adv, logp

    def test_zero_direction_returns_old(self):
        p, states, actions, adv, logp = self._setup(1)
        theta = p.get_flat()
        info = line_search(p, p.clone(), states, actions, adv, logp,
                           np.zeros(p.n_params), 0.0, CFG)
        assert not info["accepted"]
        assert np.array_equal(p.get_flat(), theta)

    def test_accepted_step_respects_trust_region(self):
        p, states, actions, adv, logp = self._setup(2)
        info = trpo_update(p, states, actions, adv, logp, CFG)
        assert info["accepted"]
        assert info["kl"] <= CFG.max_kl

    def test_exhaustion_restores_parameters(self):
        p, states, actions, adv, logp = self._setup(3)
        theta = p.get_flat()
        huge = np.full(p.n_params, 50.0)
        info = line_search(p, p.clone(), states, actions, adv, logp, huge, 1.0, CFG)
        assert not info["accepted"]
        assert np.array_equal(p.get_flat(), theta)


class TestTrpoUpdate:
    def test_improves_surrogate(self):
        p = make_policy(seed=20)
        rng = np.random.default_rng(20)
        states = rng.standard_normal((256, 3))
        actions, logp = p.sample(states, rng)
        # reward pushing actions toward +1
        adv = normalize_advantages(actions[:, 0])
        before = surrogate_loss(p, states, actions, adv, logp)
        info = trpo_update(p, states, actions, adv, logp, CFG)
        after = surrogate_loss(p, states, actions, adv, logp)
        assert info["accepted"]
        assert after > before

    def test_update_determinism(self):
        outs = []
        for _ in range(2):
            p = make_policy(seed=21)
            rng = np.random.default_rng(21)
            states = rng.standard_normal((128, 3))
            actions, logp = p.sample(states, rng)
            adv = normalize_advantages(actions[:, 0])
            trpo_update(p, states, actions, adv, logp, CFG)
            outs.append(p.get_flat())
        assert np.array_equal(outs[0], outs[1])


class TestFitValue:
    def test_constant_returns(self):
        v = ValueNet(3, hidden=(8,), rng=np.random.default_rng(0))
        states = np.random.default_rng(1).standard_normal((128, 3))
        returns = np.full(128, 7.5)
        loss = fit_value(v, states, returns, l2=1e-3, passes=200)
        assert np.allclose(v.predict(states), 7.5, atol=1e-3)
        floor = 1e-3 * float(np.sum(v.net.get_flat() ** 2))
        assert loss == pytest.approx(floor, rel=0.05)

    def test_linear_targets_exact_fit(self):
        v = ValueNet(3, hidden=(), rng=np.random.default_rng(2))
        rng = np.random.default_rng(3)
        states = rng.standard_normal((256, 3))
        w = np.array([1.5, -2.0, 0.5])
        returns = states @ w + 4.0
        fit_value(v, states, returns, l2=0.0, lr=0.05, passes=4000)
        assert np.max(np.abs(v.predict(states) - returns)) < 1e-6

    def test_loss_nonnegative(self):
        v = ValueNet(2, rng=np.random.default_rng(4))
        rng = np.random.default_rng(5)
        loss = fit_value(v, rng.standard_normal((64, 2)), rng.standard_normal(64))
        assert loss >= 0.0

    def test_empty_batch_rejected(self):
        v = ValueNet(2)
        with pytest.raises(ValueError):
            fit_value(v, np.zeros((0, 2)), np.zeros(0))
