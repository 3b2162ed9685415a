"""Advantage estimation, the clipped loss and its gradients, the KL guard,
and epoch-level behavior."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from astba import policy as pol, ppo
from astba.core import RewardConfig
from astba.policy import PolicyParams, init_policy_params
from astba.ppo import (AdamState, BatchTensors, PPOConfig, adam_step,
                       add_advantages, batch_tensors, collect_rollouts,
                       compute_gae, kl_diag_gaussian, loss_and_grad,
                       mean_kl_to_old, ppo_loss, train_epoch)

from fakes import FakeBatchEnv


def brute_force_gae(rewards, values, bootstrap, gamma, lam):
    t_len = len(rewards)
    vnext = np.append(values[1:], bootstrap)
    delta = rewards + gamma * vnext - values
    adv = np.zeros(t_len)
    for t in range(t_len):
        adv[t] = sum((gamma * lam) ** k * delta[t + k] for k in range(t_len - t))
    return adv, adv + values


class TestGae:
    def test_hand_example(self):
        adv, ret = compute_gae([1.0, 1.0], [0.5, 0.5], 0.0, 0.99, 0.95)
        np.testing.assert_allclose(adv, [1.46525, 0.5], atol=1e-12)
        np.testing.assert_allclose(ret, [1.96525, 1.0], atol=1e-12)

    def test_monte_carlo_limit(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=12)
        v = rng.normal(size=12)
        adv, _ = compute_gae(r, v, 0.0, 1.0, 1.0)
        tail = np.cumsum(r[::-1])[::-1]
        np.testing.assert_allclose(adv, tail - v, atol=1e-12)

    def test_zeros(self):
        adv, ret = compute_gae(np.zeros(5), np.zeros(5), 0.0, 0.99, 0.95)
        np.testing.assert_array_equal(adv, 0.0)
        np.testing.assert_array_equal(ret, 0.0)

    def test_matches_brute_force_double_sum(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            r = rng.normal(0, 3, 20)
            v = rng.normal(0, 3, 20)
            bs = float(rng.normal())
            gamma = float(rng.uniform(0.8, 1.0))
            lam = float(rng.uniform(0.0, 1.0))
            adv, ret = compute_gae(r, v, bs, gamma, lam)
            want_adv, want_ret = brute_force_gae(r, v, bs, gamma, lam)
            np.testing.assert_allclose(adv, want_adv, atol=1e-10)
            np.testing.assert_allclose(ret, want_ret, atol=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_gae([1.0], [1.0, 2.0], 0.0, 0.99, 0.95)


class TestKl:
    def test_identical_is_zero(self):
        m = np.array([0.3, -1.0])
        s = np.array([0.7, 1.2])
        assert kl_diag_gaussian(m, s, m, s) == 0.0

    def test_unit_shift(self):
        assert kl_diag_gaussian([0.0], [1.0], [1.0], [1.0]) == pytest.approx(0.5, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            m1, m2 = rng.normal(size=3), rng.normal(size=3)
            s1, s2 = rng.uniform(0.1, 3.0, 3), rng.uniform(0.1, 3.0, 3)
            assert kl_diag_gaussian(m1, s1, m2, s2) >= 0.0

    def test_against_numerical_integration(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            m1, m2 = float(rng.normal()), float(rng.normal())
            s1, s2 = float(rng.uniform(0.5, 2)), float(rng.uniform(0.5, 2))

            def integrand(x):
                p = stats.norm.pdf(x, m1, s1)
                return p * (stats.norm.logpdf(x, m1, s1) - stats.norm.logpdf(x, m2, s2))

            want, _ = integrate.quad(integrand, m1 - 12 * s1, m1 + 12 * s1)
            got = float(kl_diag_gaussian([m1], [s1], [m2], [s2]))
            assert got == pytest.approx(want, abs=1e-8)


def tiny_params(seed=0, obs_dim=2, action_dim=2, hidden_dim=4):
    return init_policy_params(obs_dim, action_dim, hidden_dim,
                              np.random.default_rng(seed))


def small_batch(seed=0, horizon=4, batch_size=32, hidden_dim=4,
                reward_cfg=RewardConfig()):
    env = FakeBatchEnv(horizon=horizon)
    params = tiny_params(seed, obs_dim=env.obs_dim, hidden_dim=hidden_dim)
    cfg = PPOConfig(batch_size=batch_size, hidden_dim=hidden_dim)
    batch = collect_rollouts(env, params, cfg, None, reward_cfg, seed, 0, 0)
    bt = batch_tensors(batch)
    add_advantages(bt, cfg)
    return env, params, cfg, bt


class TestLossArithmetic:
    def _single_step_tensors(self, params, adv, ratio):
        obs = np.zeros((1, 1, params.obs_dim))
        lengths = np.array([1], dtype=np.int64)
        fwd = pol.forward_batch(params, obs, lengths)
        actions = fwd.mean.copy()  # logp_new is then the density at the mean
        logp_new = pol.gaussian_logprob(actions, fwd.mean, fwd.logstd)
        bt = BatchTensors(obs=obs, actions=actions,
                          logp_old=logp_new - math.log(ratio),
                          mean_old=fwd.mean.copy(), logstd_old=fwd.logstd.copy(),
                          value_old=fwd.value.copy(), rewards=np.zeros((1, 1)),
                          lengths=lengths, mask=np.ones((1, 1)))
        bt.adv = np.full((1, 1), adv)
        bt.ret = fwd.value.copy()
        return bt

    def test_clip_upper_branch(self):
        p = tiny_params(4)
        bt = self._single_step_tensors(p, adv=1.0, ratio=1.5)
        total, comps, _, _ = loss_and_grad(p, bt, PPOConfig(clip_epsilon=0.2),
                                           terms=("policy",))
        assert comps["policy"] == pytest.approx(-1.2, abs=1e-9)
        assert total == comps["policy"]

    def test_clip_lower_branch_negative_advantage(self):
        p = tiny_params(5)
        bt = self._single_step_tensors(p, adv=-1.0, ratio=0.5)
        _, comps, _, _ = loss_and_grad(p, bt, PPOConfig(clip_epsilon=0.2),
                                       terms=("policy",))
        assert comps["policy"] == pytest.approx(0.8, abs=1e-9)

    def test_identity_params_zero_policy_term(self):
        _, params, cfg, bt = small_batch(6)
        # old distribution equals new: ratio is one, so the policy term is
        # minus the mean normalized advantage, which normalization zeroes
        _, comps, _, _ = loss_and_grad(params, bt, cfg)
        assert comps["policy"] == pytest.approx(0.0, abs=1e-9)

    def test_advantage_normalization(self):
        _, _, _, bt = small_batch(7)
        n = bt.mask.sum()
        mean = (bt.adv * bt.mask).sum() / n
        var = ((bt.adv - mean) ** 2 * bt.mask).sum() / n
        assert abs(mean) < 1e-9
        assert abs(math.sqrt(var) - 1.0) < 1e-6

    def test_clip_bound_on_objective(self):
        _, params, cfg, bt = small_batch(8)
        fwd = pol.forward_batch(params, bt.obs, bt.lengths)
        logp_new = pol.gaussian_logprob(bt.actions, fwd.mean, fwd.logstd)
        ratio = np.exp(logp_new - bt.logp_old)
        objective = np.minimum(ratio * bt.adv,
                               np.clip(ratio, 0.8, 1.2) * bt.adv)
        bound = (1 + cfg.clip_epsilon) * np.abs(bt.adv)
        assert np.all(objective * bt.mask <= bound * bt.mask + 1e-12)


class TestLossGradients:
    @pytest.mark.parametrize("terms", [("policy",), ("value",), ("entropy",),
                                       ("policy", "value", "entropy")])
    def test_each_term_matches_finite_differences(self, terms):
        # small miss penalty keeps the value targets O(1): central differences
        # on a loss dominated by an O(1e8) value term would drown the small
        # policy entries in cancellation noise
        _, params, _, bt = small_batch(9, horizon=2, batch_size=6,
                                       reward_cfg=RewardConfig(alpha_miss=1.0,
                                                               beta_miss=0.1))
        cfg = PPOConfig(batch_size=6, hidden_dim=4, entropy_coef=0.01)
        _, _, got, _ = loss_and_grad(params, bt, cfg, terms=terms)
        flat = params.flatten()
        eps = 1e-5
        want = np.zeros_like(flat)
        for i in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[i] += eps
            dn[i] -= eps
            pu = PolicyParams.from_flat(up, params.obs_dim, params.action_dim,
                                        params.hidden_dim)
            pd = PolicyParams.from_flat(dn, params.obs_dim, params.action_dim,
                                        params.hidden_dim)
            want[i] = (ppo_loss(pu, bt, cfg, terms) - ppo_loss(pd, bt, cfg, terms)) / (2 * eps)
        scale = np.maximum(np.abs(want), 1e-6)
        assert float(np.max(np.abs(got - want) / scale)) < 1e-4


class TestAdam:
    def test_first_step_is_signed_lr(self):
        st = AdamState.zeros(3)
        flat = np.zeros(3)
        grad = np.array([1.0, -2.0, 0.5])
        new, st = adam_step(st, flat, grad, lr=0.01)
        # bias correction makes the first step lr * sign(grad) (up to eps)
        np.testing.assert_allclose(new, -0.01 * np.sign(grad), atol=1e-6)
        assert st.step == 1


class TestTrainEpoch:
    def test_instant_failure_env(self):
        env = FakeBatchEnv(horizon=10,
                           event_fn=lambda marker, t: np.ones_like(t, dtype=bool))
        params = tiny_params(10, obs_dim=env.obs_dim)
        cfg = PPOConfig(batch_size=50, hidden_dim=4)
        res = train_epoch(env, params, cfg, None, seed=0, stage=0)
        assert res.failure_found
        assert res.steps <= cfg.batch_size
        assert res.prefix_steps_to_first_failure == 1

    def test_step_accounting_matches_counter(self):
        env = FakeBatchEnv(horizon=7)
        params = tiny_params(11, obs_dim=env.obs_dim)
        cfg = PPOConfig(batch_size=40, hidden_dim=4)
        before = env.steps_taken()
        res = train_epoch(env, params, cfg, None, seed=1, stage=0)
        assert env.steps_taken() - before == res.steps
        assert res.steps >= cfg.batch_size
        assert res.steps == sum(e.length for e in res.batch.episodes)

    def test_collection_deterministic(self):
        outs = []
        for _ in range(2):
            env = FakeBatchEnv(horizon=5)
            params = tiny_params(12, obs_dim=env.obs_dim)
            cfg = PPOConfig(batch_size=30, hidden_dim=4)
            batch = collect_rollouts(env, params, cfg, None, RewardConfig(), 3, 0, 0)
            outs.append(np.concatenate([e.actions.ravel() for e in batch.episodes]))
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_kl_early_stop_keeps_last_applied_update(self):
        env = FakeBatchEnv(horizon=4)
        params = tiny_params(13, obs_dim=env.obs_dim)
        cfg = PPOConfig(batch_size=24, hidden_dim=4, kl_limit=1e-12,
                        learning_rate=0.5, update_epochs=10)
        batch = collect_rollouts(env, params, cfg, None, RewardConfig(), 5, 0, 0)
        bt = batch_tensors(batch)
        add_advantages(bt, cfg)
        # one adam step by hand; the epoch must stop right after it
        _, _, grad, _ = loss_and_grad(params, bt, cfg)
        want_flat, _ = adam_step(AdamState.zeros(params.size), params.flatten(),
                                 grad, cfg.learning_rate)
        res = train_epoch(env, params, cfg, None, seed=5, stage=0)
        np.testing.assert_array_equal(res.params.flatten(), want_flat)
        assert res.stats["mean_kl"] > cfg.kl_limit

    def test_metrics_keys(self):
        env = FakeBatchEnv(horizon=5)
        params = tiny_params(14, obs_dim=env.obs_dim)
        res = train_epoch(env, params, PPOConfig(batch_size=20, hidden_dim=4),
                          None, seed=2, stage=0, epoch=3, env_steps_before=100)
        assert set(res.stats) == {"epoch", "env_steps_cum", "mean_return",
                                  "best_return", "failure_found", "mean_kl",
                                  "policy_loss", "value_loss"}
        assert res.stats["epoch"] == 3
        assert res.stats["env_steps_cum"] == 100 + res.steps
