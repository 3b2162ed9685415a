"""Reward function, trajectory containers, and rollout random streams."""

import math

import numpy as np
import pytest
from scipy import stats

from astba.core import (InvalidOutcomeError, RewardConfig, StepOutcome,
                        Trajectory, TrajectoryStep, rollout_rng, init_rng,
                        step_reward, step_reward_batch, trajectory_return,
                        read_trajectory_jsonl, write_trajectory_jsonl)


def outcome(event=False, ll=-1.0, terminal=False, miss=0.0):
    return StepOutcome(event=event, log_likelihood=ll, terminal=terminal,
                       miss_distance=miss)


class TestStepReward:
    def test_failure_event_scores_zero(self):
        assert step_reward(outcome(event=True, ll=-3.0), 13, 50) == 0.0

    def test_terminal_miss_penalty(self):
        cfg = RewardConfig(alpha_miss=1e4, beta_miss=1e3)
        got = step_reward(outcome(miss=1.2), 50, 50, cfg)
        assert got == -(1e4 + 1e3 * 1.2)
        assert got == -11200.0

    def test_passthrough_log_likelihood(self):
        assert step_reward(outcome(ll=-5.5136), 7, 50) == -5.5136

    def test_nonfinite_log_likelihood_rejected(self):
        with pytest.raises(InvalidOutcomeError):
            step_reward(outcome(ll=float("nan")), 3, 50)
        with pytest.raises(InvalidOutcomeError):
            step_reward(outcome(ll=float("-inf")), 3, 50)

    def test_step_index_range_checked(self):
        with pytest.raises(ValueError):
            step_reward(outcome(), -1, 50)
        with pytest.raises(ValueError):
            step_reward(outcome(), 51, 50)

    def test_never_positive_for_nonpositive_log_likelihood(self):
        rng = np.random.default_rng(1)
        cfg = RewardConfig()
        for _ in range(200):
            o = outcome(event=rng.random() < 0.3, ll=-float(rng.exponential(3)),
                        miss=float(rng.exponential(2)))
            t = int(rng.integers(0, 51))
            assert step_reward(o, t, 50, cfg) <= 0.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(2)
        cfg = RewardConfig(alpha_miss=5e3, beta_miss=250.0)
        n = 64
        event = rng.random(n) < 0.2
        ll = -rng.exponential(4, n)
        t = rng.integers(0, 21, n)
        miss = rng.exponential(3, n)
        got = step_reward_batch(event, ll, t, 20, miss, cfg)
        for i in range(n):
            o = outcome(event=bool(event[i]), ll=float(ll[i]), miss=float(miss[i]))
            assert got[i] == step_reward(o, int(t[i]), 20, cfg)


class TestRewardOrdering:
    def test_failure_beats_any_miss_when_alpha_dominates(self):
        # alpha > horizon * max |log likelihood| makes every failing
        # trajectory outrank every miss
        rng = np.random.default_rng(3)
        horizon = 20
        max_ll = 12.0
        cfg = RewardConfig(alpha_miss=horizon * max_ll + 1.0, beta_miss=0.0)
        for _ in range(50):
            n_f = int(rng.integers(1, horizon + 1))
            fail_rewards = list(-rng.uniform(0, max_ll, n_f - 1)) + [0.0]
            miss_rewards = list(-rng.uniform(0, max_ll, horizon - 1))
            miss_rewards.append(step_reward(outcome(miss=float(rng.exponential(2))),
                                            horizon, horizon, cfg))
            assert sum(fail_rewards) > sum(miss_rewards)

    def test_loglik_sum_orders_like_probability_product(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            lla = -rng.exponential(2, 10)
            llb = -rng.exponential(2, 10)
            assert (lla.sum() > llb.sum()) == (
                math.exp(lla.sum()) > math.exp(llb.sum()))


class TestTrajectory:
    def _traj(self, rewards, last_event=False):
        steps = [TrajectoryStep(state_snapshot=b"s", action=np.zeros(2),
                                reward=r, outcome=outcome())
                 for r in rewards]
        steps[-1].outcome.event = last_event
        steps[-1].outcome.terminal = True
        return Trajectory.from_steps(steps)

    def test_return_is_sum(self):
        assert trajectory_return(self._traj([-1.0, -2.0, 0.0])) == -3.0

    def test_single_failure_step(self):
        t = self._traj([0.0], last_event=True)
        assert trajectory_return(t) == 0.0
        assert t.ends_in_failure

    def test_gaussian_zero_action_return(self):
        # three steps, each the log-density of a 6-dim standard normal at 0
        per_step = float(stats.multivariate_normal(np.zeros(6), np.eye(6)).logpdf(np.zeros(6)))
        t = self._traj([per_step] * 3)
        assert trajectory_return(t) == pytest.approx(3 * per_step, abs=1e-12)
        assert per_step == pytest.approx(-5.5136, abs=5e-5)

    def test_total_return_matches_sum_invariant(self):
        rng = np.random.default_rng(5)
        rewards = list(-rng.exponential(2, 17))
        t = self._traj(rewards)
        assert abs(t.total_return - sum(rewards)) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Trajectory.from_steps([])

    def test_jsonl_round_trip(self, tmp_path):
        t = self._traj([-1.5, -2.25, 0.0], last_event=True)
        path = tmp_path / "traj.jsonl"
        write_trajectory_jsonl(t, path)
        back = read_trajectory_jsonl(path)
        assert back.ends_in_failure
        assert back.total_return == t.total_return
        assert [s.reward for s in back.steps] == [s.reward for s in t.steps]
        assert all(a.state_snapshot == b.state_snapshot
                   for a, b in zip(back.steps, t.steps))
        np.testing.assert_array_equal(back.steps[0].action, t.steps[0].action)


class TestRolloutStreams:
    def test_same_key_same_stream(self):
        a = rollout_rng(7, 1, 42).standard_normal(8)
        b = rollout_rng(7, 1, 42).standard_normal(8)
        np.testing.assert_array_equal(a, b)

    def test_distinct_indices_distinct_streams(self):
        a = rollout_rng(7, 1, 0).standard_normal(8)
        b = rollout_rng(7, 1, 1).standard_normal(8)
        assert not np.allclose(a, b)

    def test_order_independent(self):
        # drawing stream 5 before or after stream 3 changes nothing
        first = rollout_rng(9, 2, 5).standard_normal(4)
        _ = rollout_rng(9, 2, 3).standard_normal(4)
        second = rollout_rng(9, 2, 5).standard_normal(4)
        np.testing.assert_array_equal(first, second)

    def test_init_stream_distinct_from_rollout_streams(self):
        a = init_rng(7, 1).standard_normal(4)
        b = rollout_rng(7, 1, 0).standard_normal(4)
        assert not np.allclose(a, b)
