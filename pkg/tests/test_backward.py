"""Demonstration adaptation, the restart schedule, and warm starts."""

import numpy as np
import pytest

from astba import backward as bwd, policy as pol, ppo
from astba.backward import (AdaptationError, BAConfig, ExpertDemonstration,
                            IncompatibilityReport, adapt_remap, adapt_repeat,
                            adapt_replay, read_demo_jsonl, run_backward,
                            warm_start, write_demo_jsonl)
from astba.core import RewardConfig, read_trajectory_jsonl, write_trajectory_jsonl
from astba.crosswalk import (CrosswalkBatchEnv, CrosswalkSimulator,
                             FidelityConfig, ScenarioConfig)
from astba.ppo import PPOConfig

from fakes import FakeBatchEnv, fake_demo


def scripted_policy_trajectory(sim, script):
    """Roll a fixed action script and package it as a Trajectory."""
    from astba.core import (StepOutcome, Trajectory, TrajectoryStep,
                            step_reward)
    sim.reset(0)
    steps = []
    for a in script:
        snap = sim.snapshot()
        out = sim.step(np.asarray(a, dtype=np.float64))
        r = step_reward(out, sim.state.t, sim.fidelity.horizon)
        steps.append(TrajectoryStep(state_snapshot=snap,
                                    action=np.asarray(a, dtype=np.float64),
                                    reward=r, outcome=out))
        if out.terminal:
            break
    return Trajectory.from_steps(steps)


def pursuit_script(sim, gain=2.0, damp=2.0):
    """Chase the vehicle's front bumper; collides with the stopped car."""
    sim.reset(0)
    acts = []
    while True:
        st = sim.state
        target = np.array([st.vehicle.x + 1.0, 0.0])
        accel = np.clip(gain * (target - st.pedestrian.p) - damp * st.pedestrian.v,
                        -4.0, 4.0)
        a = np.concatenate([accel, np.zeros(sim.action_dim - 2)])
        acts.append(a)
        if sim.step(a).terminal:
            break
    return acts


LOFI_TIME = FidelityConfig(dt=0.5, horizon=10)
HIFI = FidelityConfig(dt=0.1, horizon=50)


class TestAdaptation:
    def test_repeat_expands_by_k(self):
        lofi_sim = CrosswalkSimulator(ScenarioConfig(), LOFI_TIME)
        traj = scripted_policy_trajectory(lofi_sim, np.zeros((10, 6)))
        assert len(traj.steps) == 10
        hifi_sim = CrosswalkSimulator(ScenarioConfig(), HIFI)
        demo = adapt_repeat(traj, 5, hifi_sim, lofi_horizon=10)
        assert len(demo) == 50
        assert demo.meta["adaptation"] == "repeat"

    def test_repeat_identity_factor(self):
        sim = CrosswalkSimulator(ScenarioConfig(), LOFI_TIME)
        traj = scripted_policy_trajectory(sim, np.zeros((10, 6)))
        hifi_sim = CrosswalkSimulator(ScenarioConfig(), LOFI_TIME)
        demo = adapt_repeat(traj, 1, hifi_sim, lofi_horizon=10)
        np.testing.assert_array_equal(demo.actions,
                                      [s.action for s in traj.steps])

    def test_repeat_horizon_mismatch(self):
        sim = CrosswalkSimulator(ScenarioConfig(), LOFI_TIME)
        traj = scripted_policy_trajectory(sim, np.zeros((10, 6)))
        hifi_sim = CrosswalkSimulator(ScenarioConfig(), HIFI)
        with pytest.raises(AdaptationError):
            adapt_repeat(traj, 4, hifi_sim, lofi_horizon=10)

    def test_repeat_deterministic(self):
        sim = CrosswalkSimulator(ScenarioConfig(), LOFI_TIME)
        rng = np.random.default_rng(0)
        traj = scripted_policy_trajectory(sim, rng.normal(0, 1, (10, 6)))
        demos = [adapt_repeat(traj, 5, CrosswalkSimulator(ScenarioConfig(), HIFI),
                              lofi_horizon=10) for _ in range(2)]
        assert demos[0].snapshots == demos[1].snapshots

    def test_replay_same_sim_reproduces_states(self):
        sim = CrosswalkSimulator(ScenarioConfig(), HIFI)
        rng = np.random.default_rng(1)
        traj = scripted_policy_trajectory(sim, rng.normal(0, 0.5, (50, 6)))
        demo = adapt_replay(traj, CrosswalkSimulator(ScenarioConfig(), HIFI))
        assert demo.snapshots == [s.state_snapshot for s in traj.steps]

    def test_replay_quantized_source_diverges(self):
        lofi = CrosswalkSimulator(ScenarioConfig(),
                                  FidelityConfig(dt=0.1, horizon=50,
                                                 quantize_decimals=1))
        rng = np.random.default_rng(2)
        traj = scripted_policy_trajectory(lofi, rng.normal(0, 0.5, (50, 6)))
        demo = adapt_replay(traj, CrosswalkSimulator(ScenarioConfig(), HIFI))
        assert demo.snapshots[5] != traj.steps[5].state_snapshot

    def test_replay_failure_flag_recomputed(self):
        # a colliding low-fidelity trajectory replayed into an uncrashable
        # variant must come back ends_in_failure=False
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        script = pursuit_script(lofi)
        traj = scripted_policy_trajectory(lofi, script)
        assert traj.ends_in_failure
        brake = ScenarioConfig(sut_mode="brake", ped_accel_limit=2.0)
        demo = adapt_replay(traj, CrosswalkSimulator(brake, HIFI))
        assert demo.ends_in_failure is False

    def test_replay_dim_mismatch_points_to_remap(self):
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        traj = scripted_policy_trajectory(lofi, np.zeros((50, 6)))
        hifi = CrosswalkSimulator(ScenarioConfig(),
                                  FidelityConfig(dt=0.1, horizon=50,
                                                 sensor_model="lidar"))
        with pytest.raises(AdaptationError, match="remap"):
            adapt_replay(traj, hifi)

    def test_remap_six_to_three(self):
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        rng = np.random.default_rng(3)
        traj = scripted_policy_trajectory(lofi, rng.normal(0, 0.5, (50, 6)))
        hifi = CrosswalkSimulator(ScenarioConfig(),
                                  FidelityConfig(dt=0.1, horizon=50,
                                                 sensor_model="lidar"))
        demo = adapt_remap(traj, [0, 1, None], 0.0, hifi)
        assert demo.actions.shape[1] == 3
        np.testing.assert_array_equal(demo.actions[:, 2], 0.0)
        src = np.array([s.action for s in traj.steps])
        np.testing.assert_array_equal(demo.actions[:, :2], src[:len(demo), :2])

    def test_remap_identity_equals_replay(self):
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        rng = np.random.default_rng(4)
        traj = scripted_policy_trajectory(lofi, rng.normal(0, 0.5, (50, 6)))
        a = adapt_replay(traj, CrosswalkSimulator(ScenarioConfig(), HIFI))
        b = adapt_remap(traj, [0, 1, 2, 3, 4, 5], 0.0,
                        CrosswalkSimulator(ScenarioConfig(), HIFI))
        assert a.snapshots == b.snapshots

    def test_remap_bad_channel(self):
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        traj = scripted_policy_trajectory(lofi, np.zeros((50, 6)))
        with pytest.raises(AdaptationError):
            adapt_remap(traj, [0, 1, 9], 0.0,
                        CrosswalkSimulator(ScenarioConfig(),
                                           FidelityConfig(dt=0.1, horizon=50,
                                                          sensor_model="lidar")))

    def test_snapshots_replay_consistent(self):
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        rng = np.random.default_rng(5)
        traj = scripted_policy_trajectory(lofi, rng.normal(0, 0.5, (50, 6)))
        hifi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        demo = adapt_replay(traj, hifi)
        for i in range(len(demo) - 1):
            hifi.restore(demo.snapshots[i])
            hifi.step(demo.actions[i])
            assert hifi.snapshot() == demo.snapshots[i + 1]

    def test_demo_file_round_trip(self, tmp_path):
        lofi = CrosswalkSimulator(ScenarioConfig(), LOFI_TIME)
        rng = np.random.default_rng(6)
        traj = scripted_policy_trajectory(lofi, rng.normal(0, 0.5, (10, 6)))
        demo = adapt_repeat(traj, 5, CrosswalkSimulator(ScenarioConfig(), HIFI),
                            lofi_horizon=10, meta={"lofi_steps_spent": 123})
        p, mp = tmp_path / "demo.jsonl", tmp_path / "demo_meta.json"
        write_demo_jsonl(demo, p, mp)
        back = read_demo_jsonl(p, mp)
        assert back.snapshots == demo.snapshots
        np.testing.assert_array_equal(back.actions, demo.actions)
        assert back.ends_in_failure == demo.ends_in_failure
        assert back.meta["lofi_steps_spent"] == 123


def schedule_oracle(t_d, success_taus, cfg: BAConfig, max_epochs=10_000):
    """Independent replay of the pointer rules from the module contract."""
    tau = t_d - cfg.start_offset
    epochs_at = 0
    forced_run = 0
    taus = []
    for _ in range(max_epochs):
        taus.append(tau)
        if tau in success_taus:
            if tau == 0:
                return "failure_found", taus
            tau = max(0, tau - cfg.backstep)
            epochs_at = 0
            forced_run = 0
        else:
            epochs_at += 1
            if epochs_at >= cfg.max_epochs_per_step:
                tau = max(0, tau - 1)
                epochs_at = 0
                forced_run += 1
                if forced_run >= cfg.reject_after_forced:
                    return "rejected_spurious", taus
    return "budget", taus


def run_fake_ba(t_d, success_taus, ba_cfg=None, batch_size=30, horizon=None,
                max_steps=10**9):
    horizon = horizon or t_d
    env = FakeBatchEnv(horizon=horizon,
                       event_fn=lambda marker, t: np.isin(marker, list(success_taus)))
    demo = fake_demo(env, t_d)
    params = pol.init_policy_params(env.obs_dim, env.action_dim, 4,
                                    np.random.default_rng(0))
    cfg = ba_cfg or BAConfig()
    res = run_backward(demo, env, params, PPOConfig(batch_size=batch_size,
                                                    hidden_dim=4),
                       cfg, max_steps=max_steps, seed=0)
    return env, res


class TestSchedule:
    def test_first_success_moves_back_four(self):
        _, res = run_fake_ba(50, success_taus=set(range(51)))
        assert res.trace[0]["tau"] == 40
        assert res.trace[1]["tau"] == 36

    def test_trace_matches_oracle_always_succeeding(self):
        _, res = run_fake_ba(50, success_taus=set(range(51)))
        want_outcome, want_taus = schedule_oracle(50, set(range(51)), BAConfig())
        assert res.outcome == "failure_found"
        assert want_outcome == "failure_found"
        assert [e["tau"] for e in res.trace] == want_taus

    def test_unreachable_failure_rejected_after_five_forced(self):
        _, res = run_fake_ba(20, success_taus=set())
        assert res.outcome == "rejected_spurious"
        forced = [e for e in res.trace if e["forced"]]
        assert len(forced) == 5
        cap = BAConfig().max_epochs_per_step
        assert len(res.trace) == 5 * cap
        # pointer moves one step earlier per forced advance
        taus = [e["tau"] for e in res.trace]
        assert taus == [10] * cap + [9] * cap + [8] * cap + [7] * cap + [6] * cap

    def test_random_scripts_match_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            t_d = int(rng.integers(12, 30))
            success = set(int(x) for x in
                          rng.choice(t_d, size=rng.integers(0, t_d), replace=False))
            success.add(0)  # guarantee termination when the pointer arrives
            cfg = BAConfig(start_offset=int(rng.integers(1, 8)),
                           backstep=int(rng.integers(1, 5)),
                           max_epochs_per_step=int(rng.integers(1, 4)))
            _, res = run_fake_ba(t_d, success, ba_cfg=cfg, batch_size=20)
            want_outcome, want_taus = schedule_oracle(t_d, success, cfg)
            assert res.outcome == want_outcome
            assert [e["tau"] for e in res.trace] == want_taus

    def test_forced_counter_resets_on_success(self):
        # fail at 10..7 (4 forced advances), succeed at 6, then fail forever:
        # rejection needs five fresh forced advances
        cfg = BAConfig(start_offset=5, max_epochs_per_step=2, backstep=4)
        success = {6}
        _, res = run_fake_ba(15, success, ba_cfg=cfg, batch_size=20)
        want_outcome, want_taus = schedule_oracle(15, success, cfg)
        assert res.outcome == want_outcome == "rejected_spurious"
        assert [e["tau"] for e in res.trace] == want_taus

    def test_steps_counter_equals_summed_rollout_lengths(self):
        env, res = run_fake_ba(30, success_taus={0, 12, 16, 20}, batch_size=25)
        assert res.hifi_steps_used == env.steps_taken()

    def test_budget_exhaustion(self):
        _, res = run_fake_ba(40, success_taus=set(), max_steps=75)
        assert res.outcome == "budget_exhausted"
        assert res.hifi_steps_used >= 75

    def test_tau_nonincreasing_and_strides(self):
        _, res = run_fake_ba(50, success_taus={40, 36, 32, 28, 24, 20, 0},
                             batch_size=25)
        taus = [e["tau"] for e in res.trace]
        assert all(a >= b for a, b in zip(taus, taus[1:]))

    def test_demo_too_short_rejected(self):
        env = FakeBatchEnv(horizon=5)
        demo = fake_demo(env, 5)
        params = pol.init_policy_params(env.obs_dim, env.action_dim, 4,
                                        np.random.default_rng(0))
        with pytest.raises(ValueError):
            run_backward(demo, env, params, PPOConfig(batch_size=10, hidden_dim=4),
                         BAConfig(start_offset=10), seed=0)

    def test_mismatched_snapshots_fail_before_training(self):
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        script = pursuit_script(lofi)
        traj = scripted_policy_trajectory(lofi, script)
        demo = adapt_replay(traj, CrosswalkSimulator(ScenarioConfig(), HIFI))
        other = CrosswalkBatchEnv(ScenarioConfig(), FidelityConfig(dt=0.5, horizon=10))
        params = pol.init_policy_params(other.obs_dim, other.action_dim, 4,
                                        np.random.default_rng(0))
        from astba.core import ConfigMismatchError
        with pytest.raises(ConfigMismatchError):
            run_backward(demo, other, params,
                         PPOConfig(batch_size=10, hidden_dim=4), BAConfig(), seed=0)


class TestBackwardOnCrosswalk:
    def test_near_collision_restart_finds_failure_fast(self):
        """A demonstration whose own tail collides: the first epoch restarts
        ten steps before the collision and stochastic rollouts land in it."""
        lofi = CrosswalkSimulator(ScenarioConfig(), HIFI)
        script = pursuit_script(lofi)
        traj = scripted_policy_trajectory(lofi, script)
        assert traj.ends_in_failure
        env = CrosswalkBatchEnv(ScenarioConfig(), HIFI)
        demo = adapt_replay(traj, CrosswalkSimulator(ScenarioConfig(), HIFI))
        assert demo.ends_in_failure
        params = pol.init_policy_params(env.obs_dim, env.action_dim, 32,
                                        np.random.default_rng(1))
        res = run_backward(demo, env, params,
                           PPOConfig(batch_size=400, hidden_dim=32),
                           BAConfig(), max_steps=100_000, seed=1)
        assert res.trace[0]["failure_found"]


class TestWarmStart:
    def test_compatible_checkpoint_loads(self, tmp_path):
        p = pol.init_policy_params(11, 6, 8, np.random.default_rng(8))
        path = tmp_path / "ck.json"
        pol.save_checkpoint(p, path)
        out = warm_start(path, obs_dim=11, action_dim=6)
        assert isinstance(out, pol.PolicyParams)
        np.testing.assert_array_equal(out.flatten(), p.flatten())

    def test_dimension_mismatch_reports(self, tmp_path):
        p = pol.init_policy_params(11, 6, 8, np.random.default_rng(9))
        path = tmp_path / "ck.json"
        pol.save_checkpoint(p, path)
        out = warm_start(path, obs_dim=9, action_dim=3)
        assert isinstance(out, IncompatibilityReport)
        assert out.found == {"obs_dim": 11, "action_dim": 6}
        assert out.expected == {"obs_dim": 9, "action_dim": 3}
