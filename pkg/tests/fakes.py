"""Scripted batch environment for solver and schedule tests.

State rows are [marker, t]: marker tags which demonstration index an episode
was restarted from (constant within an episode), t counts steps. The event
script is a callable on (marker, t) evaluated after each step.
"""

import numpy as np

from astba.core import StepBatch

STATE_DIM = 2


class FakeBatchEnv:
    action_dim = 2
    obs_dim = 2

    def __init__(self, horizon=10, event_fn=None, miss=1.0):
        self.horizon = horizon
        self.event_fn = event_fn or (lambda marker, t: np.zeros_like(t, dtype=bool))
        self.miss = miss
        self._steps = 0

    def initial_rows(self, n):
        return np.zeros((n, STATE_DIM))

    def observe(self, states):
        return np.stack([states[:, 1] / self.horizon,
                         states[:, 0] / max(1, self.horizon)], axis=1)

    def step(self, states, actions):
        actions = np.asarray(actions, dtype=np.float64)
        out = states.copy()
        out[:, 1] += 1.0
        t = out[:, 1].astype(np.int64)
        event = np.asarray(self.event_fn(out[:, 0].astype(np.int64), t), dtype=bool)
        loglik = -0.5 * (actions ** 2).sum(axis=1)
        terminal = event | (t >= self.horizon)
        miss = np.full(states.shape[0], self.miss)
        self._steps += states.shape[0]
        return out, StepBatch(event=event, log_likelihood=loglik,
                              terminal=terminal, miss_distance=miss, t=t)

    def steps_taken(self):
        return self._steps

    def max_episode_steps(self, row):
        return max(1, self.horizon - int(row[1]))

    def snapshot_row(self, row):
        return np.ascontiguousarray(row, dtype=np.float64).tobytes()

    def restore_row(self, blob):
        return np.frombuffer(blob, dtype=np.float64).copy()


def fake_demo(env, length):
    """Demonstration whose snapshot i restores to marker=i, t=i."""
    from astba.backward import ExpertDemonstration
    rows = [np.array([float(i), float(i)]) for i in range(length)]
    return ExpertDemonstration(
        snapshots=[env.snapshot_row(r) for r in rows],
        actions=np.zeros((length, env.action_dim)),
        final_snapshot=env.snapshot_row(np.array([float(length), float(length)])),
        ends_in_failure=False, meta={})
