"""Scenario-agnostic stress-testing machinery.

Holds the pieces every scenario shares: the per-step reward that trades off
failure events against action likelihood, trajectory containers, the
simulator contract, deterministic per-rollout random streams, and the
trajectory file format.
"""

from __future__ import annotations

import base64
import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np


class InvalidOutcomeError(ValueError):
    """A step outcome carried a non-finite log-likelihood."""


class ConfigMismatchError(ValueError):
    """A snapshot was restored into a simulator with a different configuration."""


@dataclass(frozen=True)
class RewardConfig:
    """Finite surrogate for the terminal miss penalty.

    A trajectory that ends without a failure is charged
    alpha_miss + beta_miss * miss_distance, so near-failures score better
    than wide misses and the penalty stays finite for value estimation.
    """

    alpha_miss: float = 1e4
    beta_miss: float = 1e3

    def __post_init__(self):
        if self.alpha_miss < 0 or self.beta_miss < 0:
            raise ValueError("miss penalty coefficients must be nonnegative")


@dataclass
class StepOutcome:
    """What the simulator reports after one environment action."""

    event: bool
    log_likelihood: float
    terminal: bool
    miss_distance: float


@dataclass
class StepBatch:
    """Vectorized step outcomes for a batch of parallel rollouts."""

    event: np.ndarray
    log_likelihood: np.ndarray
    terminal: np.ndarray
    miss_distance: np.ndarray
    t: np.ndarray  # step count since episode start, after this step


@dataclass
class TrajectoryStep:
    state_snapshot: bytes
    action: np.ndarray
    reward: float
    outcome: StepOutcome


@dataclass
class Trajectory:
    steps: list[TrajectoryStep]
    total_return: float
    ends_in_failure: bool

    @classmethod
    def from_steps(cls, steps: list[TrajectoryStep]) -> "Trajectory":
        if not steps:
            raise ValueError("trajectory must contain at least one step")
        total = math.fsum(s.reward for s in steps)
        return cls(steps=steps, total_return=total,
                   ends_in_failure=steps[-1].outcome.event)


def step_reward(outcome: StepOutcome, t: int, horizon: int,
                cfg: RewardConfig = RewardConfig()) -> float:
    """Per-step reward: 0 on a failure event, a distance-shaped penalty on a
    terminal miss, the action log-likelihood otherwise."""
    if not math.isfinite(outcome.log_likelihood):
        raise InvalidOutcomeError(
            f"non-finite log-likelihood {outcome.log_likelihood!r}")
    if not 0 <= t <= horizon:
        raise ValueError(f"step index {t} outside [0, {horizon}]")
    if outcome.event:
        return 0.0
    if t >= horizon:
        return -(cfg.alpha_miss + cfg.beta_miss * outcome.miss_distance)
    return outcome.log_likelihood


def step_reward_batch(event: np.ndarray, log_likelihood: np.ndarray,
                      t: np.ndarray, horizon: int, miss_distance: np.ndarray,
                      cfg: RewardConfig) -> np.ndarray:
    """Vectorized step_reward over parallel rollouts."""
    if not np.all(np.isfinite(log_likelihood)):
        raise InvalidOutcomeError("non-finite log-likelihood in batch")
    penalty = -(cfg.alpha_miss + cfg.beta_miss * miss_distance)
    return np.where(event, 0.0, np.where(t >= horizon, penalty, log_likelihood))


def trajectory_return(traj: Trajectory) -> float:
    if not traj.steps:
        raise ValueError("empty trajectory has no return")
    return math.fsum(s.reward for s in traj.steps)


class Simulator(ABC):
    """Black-box simulator contract.

    Implementations must be deterministic: the same seed and action sequence
    reproduce the same state sequence bit for bit, and restore() followed by
    the same actions reproduces the original continuation exactly. restore()
    must reject snapshots from a differently configured simulator.
    """

    @abstractmethod
    def reset(self, seed: int = 0):
        ...

    @abstractmethod
    def step(self, action: np.ndarray) -> StepOutcome:
        ...

    @abstractmethod
    def snapshot(self) -> bytes:
        ...

    @abstractmethod
    def restore(self, blob: bytes) -> None:
        ...

    @abstractmethod
    def steps_taken(self) -> int:
        ...


def rollout_rng(seed: int, stage: int, rollout_index: int) -> np.random.Generator:
    """Random stream for one rollout, split by counter rather than sequence.

    Streams depend only on (seed, stage, rollout_index), so results do not
    change with batching width or collection order.
    """
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(seed, stage, rollout_index)))


def init_rng(seed: int, stage: int) -> np.random.Generator:
    """Stream for parameter initialization within a stage."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(seed, stage, 0x5EED)))


# --- trajectory files ---------------------------------------------------------
# JSON lines, one step per line: {"t": int, "state": base64 snapshot,
# "action": [floats], "reward": float, "event": bool}


def write_trajectory_jsonl(traj: Trajectory, path) -> None:
    with open(path, "w") as fh:
        for t, s in enumerate(traj.steps):
            fh.write(json.dumps({
                "t": t,
                "state": base64.b64encode(s.state_snapshot).decode("ascii"),
                "action": [float(x) for x in s.action],
                "reward": s.reward,
                "event": s.outcome.event,
            }, sort_keys=True) + "\n")


def read_trajectory_jsonl(path) -> Trajectory:
    steps = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            outcome = StepOutcome(event=bool(rec["event"]), log_likelihood=0.0,
                                  terminal=False, miss_distance=0.0)
            steps.append(TrajectoryStep(
                state_snapshot=base64.b64decode(rec["state"]),
                action=np.asarray(rec["action"], dtype=np.float64),
                reward=float(rec["reward"]),
                outcome=outcome))
    if steps:
        steps[-1].outcome.terminal = True
    return Trajectory.from_steps(steps)
