"""Curriculum transfer of low-fidelity failures into a high-fidelity simulator.

A failure trajectory found cheaply in a low-fidelity simulator is adapted
into the high-fidelity one (action repetition, verbatim replay, or channel
remapping), captured as a demonstration of restorable snapshots. Training
then restarts episodes from a pointer that walks from near the end of the
demonstration toward its start: the pointer jumps back `backstep` steps
whenever an epoch produces a failure, advances a single step after
`max_epochs_per_step` fruitless epochs, and too many consecutive fruitless
advances reject the demonstration as an artifact of the fidelity gap.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import policy as pol, ppo
from .core import RewardConfig, Trajectory
from .crosswalk import CrosswalkSimulator


class AdaptationError(ValueError):
    """A low-fidelity trajectory cannot be adapted with the requested method."""


@dataclass(frozen=True)
class BAConfig:
    start_offset: int = 10        # first restart is this many steps before the end
    backstep: int = 4             # pointer jump after an epoch with a failure
    max_epochs_per_step: int = 10
    reject_after_forced: int = 5  # consecutive forced advances before rejection
    restart_jitter: int = 0       # also restart from this many neighbors each side
    warm_start_reinit_logstd: bool = False

    def __post_init__(self):
        if self.start_offset < 1 or self.backstep < 1 or self.reject_after_forced < 1:
            raise ValueError("start_offset, backstep, reject_after_forced must be >= 1")
        if self.max_epochs_per_step < 1 or self.restart_jitter < 0:
            raise ValueError("bad epoch cap or jitter")


@dataclass
class BASchedule:
    tau: int
    epochs_at_tau: int = 0
    consecutive_forced: int = 0
    status: str = "running"


@dataclass
class ExpertDemonstration:
    """Adapted failure demonstration: restorable snapshots plus the actions
    that connect them (snapshot i is the state before action i)."""

    snapshots: list
    actions: np.ndarray
    final_snapshot: bytes
    ends_in_failure: Optional[bool]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.snapshots)


def _replay_capture(hifi_sim: CrosswalkSimulator, actions: np.ndarray,
                    method: str, meta: dict) -> ExpertDemonstration:
    hifi_sim.reset()
    snapshots = []
    executed = []
    event = False
    for a in actions:
        snapshots.append(hifi_sim.snapshot())
        out = hifi_sim.step(a)
        executed.append(np.asarray(a, dtype=np.float64))
        if out.terminal:
            event = out.event
            break
    meta = dict(meta)
    meta["adaptation"] = method
    return ExpertDemonstration(snapshots=snapshots,
                               actions=np.asarray(executed),
                               final_snapshot=hifi_sim.snapshot(),
                               ends_in_failure=event, meta=meta)


def _lofi_actions(lofi_traj: Trajectory) -> np.ndarray:
    return np.asarray([s.action for s in lofi_traj.steps], dtype=np.float64)


def adapt_repeat(lofi_traj: Trajectory, k: int, hifi_sim: CrosswalkSimulator,
                 lofi_horizon: Optional[int] = None, meta: dict | None = None
                 ) -> ExpertDemonstration:
    """Repeat each low-fidelity action k times and replay in high fidelity
    (the coarse simulator's timestep is k times longer)."""
    if k < 1:
        raise AdaptationError("repeat factor must be >= 1")
    if lofi_horizon is not None and hifi_sim.fidelity.horizon != k * lofi_horizon:
        raise AdaptationError(
            f"high-fidelity horizon {hifi_sim.fidelity.horizon} is not "
            f"{k} x low-fidelity horizon {lofi_horizon}")
    acts = _lofi_actions(lofi_traj)
    if acts.shape[1] != hifi_sim.action_dim:
        raise AdaptationError(
            f"action dimension {acts.shape[1]} does not match the "
            f"high-fidelity simulator's {hifi_sim.action_dim}")
    expanded = np.repeat(acts, k, axis=0)
    return _replay_capture(hifi_sim, expanded, "repeat", {**(meta or {}), "k": k})


def adapt_replay(lofi_traj: Trajectory, hifi_sim: CrosswalkSimulator,
                 meta: dict | None = None) -> ExpertDemonstration:
    """Replay the low-fidelity actions verbatim (same timestep and action
    space, different state fidelity)."""
    acts = _lofi_actions(lofi_traj)
    if acts.shape[1] != hifi_sim.action_dim:
        raise AdaptationError(
            f"action dimension {acts.shape[1]} does not match the "
            f"high-fidelity simulator's {hifi_sim.action_dim}; use adapt_remap")
    return _replay_capture(hifi_sim, acts, "replay", meta or {})


def adapt_remap(lofi_traj: Trajectory, channel_map: list, fill_value: float,
                hifi_sim: CrosswalkSimulator, meta: dict | None = None
                ) -> ExpertDemonstration:
    """Assemble each high-fidelity action by channel_map (entry i names the
    low-fidelity channel feeding hifi channel i, or None for fill_value)."""
    acts = _lofi_actions(lofi_traj)
    if len(channel_map) != hifi_sim.action_dim:
        raise AdaptationError(
            f"channel map has {len(channel_map)} entries, need {hifi_sim.action_dim}")
    remapped = np.full((acts.shape[0], hifi_sim.action_dim), float(fill_value))
    for i, src in enumerate(channel_map):
        if src is None:
            continue
        if not 0 <= src < acts.shape[1]:
            raise AdaptationError(f"channel map entry {src} out of range")
        remapped[:, i] = acts[:, src]
    return _replay_capture(hifi_sim, remapped, "remap",
                           {**(meta or {}), "channel_map": list(channel_map),
                            "fill_value": float(fill_value)})


# --- demonstration files -------------------------------------------------------
# JSON lines of {"t": step index, "snapshot": base64, "action": [floats]};
# provenance lives in a sidecar JSON written next to it.


def write_demo_jsonl(demo: ExpertDemonstration, path, meta_path=None) -> None:
    with open(path, "w") as fh:
        for t in range(len(demo)):
            fh.write(json.dumps({
                "t": t,
                "snapshot": base64.b64encode(demo.snapshots[t]).decode("ascii"),
                "action": [float(x) for x in demo.actions[t]],
            }, sort_keys=True) + "\n")
    if meta_path is not None:
        with open(meta_path, "w") as fh:
            json.dump({"ends_in_failure": demo.ends_in_failure,
                       "final_snapshot": base64.b64encode(demo.final_snapshot).decode("ascii"),
                       "meta": demo.meta}, fh, sort_keys=True, indent=2)


def read_demo_jsonl(path, meta_path=None) -> ExpertDemonstration:
    snapshots, actions = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            snapshots.append(base64.b64decode(rec["snapshot"]))
            actions.append(rec["action"])
    ends = None
    final = b""
    meta = {}
    if meta_path is not None:
        with open(meta_path) as fh:
            side = json.load(fh)
        ends = side.get("ends_in_failure")
        final = base64.b64decode(side.get("final_snapshot", ""))
        meta = side.get("meta", {})
    return ExpertDemonstration(snapshots=snapshots,
                               actions=np.asarray(actions, dtype=np.float64),
                               final_snapshot=final, ends_in_failure=ends,
                               meta=meta)


# --- the backward run ----------------------------------------------------------


@dataclass
class BAResult:
    outcome: str                      # failure_found | rejected_spurious | budget_exhausted
    failure_trajectory: Optional[Trajectory]
    hifi_steps_used: int
    steps_to_failure: Optional[int]   # prefix count up to the terminating failure
    trace: list
    schedule: BASchedule
    params: pol.PolicyParams
    final_reward: Optional[float] = None


def run_backward(demo: ExpertDemonstration, env, params_init: pol.PolicyParams,
                 ppo_cfg: ppo.PPOConfig, ba_cfg: BAConfig, *,
                 reward_cfg: RewardConfig = RewardConfig(),
                 max_steps: int = 500_000, seed: int = 0, stage: int = 3,
                 metrics=None) -> BAResult:
    """Walk the restart pointer along the demonstration until a failure is
    found from the demonstration's own start, the demonstration is rejected
    as spurious, or the step budget runs out.

    The run terminates successfully only on a failure found from tau = 0,
    which is a full-length failure of the original problem. Restart rows are
    decoded up front so a configuration mismatch fails before any training.
    """
    rows = [env.restore_row(b) for b in demo.snapshots]
    t_d = len(rows)
    if t_d < ba_cfg.start_offset + 1:
        raise ValueError(
            f"demonstration too short ({t_d} steps) for start_offset {ba_cfg.start_offset}")

    sched = BASchedule(tau=t_d - ba_cfg.start_offset)
    params = params_init
    adam = None
    rollout_index = 0
    steps_used = 0
    trace = []
    epoch = 0
    result_traj = None
    steps_to_failure = None
    final_reward = None

    while True:
        if sched.tau == 0 or ba_cfg.restart_jitter == 0:
            start_idx = [sched.tau]
        else:
            lo = max(0, sched.tau - ba_cfg.restart_jitter)
            hi = min(t_d - 1, sched.tau + ba_cfg.restart_jitter)
            start_idx = list(range(lo, hi + 1))
        res = ppo.train_epoch(env, params, ppo_cfg,
                              starts=[rows[i] for i in start_idx],
                              reward_cfg=reward_cfg, adam=adam, seed=seed,
                              stage=stage, epoch=epoch,
                              first_rollout_index=rollout_index,
                              env_steps_before=steps_used)
        params, adam = res.params, res.adam
        rollout_index = res.next_rollout_index
        entry = {"epoch": epoch, "tau": sched.tau, "forced": False,
                 "failure_found": res.failure_found}
        if metrics is not None:
            metrics(res.stats)

        if res.failure_found and sched.tau == 0:
            steps_to_failure = steps_used + res.prefix_steps_to_first_failure
            steps_used += res.steps
            sched.status = "found_from_start"
            result_traj = ppo.episode_to_trajectory(res.best_failure, env)
            final_reward = res.best_failure.episode_return
            trace.append(entry)
            return BAResult(outcome="failure_found", failure_trajectory=result_traj,
                            hifi_steps_used=steps_used,
                            steps_to_failure=steps_to_failure, trace=trace,
                            schedule=sched, params=params, final_reward=final_reward)
        steps_used += res.steps

        if res.failure_found:
            sched.tau = max(0, sched.tau - ba_cfg.backstep)
            sched.epochs_at_tau = 0
            sched.consecutive_forced = 0
        else:
            sched.epochs_at_tau += 1
            if sched.epochs_at_tau >= ba_cfg.max_epochs_per_step:
                sched.tau = max(0, sched.tau - 1)
                sched.epochs_at_tau = 0
                sched.consecutive_forced += 1
                entry["forced"] = True
                if sched.consecutive_forced >= ba_cfg.reject_after_forced:
                    sched.status = "rejected_spurious"
                    trace.append(entry)
                    return BAResult(outcome="rejected_spurious",
                                    failure_trajectory=None,
                                    hifi_steps_used=steps_used,
                                    steps_to_failure=None, trace=trace,
                                    schedule=sched, params=params)
        trace.append(entry)
        if steps_used >= max_steps:
            sched.status = "budget_exhausted"
            return BAResult(outcome="budget_exhausted", failure_trajectory=None,
                            hifi_steps_used=steps_used, steps_to_failure=None,
                            trace=trace, schedule=sched, params=params)
        epoch += 1


# --- warm start ------------------------------------------------------------------


@dataclass
class IncompatibilityReport:
    reason: str
    expected: dict
    found: dict


def warm_start(checkpoint_path, obs_dim: int, action_dim: int):
    """Load a low-fidelity checkpoint for reuse in high fidelity.

    Returns PolicyParams when the network fits the target scenario's
    observation/action dimensions, otherwise an IncompatibilityReport; a
    dimension mismatch is an expected outcome, not an exception.
    """
    try:
        params, cfg = pol.load_checkpoint(checkpoint_path)
    except ValueError as exc:
        return IncompatibilityReport(reason=f"unreadable checkpoint: {exc}",
                                     expected={"obs_dim": obs_dim, "action_dim": action_dim},
                                     found={})
    if params.obs_dim != obs_dim or params.action_dim != action_dim:
        return IncompatibilityReport(
            reason="network dimensions do not match the target scenario",
            expected={"obs_dim": obs_dim, "action_dim": action_dim},
            found={"obs_dim": params.obs_dim, "action_dim": params.action_dim})
    return params
