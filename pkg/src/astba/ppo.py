"""Clipped-surrogate policy optimization over batches of rollouts.

One train_epoch collects at least batch_size environment steps from a start
distribution (the initial state, or restart snapshots along an expert
demonstration), estimates advantages with the exponentially weighted
estimator, and runs several full-batch gradient steps guarded by a KL
early stop. Gradients come from the policy module's hand-written
backpropagation; the optimizer is a standard adaptive-moment update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend, policy as pol
from .core import RewardConfig, StepBatch, rollout_rng, step_reward_batch


@dataclass(frozen=True)
class PPOConfig:
    batch_size: int = 5000          # environment steps collected per epoch
    discount: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    kl_limit: float = 1.0           # early-stop guard on mean KL(old || new)
    learning_rate: float = 3e-4
    update_epochs: int = 10         # gradient passes over each batch
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    hidden_dim: int = 64

    def __post_init__(self):
        if not 0 < self.discount <= 1:
            raise ValueError("discount must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")


@dataclass
class Episode:
    """One rollout, stored as flat arrays of length T."""

    start_state: np.ndarray          # state row before the first step
    states: np.ndarray               # (T, S) state before each step
    final_state: np.ndarray          # state after the last step
    obs: np.ndarray                  # (T, O)
    actions: np.ndarray              # (T, A)
    mean_old: np.ndarray
    logstd_old: np.ndarray
    logp_old: np.ndarray
    value_old: np.ndarray
    rewards: np.ndarray
    events: np.ndarray               # (T,) bool, only the last step can fire
    logliks: np.ndarray              # (T,) simulator transition log-likelihoods
    misses: np.ndarray               # (T,) running closest-clearance values
    rollout_index: int

    @property
    def length(self) -> int:
        return self.obs.shape[0]

    @property
    def ends_in_failure(self) -> bool:
        return bool(self.events[-1])

    @property
    def episode_return(self) -> float:
        return float(math.fsum(self.rewards))


@dataclass
class RolloutBatch:
    episodes: list
    total_steps: int


@dataclass
class BatchTensors:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    mean_old: np.ndarray
    logstd_old: np.ndarray
    value_old: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    adv: np.ndarray = None
    ret: np.ndarray = None

    @property
    def n_steps(self) -> float:
        return float(self.mask.sum())


def compute_gae(rewards, values, value_bootstrap: float, gamma: float, lam: float):
    """Single-episode advantage recursion; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have the same length")
    adv, ret = _backend.active.gae_scan(
        rewards[None, :], values[None, :],
        np.array([rewards.shape[0]], dtype=np.int64),
        np.array([value_bootstrap]), gamma, lam)
    return adv[0], ret[0]


def kl_diag_gaussian(mean1, std1, mean2, std2):
    """Closed-form KL(N1 || N2) for diagonal Gaussians, summed over the last
    axis. Nonnegative by construction."""
    mean1, std1 = np.asarray(mean1, dtype=np.float64), np.asarray(std1, dtype=np.float64)
    mean2, std2 = np.asarray(mean2, dtype=np.float64), np.asarray(std2, dtype=np.float64)
    var_ratio = (std1 / std2) ** 2
    per = np.log(std2 / std1) + (var_ratio + ((mean1 - mean2) / std2) ** 2) / 2.0 - 0.5
    return per.sum(axis=-1)


# --- rollout collection -----------------------------------------------------------


def collect_rollouts(env, params: pol.PolicyParams, cfg: PPOConfig,
                     starts, reward_cfg: RewardConfig, seed: int, stage: int,
                     first_rollout_index: int) -> RolloutBatch:
    """Collect whole episodes, in rollout-index order, until the step budget
    is met.

    Episode i restarts from starts[i % len(starts)] (or the initial state
    when starts is None) and draws its actions from the stream keyed by
    (seed, stage, i), so the collected set does not depend on how episodes
    are batched into waves.
    """
    episodes = []
    total = 0
    idx = first_rollout_index
    n_starts = len(starts) if starts is not None else 0
    while total < cfg.batch_size:
        if starts is None:
            max_len = env.horizon
        else:
            max_len = max(env.max_episode_steps(s) for s in starts)
        wave = max(1, -(-(cfg.batch_size - total) // max_len))
        if starts is None:
            states = env.initial_rows(wave)
        else:
            states = np.stack([starts[(idx + j) % n_starts] for j in range(wave)])
        eps = _run_wave(env, params, cfg, states, reward_cfg, seed, stage, idx)
        episodes.extend(eps)
        total += sum(e.length for e in eps)
        idx += wave
    return RolloutBatch(episodes=episodes, total_steps=total)


def _run_wave(env, params, cfg, states, reward_cfg, seed, stage, first_index):
    m = states.shape[0]
    adim, sdim = env.action_dim, states.shape[1]
    cap = env.horizon
    rngs = [rollout_rng(seed, stage, first_index + j) for j in range(m)]

    obs_buf = np.zeros((m, cap, env.obs_dim))
    act_buf = np.zeros((m, cap, adim))
    mean_buf = np.zeros((m, cap, adim))
    logstd_buf = np.zeros((m, cap, adim))
    logp_buf = np.zeros((m, cap))
    val_buf = np.zeros((m, cap))
    rew_buf = np.zeros((m, cap))
    ev_buf = np.zeros((m, cap), dtype=bool)
    ll_buf = np.zeros((m, cap))
    miss_buf = np.zeros((m, cap))
    st_buf = np.zeros((m, cap, sdim))
    final_states = np.zeros((m, sdim))
    lengths = np.zeros(m, dtype=np.int64)
    start_states = states.copy()

    h = np.zeros((m, params.hidden_dim))
    active = np.ones(m, dtype=bool)
    t = 0
    while active.any():
        if t >= cap:
            raise RuntimeError("episode exceeded the configured horizon")
        rows = np.flatnonzero(active)
        obs = env.observe(states[rows])
        h1, mean, logstd, value, _ = pol.gru_step(params, h[rows], obs)
        noise = np.stack([rngs[j].standard_normal(adim) for j in rows])
        actions = mean + np.exp(logstd) * noise
        logp = pol.gaussian_logprob(actions, mean, logstd)
        new_states, sb = env.step(states[rows], actions)
        rewards = step_reward_batch(sb.event, sb.log_likelihood, sb.t,
                                    env.horizon, sb.miss_distance, reward_cfg)

        obs_buf[rows, t] = obs
        act_buf[rows, t] = actions
        mean_buf[rows, t] = mean
        logstd_buf[rows, t] = logstd
        logp_buf[rows, t] = logp
        val_buf[rows, t] = value
        rew_buf[rows, t] = rewards
        ev_buf[rows, t] = sb.event
        ll_buf[rows, t] = sb.log_likelihood
        miss_buf[rows, t] = sb.miss_distance
        st_buf[rows, t] = states[rows]

        states[rows] = new_states
        h[rows] = h1
        done = sb.terminal
        done_rows = rows[done]
        lengths[done_rows] = t + 1
        final_states[done_rows] = new_states[done]
        active[done_rows] = False
        t += 1

    out = []
    for j in range(m):
        n = int(lengths[j])
        out.append(Episode(
            start_state=start_states[j], states=st_buf[j, :n].copy(),
            final_state=final_states[j], obs=obs_buf[j, :n].copy(),
            actions=act_buf[j, :n].copy(), mean_old=mean_buf[j, :n].copy(),
            logstd_old=logstd_buf[j, :n].copy(), logp_old=logp_buf[j, :n].copy(),
            value_old=val_buf[j, :n].copy(), rewards=rew_buf[j, :n].copy(),
            events=ev_buf[j, :n].copy(), logliks=ll_buf[j, :n].copy(),
            misses=miss_buf[j, :n].copy(), rollout_index=first_index + j))
    return out


def episode_to_trajectory(episode: Episode, env):
    """Materialize an episode as a Trajectory with snapshot bytes per step."""
    from .core import StepOutcome, Trajectory, TrajectoryStep
    steps = []
    n = episode.length
    for i in range(n):
        outcome = StepOutcome(event=bool(episode.events[i]),
                              log_likelihood=float(episode.logliks[i]),
                              terminal=i == n - 1,
                              miss_distance=float(episode.misses[i]))
        steps.append(TrajectoryStep(
            state_snapshot=env.snapshot_row(episode.states[i]),
            action=episode.actions[i].copy(),
            reward=float(episode.rewards[i]),
            outcome=outcome))
    return Trajectory.from_steps(steps)


def batch_tensors(batch: RolloutBatch) -> BatchTensors:
    eps = batch.episodes
    n = len(eps)
    t_max = max(e.length for e in eps)
    odim = eps[0].obs.shape[1]
    adim = eps[0].actions.shape[1]
    bt = BatchTensors(
        obs=np.zeros((n, t_max, odim)), actions=np.zeros((n, t_max, adim)),
        logp_old=np.zeros((n, t_max)), mean_old=np.zeros((n, t_max, adim)),
        logstd_old=np.zeros((n, t_max, adim)), value_old=np.zeros((n, t_max)),
        rewards=np.zeros((n, t_max)), lengths=np.zeros(n, dtype=np.int64),
        mask=np.zeros((n, t_max)))
    for i, e in enumerate(eps):
        k = e.length
        bt.obs[i, :k] = e.obs
        bt.actions[i, :k] = e.actions
        bt.logp_old[i, :k] = e.logp_old
        bt.mean_old[i, :k] = e.mean_old
        bt.logstd_old[i, :k] = e.logstd_old
        bt.value_old[i, :k] = e.value_old
        bt.rewards[i, :k] = e.rewards
        bt.lengths[i] = k
        bt.mask[i, :k] = 1.0
    return bt


def add_advantages(bt: BatchTensors, cfg: PPOConfig) -> None:
    """GAE over the collected values, then batch-normalize the advantages.

    Every collected episode ends at a terminal state, so the bootstrap value
    is zero.
    """
    adv, ret = _backend.active.gae_scan(
        bt.rewards, bt.value_old, bt.lengths,
        np.zeros(len(bt.lengths)), cfg.discount, cfg.gae_lambda)
    n = bt.n_steps
    mean = float((adv * bt.mask).sum() / n)
    var = float((((adv - mean) * bt.mask) ** 2).sum() / n)
    std = math.sqrt(var)
    bt.adv = ((adv - mean) / (std + 1e-8)) * bt.mask
    bt.ret = ret


# --- loss and gradient ----------------------------------------------------------


def loss_and_grad(params: pol.PolicyParams, bt: BatchTensors, cfg: PPOConfig,
                  terms: tuple = ("policy", "value", "entropy")):
    """Evaluate the training loss and its exact gradient.

    Returns (total, components, flat gradient, forward cache). `terms`
    selects which pieces enter the total and the gradient; the gradient
    check exercises each in isolation.
    """
    fwd = pol.forward_batch(params, bt.obs, bt.lengths)
    mask = bt.mask
    n = bt.n_steps
    adim = params.action_dim

    std = np.exp(fwd.logstd)
    z = (bt.actions - fwd.mean) / std
    logp_new = (-fwd.logstd - 0.5 * math.log(2.0 * math.pi) - 0.5 * z * z).sum(axis=-1)
    ratio = np.exp(logp_new - bt.logp_old)

    unclipped = ratio * bt.adv
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * bt.adv
    objective = np.minimum(unclipped, clipped)
    policy_loss = float(-(objective * mask).sum() / n)

    verr = fwd.value - bt.ret
    value_loss = float(((verr * verr) * mask).sum() / n)

    ent_per_step = fwd.logstd.sum(axis=-1) + 0.5 * adim * (1.0 + math.log(2.0 * math.pi))
    entropy = float((ent_per_step * mask).sum() / n)

    components = {"policy": policy_loss, "value": value_loss, "entropy": entropy}
    total = 0.0
    if "policy" in terms:
        total += policy_loss
    if "value" in terms:
        total += cfg.value_coef * value_loss
    if "entropy" in terms:
        total -= cfg.entropy_coef * entropy

    dmean = np.zeros_like(fwd.mean)
    dlogstd = np.zeros_like(fwd.logstd)
    dvalue = np.zeros_like(fwd.value)
    if "policy" in terms:
        # the clipped branch only wins when the ratio sits outside the clip
        # range, where its derivative is zero
        use_unclipped = (unclipped <= clipped).astype(np.float64)
        dl_dlogp = -(bt.adv * use_unclipped * ratio) * mask / n
        dmean += dl_dlogp[..., None] * (z / std)
        dlogstd += dl_dlogp[..., None] * (z * z - 1.0)
    if "value" in terms:
        dvalue += cfg.value_coef * 2.0 * verr * mask / n
    if "entropy" in terms:
        dlogstd += (-cfg.entropy_coef / n) * mask[..., None] * np.ones(adim)

    grad = pol.backward_batch(params, fwd, dmean, dlogstd, dvalue)
    return total, components, grad, fwd


def ppo_loss(params: pol.PolicyParams, bt: BatchTensors, cfg: PPOConfig,
             terms: tuple = ("policy", "value", "entropy")) -> float:
    total, _, _, _ = loss_and_grad(params, bt, cfg, terms)
    return total


def mean_kl_to_old(bt: BatchTensors, fwd: pol.ForwardCache) -> float:
    kl = kl_diag_gaussian(bt.mean_old, np.exp(bt.logstd_old),
                          fwd.mean, np.exp(fwd.logstd))
    return float((kl * bt.mask).sum() / bt.n_steps)


# --- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(state: AdamState, flat: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    t = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    new_flat = flat - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_flat, AdamState(m=m, v=v, step=t)


# --- one training epoch -----------------------------------------------------------


@dataclass
class EpochResult:
    params: pol.PolicyParams
    adam: AdamState
    stats: dict
    failure_found: bool
    best_failure: Episode | None
    steps: int
    prefix_steps_to_first_failure: int | None
    next_rollout_index: int
    batch: RolloutBatch


def train_epoch(env, params: pol.PolicyParams, cfg: PPOConfig, starts=None, *,
                reward_cfg: RewardConfig = RewardConfig(),
                adam: AdamState | None = None, seed: int = 0, stage: int = 0,
                epoch: int = 0, first_rollout_index: int = 0,
                env_steps_before: int = 0) -> EpochResult:
    """Collect a batch from the start distribution, update the policy, and
    report whether any rollout ended in a failure event."""
    before = env.steps_taken()
    batch = collect_rollouts(env, params, cfg, starts, reward_cfg, seed,
                             stage, first_rollout_index)
    assert env.steps_taken() - before == batch.total_steps
    bt = batch_tensors(batch)
    add_advantages(bt, cfg)

    flat = params.flatten()
    adam = adam or AdamState.zeros(flat.size)
    last_kl = 0.0
    policy_loss = value_loss = 0.0
    for k in range(cfg.update_epochs):
        total, comps, grad, fwd = loss_and_grad(params, bt, cfg)
        if k == 0:
            policy_loss, value_loss = comps["policy"], comps["value"]
        else:
            last_kl = mean_kl_to_old(bt, fwd)
            if last_kl > cfg.kl_limit:
                break
        flat, adam = adam_step(adam, flat, grad, cfg.learning_rate)
        params = pol.PolicyParams.from_flat(flat, params.obs_dim,
                                            params.action_dim, params.hidden_dim)

    returns = [e.episode_return for e in batch.episodes]
    failures = [e for e in batch.episodes if e.ends_in_failure]
    best_failure = max(failures, key=lambda e: e.episode_return) if failures else None
    prefix = None
    if failures:
        prefix = 0
        for e in batch.episodes:
            prefix += e.length
            if e.ends_in_failure:
                break
    stats = {
        "epoch": epoch,
        "env_steps_cum": env_steps_before + batch.total_steps,
        "mean_return": float(np.mean(returns)),
        "best_return": float(np.max(returns)),
        "failure_found": bool(failures),
        "mean_kl": last_kl,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
    }
    return EpochResult(params=params, adam=adam, stats=stats,
                       failure_found=bool(failures), best_failure=best_failure,
                       steps=batch.total_steps,
                       prefix_steps_to_first_failure=prefix,
                       next_rollout_index=max(e.rollout_index for e in batch.episodes) + 1,
                       batch=batch)
