"""Recurrent Gaussian policy with a value head and exact analytic gradients.

A single GRU layer feeds three affine heads: action mean, action log-std
(clamped, so exploration noise can neither vanish nor explode), and a state
value. Forward and backward passes are written out by hand; the backward
pass is backpropagation through time for arbitrary per-step output
gradients, which is everything the training losses need.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _backend
from ._backend import layout as L
from .crosswalk import CrosswalkState, FidelityConfig, ScenarioConfig, build_config_vector

LOGSTD_MIN = -5.0
LOGSTD_MAX = 2.0

CHECKPOINT_VERSION = 1


@dataclass
class PolicyParams:
    """GRU gate weights plus the three heads.

    Naming: w_* act on the observation, u_* on the hidden state; z is the
    update gate, r the reset gate, n the candidate state.
    """

    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_n: np.ndarray
    u_n: np.ndarray
    b_n: np.ndarray
    w_mean: np.ndarray
    b_mean: np.ndarray
    w_logstd: np.ndarray
    b_logstd: np.ndarray
    w_value: np.ndarray
    b_value: np.ndarray  # shape (1,)

    @property
    def obs_dim(self) -> int:
        return self.w_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def action_dim(self) -> int:
        return self.w_mean.shape[0]

    def _fields(self):
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_n, self.u_n, self.b_n, self.w_mean, self.b_mean,
                self.w_logstd, self.b_logstd, self.w_value, self.b_value]

    def flatten(self) -> np.ndarray:
        return np.concatenate([f.ravel() for f in self._fields()])

    @property
    def size(self) -> int:
        return sum(f.size for f in self._fields())

    @classmethod
    def from_flat(cls, flat: np.ndarray, obs_dim: int, action_dim: int,
                  hidden_dim: int) -> "PolicyParams":
        shapes = param_shapes(obs_dim, action_dim, hidden_dim)
        total = sum(int(np.prod(s)) for s in shapes.values())
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise ValueError(f"expected flat vector of length {total}, got {flat.shape}")
        pieces = {}
        at = 0
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            pieces[name] = flat[at:at + n].reshape(shape).copy()
            at += n
        return cls(**pieces)


def param_shapes(obs_dim: int, action_dim: int, hidden_dim: int) -> dict:
    h, o, a = hidden_dim, obs_dim, action_dim
    return {
        "w_z": (h, o), "u_z": (h, h), "b_z": (h,),
        "w_r": (h, o), "u_r": (h, h), "b_r": (h,),
        "w_n": (h, o), "u_n": (h, h), "b_n": (h,),
        "w_mean": (a, h), "b_mean": (a,),
        "w_logstd": (a, h), "b_logstd": (a,),
        "w_value": (h,), "b_value": (1,),
    }


def init_policy_params(obs_dim: int, action_dim: int, hidden_dim: int = 64,
                       rng: np.random.Generator | None = None) -> PolicyParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases.

    The zero log-std bias starts the action noise at std 1 for exploration.
    """
    rng = rng or np.random.default_rng(0)
    fields = {}
    for name, shape in param_shapes(obs_dim, action_dim, hidden_dim).items():
        if name.startswith("b_"):
            fields[name] = np.zeros(shape)
        else:
            fan_in = shape[1] if len(shape) == 2 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            fields[name] = rng.uniform(-bound, bound, size=shape)
    return PolicyParams(**fields)


def reinit_logstd_head(params: PolicyParams, rng: np.random.Generator) -> PolicyParams:
    """Fresh log-std head (recovers exploration after a warm start)."""
    bound = 1.0 / math.sqrt(params.hidden_dim)
    new = PolicyParams(**{k: v.copy() for k, v in vars(params).items()})
    new.w_logstd = rng.uniform(-bound, bound, size=params.w_logstd.shape)
    new.b_logstd = np.zeros_like(params.b_logstd)
    return new


# --- observations -----------------------------------------------------------------


def observation(state_row: np.ndarray, scenario: ScenarioConfig,
                fidelity: FidelityConfig) -> np.ndarray:
    """Encode one raw state row for the policy (see layout.py for scales)."""
    cfg = build_config_vector(scenario, fidelity)
    return _backend.active.observe(np.asarray(state_row)[None, :], cfg)[0]


# --- forward passes ------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(p: PolicyParams, h: np.ndarray, x: np.ndarray):
    """One cell update plus heads for a batch of rows.

    Returns (h1, mean, logstd, value, gates) where gates = (z, r, n,
    logstd_raw) are kept for the backward pass. logstd is clamped to
    [LOGSTD_MIN, LOGSTD_MAX].
    """
    z = _sigmoid(x @ p.w_z.T + h @ p.u_z.T + p.b_z)
    r = _sigmoid(x @ p.w_r.T + h @ p.u_r.T + p.b_r)
    n = np.tanh(x @ p.w_n.T + (r * h) @ p.u_n.T + p.b_n)
    h1 = (1.0 - z) * n + z * h
    mean = h1 @ p.w_mean.T + p.b_mean
    logstd_raw = h1 @ p.w_logstd.T + p.b_logstd
    logstd = np.clip(logstd_raw, LOGSTD_MIN, LOGSTD_MAX)
    value = h1 @ p.w_value + p.b_value[0]
    return h1, mean, logstd, value, (z, r, n, logstd_raw)


@dataclass
class PolicyOutput:
    mean: np.ndarray
    std: np.ndarray
    value: float


def policy_step(p: PolicyParams, h: np.ndarray, obs: np.ndarray):
    """Single-state step: returns (PolicyOutput, new hidden state)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (p.obs_dim,):
        raise ValueError(f"expected observation of dimension {p.obs_dim}, got {obs.shape}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    h1, mean, logstd, value, _ = gru_step(p, h[None, :], obs[None, :])
    return PolicyOutput(mean=mean[0], std=np.exp(logstd[0]), value=float(value[0])), h1[0]


def initial_hidden(p: PolicyParams) -> np.ndarray:
    return np.zeros(p.hidden_dim)


def sample_action(out: PolicyOutput, rng: np.random.Generator):
    """Draw a ~ N(mean, diag(std^2)); returns (action, log_prob)."""
    eps = rng.standard_normal(out.mean.shape[0])
    action = out.mean + out.std * eps
    return action, float(gaussian_logprob(action, out.mean, np.log(out.std)))


def gaussian_logprob(actions: np.ndarray, mean: np.ndarray,
                     logstd: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log-density, summed over the action dimension."""
    z = (actions - mean) / np.exp(logstd)
    per = -logstd - 0.5 * math.log(2.0 * math.pi) - 0.5 * z * z
    return per.sum(axis=-1)


@dataclass
class ForwardCache:
    """Everything the backward pass needs, shaped (N, T, ...)."""

    obs: np.ndarray
    lengths: np.ndarray
    hs: np.ndarray        # hidden state after each step
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    logstd_raw: np.ndarray
    mean: np.ndarray
    logstd: np.ndarray
    value: np.ndarray


def forward_batch(p: PolicyParams, obs: np.ndarray, lengths: np.ndarray) -> ForwardCache:
    """Run the network over a padded episode batch (hidden state starts at
    zero for every episode)."""
    n_ep, t_max, _ = obs.shape
    hdim, adim = p.hidden_dim, p.action_dim
    hs = np.zeros((n_ep, t_max, hdim))
    zs = np.zeros((n_ep, t_max, hdim))
    rs = np.zeros((n_ep, t_max, hdim))
    ns = np.zeros((n_ep, t_max, hdim))
    logstd_raw = np.zeros((n_ep, t_max, adim))
    mean = np.zeros((n_ep, t_max, adim))
    logstd = np.zeros((n_ep, t_max, adim))
    value = np.zeros((n_ep, t_max))
    h = np.zeros((n_ep, hdim))
    for t in range(t_max):
        h, m_t, ls_t, v_t, (z_t, r_t, n_t, raw_t) = gru_step(p, h, obs[:, t])
        hs[:, t] = h
        zs[:, t] = z_t
        rs[:, t] = r_t
        ns[:, t] = n_t
        logstd_raw[:, t] = raw_t
        mean[:, t] = m_t
        logstd[:, t] = ls_t
        value[:, t] = v_t
    return ForwardCache(obs=obs, lengths=np.asarray(lengths, dtype=np.int64),
                        hs=hs, z=zs, r=rs, n=ns, logstd_raw=logstd_raw,
                        mean=mean, logstd=logstd, value=value)


def backward_batch(p: PolicyParams, cache: ForwardCache, dmean: np.ndarray,
                   dlogstd: np.ndarray, dvalue: np.ndarray) -> np.ndarray:
    """Backpropagation through time for the given output gradients.

    dmean/dlogstd are (N, T, A), dvalue is (N, T); entries beyond an
    episode's length must be zero (padded steps then contribute nothing,
    because every gradient path is linear in the incoming seed). Returns the
    gradient as a flat vector matching PolicyParams.flatten().
    """
    n_ep, t_max, _ = cache.obs.shape
    g = {name: np.zeros(shape) for name, shape in
         param_shapes(p.obs_dim, p.action_dim, p.hidden_dim).items()}
    # clamp: no gradient outside the active range
    inside = (cache.logstd_raw > LOGSTD_MIN) & (cache.logstd_raw < LOGSTD_MAX)
    dlogstd_raw = dlogstd * inside

    dh_next = np.zeros((n_ep, p.hidden_dim))
    for t in range(t_max - 1, -1, -1):
        x = cache.obs[:, t]
        h1 = cache.hs[:, t]
        h_prev = cache.hs[:, t - 1] if t > 0 else np.zeros_like(h1)
        z, r, n = cache.z[:, t], cache.r[:, t], cache.n[:, t]
        dm, dls, dv = dmean[:, t], dlogstd_raw[:, t], dvalue[:, t]

        g["w_mean"] += dm.T @ h1
        g["b_mean"] += dm.sum(axis=0)
        g["w_logstd"] += dls.T @ h1
        g["b_logstd"] += dls.sum(axis=0)
        g["w_value"] += dv @ h1
        g["b_value"][0] += dv.sum()

        dh = dm @ p.w_mean + dls @ p.w_logstd + dv[:, None] * p.w_value[None, :] + dh_next

        # h1 = (1-z) n + z h_prev
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z

        da_n = dn * (1.0 - n * n)
        g["w_n"] += da_n.T @ x
        g["u_n"] += da_n.T @ (r * h_prev)
        g["b_n"] += da_n.sum(axis=0)
        drh = da_n @ p.u_n
        dr = drh * h_prev
        dh_prev += drh * r

        da_z = dz * z * (1.0 - z)
        g["w_z"] += da_z.T @ x
        g["u_z"] += da_z.T @ h_prev
        g["b_z"] += da_z.sum(axis=0)
        dh_prev += da_z @ p.u_z

        da_r = dr * r * (1.0 - r)
        g["w_r"] += da_r.T @ x
        g["u_r"] += da_r.T @ h_prev
        g["b_r"] += da_r.sum(axis=0)
        dh_prev += da_r @ p.u_r

        dh_next = dh_prev
    return np.concatenate([g[name].ravel() for name in
                           param_shapes(p.obs_dim, p.action_dim, p.hidden_dim)])


# --- checkpoints ------------------------------------------------------------------


def save_checkpoint(params: PolicyParams, path, extra: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": {"obs_dim": params.obs_dim, "action_dim": params.action_dim,
                   "hidden_dim": params.hidden_dim, **(extra or {})},
        "params": {name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                   for name, arr in vars(params).items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    """Returns (params, config echo). Raises ValueError on malformed files;
    dimension compatibility is the caller's concern."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    cfg = doc["config"]
    expected = param_shapes(cfg["obs_dim"], cfg["action_dim"], cfg["hidden_dim"])
    fields = {}
    for name, shape in expected.items():
        rec = doc["params"][name]
        if tuple(rec["shape"]) != shape:
            raise ValueError(f"checkpoint field {name} has shape {rec['shape']}, expected {shape}")
        fields[name] = np.asarray(rec["data"], dtype=np.float64).reshape(shape)
    return PolicyParams(**fields), cfg
