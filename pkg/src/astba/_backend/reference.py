"""Pure-numpy stepping kernels (the fallback backend).

Each function is vectorized over a batch of independent simulator instances
laid out as rows of a (M, STATE_DIM) float64 array. Rows never interact, so
advancing a batch of M is bit-identical to advancing each row alone. The
compiled backend implements the same contracts with scalar loops.
"""

from __future__ import annotations

import numpy as np

from . import layout as L

NAME = "python"

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _round_half_away(x: np.ndarray, decimals: float) -> np.ndarray:
    """Round half away from zero (numpy rounds half to even)."""
    f = 10.0 ** decimals
    return np.sign(x) * np.floor(np.abs(x) * f + 0.5) / f


def crosswalk_step(states: np.ndarray, actions: np.ndarray, cfg: np.ndarray):
    """Advance M crosswalk instances by one step.

    Returns (new_states, event, log_likelihood, terminal, miss_distance).
    The step order is: parse action, sense, update the SUT's pedestrian
    estimate, SUT acceleration, kinematics, optional quantization, collision
    check, action log-likelihood.
    """
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    m = s.shape[0]
    act_dim = int(cfg[L.C_ACT_DIM])
    if a.shape != (m, act_dim):
        raise ValueError(
            f"action batch shape {a.shape} does not match expected ({m}, {act_dim})"
        )

    dt = cfg[L.C_DT]
    sensor = int(cfg[L.C_SENSOR])
    out = s.copy()

    # pedestrian acceleration channels, clamped only for the dynamics
    acc_lim = cfg[L.C_PED_ACC_LIM]
    ped_ax = a[:, 0]
    ped_ay = a[:, 1]
    if acc_lim >= 0.0:
        ped_ax = np.clip(ped_ax, -acc_lim, acc_lim)
        ped_ay = np.clip(ped_ay, -acc_lim, acc_lim)

    # --- sense -------------------------------------------------------------
    if sensor == L.SENSOR_DIRECT:
        meas_px = s[:, L.PED_PX] + a[:, 2]
        meas_py = s[:, L.PED_PY] + a[:, 3]
        meas_vx = s[:, L.PED_VX] + a[:, 4]
        meas_vy = s[:, L.PED_VY] + a[:, 5]
        meas_valid = np.ones(m, dtype=bool)
    else:
        readings, detect, end_x, end_y = _lidar_scan(s, a[:, 2], cfg)
        count = detect.sum(axis=1).astype(np.float64)
        meas_valid = count > 0.0
        # linear accumulation order matches the compiled backend
        sum_x = np.zeros(m)
        sum_y = np.zeros(m)
        for b in range(detect.shape[1]):
            d = detect[:, b]
            sum_x = sum_x + np.where(d, end_x[:, b], 0.0)
            sum_y = sum_y + np.where(d, end_y[:, b], 0.0)
        safe = np.where(meas_valid, count, 1.0)
        meas_px = np.where(meas_valid, sum_x / safe, 0.0)
        meas_py = np.where(meas_valid, sum_y / safe, 0.0)
        fd_ok = meas_valid & (s[:, L.CENT_VALID] > 0.5)
        meas_vx = np.where(fd_ok, (meas_px - s[:, L.CENT_PX]) / dt, 0.0)
        meas_vy = np.where(fd_ok, (meas_py - s[:, L.CENT_PY]) / dt, 0.0)
        out[:, L.CENT_PX] = np.where(meas_valid, meas_px, s[:, L.CENT_PX])
        out[:, L.CENT_PY] = np.where(meas_valid, meas_py, s[:, L.CENT_PY])
        out[:, L.CENT_VALID] = np.where(meas_valid, 1.0, 0.0)

    # --- estimate update (fixed-gain tracker, or raw passthrough) -----------
    est_valid = s[:, L.EST_VALID] > 0.5
    if cfg[L.C_TRACKER] > 0.5:
        alpha = cfg[L.C_ALPHA]
        beta = cfg[L.C_BETA]
        init = meas_valid & ~est_valid
        upd = meas_valid & est_valid
        coast = ~meas_valid & est_valid
        init_v = L.SENSOR_DIRECT == sensor  # lidar initializes velocity at 0
        pred_x = s[:, L.EST_PX] + s[:, L.EST_VX] * dt
        pred_y = s[:, L.EST_PY] + s[:, L.EST_VY] * dt
        rx = meas_px - pred_x
        ry = meas_py - pred_y
        out[:, L.EST_PX] = np.where(
            init, meas_px, np.where(upd, pred_x + alpha * rx,
                                    np.where(coast, pred_x, s[:, L.EST_PX])))
        out[:, L.EST_PY] = np.where(
            init, meas_py, np.where(upd, pred_y + alpha * ry,
                                    np.where(coast, pred_y, s[:, L.EST_PY])))
        out[:, L.EST_VX] = np.where(
            init, meas_vx if init_v else 0.0,
            np.where(upd, s[:, L.EST_VX] + (beta / dt) * rx, s[:, L.EST_VX]))
        out[:, L.EST_VY] = np.where(
            init, meas_vy if init_v else 0.0,
            np.where(upd, s[:, L.EST_VY] + (beta / dt) * ry, s[:, L.EST_VY]))
        out[:, L.EST_VALID] = np.where(meas_valid | est_valid, 1.0, 0.0)
    else:
        out[:, L.EST_PX] = np.where(meas_valid, meas_px, s[:, L.EST_PX])
        out[:, L.EST_PY] = np.where(meas_valid, meas_py, s[:, L.EST_PY])
        out[:, L.EST_VX] = np.where(meas_valid, meas_vx, s[:, L.EST_VX])
        out[:, L.EST_VY] = np.where(meas_valid, meas_vy, s[:, L.EST_VY])
        out[:, L.EST_VALID] = np.where(meas_valid, 1.0, 0.0)

    # --- SUT acceleration ----------------------------------------------------
    v = s[:, L.VEH_V]
    decel = cfg[L.C_DECEL]
    a_max = cfg[L.C_A_MAX]
    if int(cfg[L.C_SUT_MODE]) == L.SUT_BRAKE:
        a_cmd = np.full(m, decel)
    else:
        est_px = out[:, L.EST_PX]
        est_py = out[:, L.EST_PY]
        est_vx = out[:, L.EST_VX]
        have_est = out[:, L.EST_VALID] > 0.5
        in_street = have_est & (cfg[L.C_STREET_MIN] < est_py) & (est_py < cfg[L.C_STREET_MAX])
        half_len = cfg[L.C_CAR_LEN] / 2.0
        gap = est_px - s[:, L.VEH_X] - half_len
        free_term = np.power(v / cfg[L.C_V_DESIRED], cfg[L.C_DELTA])
        a_free = a_max * (1.0 - free_term)
        s_star = (cfg[L.C_S0] + v * cfg[L.C_T_HEADWAY]
                  + v * (v - est_vx) / (2.0 * np.sqrt(a_max * cfg[L.C_B_COMFORT])))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(gap > 0.0, s_star / np.where(gap > 0.0, gap, 1.0), 0.0)
        a_lead = a_max * (1.0 - free_term - ratio * ratio)
        alongside = in_street & (gap <= 0.0) & (est_px >= s[:, L.VEH_X] - half_len)
        a_raw = np.where(in_street & (gap > 0.0), a_lead,
                         np.where(alongside, decel, a_free))
        a_cmd = np.clip(a_raw, decel, a_max)

    # --- kinematics ----------------------------------------------------------
    v1 = v + a_cmd * dt
    stopping = v1 < 0.0
    v1 = np.where(stopping, 0.0, v1)
    disp = np.where(stopping,
                    v * v / (2.0 * np.where(stopping, -a_cmd, 1.0)),
                    v * dt + 0.5 * a_cmd * dt * dt)
    out[:, L.VEH_X] = s[:, L.VEH_X] + disp
    out[:, L.VEH_V] = v1
    out[:, L.VEH_A] = a_cmd
    out[:, L.PED_PX] = s[:, L.PED_PX] + s[:, L.PED_VX] * dt + 0.5 * ped_ax * dt * dt
    out[:, L.PED_PY] = s[:, L.PED_PY] + s[:, L.PED_VY] * dt + 0.5 * ped_ay * dt * dt
    out[:, L.PED_VX] = s[:, L.PED_VX] + ped_ax * dt
    out[:, L.PED_VY] = s[:, L.PED_VY] + ped_ay * dt
    out[:, L.T] = s[:, L.T] + 1.0

    # --- quantization ----------------------------------------------------------
    decimals = cfg[L.C_QUANT]
    if decimals >= 0.0:
        out = _round_half_away(out, decimals)

    # --- collision check and episode bookkeeping -------------------------------
    ddx = np.maximum(np.abs(out[:, L.PED_PX] - out[:, L.VEH_X]) - cfg[L.C_CAR_LEN] / 2.0, 0.0)
    ddy = np.maximum(np.abs(out[:, L.PED_PY]) - cfg[L.C_CAR_W] / 2.0, 0.0)
    dist = np.sqrt(ddx * ddx + ddy * ddy)
    event = dist <= cfg[L.C_PED_R]
    clearance = np.maximum(dist - cfg[L.C_PED_R], 0.0)
    if decimals >= 0.0:
        clearance = _round_half_away(clearance, decimals)
    min_gap = np.minimum(out[:, L.MIN_GAP], clearance)
    out[:, L.MIN_GAP] = min_gap

    # --- transition log-likelihood of the raw action ----------------------------
    loglik = np.zeros(m)
    for i in range(act_dim):
        sig = cfg[L.C_SIGMA0 + i]
        z = a[:, i] / sig
        loglik = loglik - (np.log(sig) + _HALF_LOG_2PI + 0.5 * z * z)

    terminal = event | (out[:, L.T] >= cfg[L.C_HORIZON])
    return out, event, loglik, terminal, min_gap


def _lidar_scan(s: np.ndarray, beam_noise: np.ndarray, cfg: np.ndarray):
    """Ray-cast every beam against the pedestrian disc.

    Returns (readings, detect, end_x, end_y), each (M, n_beams). Noise is
    added only to beams whose noise-free reading is below max_range; noisy
    readings stay within (0, max_range].
    """
    n_beams = int(cfg[L.C_N_BEAMS])
    fov = cfg[L.C_FOV_DEG]
    max_range = cfg[L.C_MAX_RANGE]
    r = cfg[L.C_PED_R]

    ang = np.radians(np.linspace(-fov / 2.0, fov / 2.0, n_beams))
    ca = np.cos(ang)[None, :]
    sa = np.sin(ang)[None, :]

    dx = (s[:, L.PED_PX] - s[:, L.VEH_X])[:, None]
    dy = s[:, L.PED_PY][:, None]
    proj = dx * ca + dy * sa
    perp2 = dx * dx + dy * dy - proj * proj
    disc = r * r - perp2
    hit = disc >= 0.0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = proj - root
    t1 = proj + root
    hit = hit & (t1 > 0.0)
    t_hit = np.maximum(t0, 0.0)
    raw = np.where(hit, np.minimum(t_hit, max_range), max_range)
    detect = raw < max_range
    readings = np.where(detect, raw + beam_noise[:, None], raw)
    readings = np.minimum(np.maximum(readings, 1e-9), max_range)
    end_x = s[:, L.VEH_X][:, None] + readings * ca
    end_y = readings * sa
    return readings, detect, end_x, end_y


def observe(states: np.ndarray, cfg: np.ndarray) -> np.ndarray:
    """Build the policy observation batch from raw state rows."""
    s = np.asarray(states, dtype=np.float64)
    sensor = int(cfg[L.C_SENSOR])
    m = s.shape[0]
    obs = np.empty((m, L.obs_dim(sensor)))
    obs[:, 0] = s[:, L.VEH_X] / L.OBS_X_SCALE
    obs[:, 1] = s[:, L.VEH_V] / cfg[L.C_V_DESIRED]
    obs[:, 2] = s[:, L.PED_PX] / L.OBS_PED_POS_SCALE
    obs[:, 3] = s[:, L.PED_PY] / L.OBS_PED_POS_SCALE
    obs[:, 4] = s[:, L.PED_VX] / L.OBS_PED_VEL_SCALE
    obs[:, 5] = s[:, L.PED_VY] / L.OBS_PED_VEL_SCALE
    obs[:, 6] = s[:, L.T] / cfg[L.C_HORIZON]
    obs[:, 7] = s[:, L.EST_PX] / L.OBS_PED_POS_SCALE
    obs[:, 8] = s[:, L.EST_PY] / L.OBS_PED_POS_SCALE
    if sensor == L.SENSOR_DIRECT:
        obs[:, 9] = s[:, L.EST_VX] / L.OBS_PED_VEL_SCALE
        obs[:, 10] = s[:, L.EST_VY] / L.OBS_PED_VEL_SCALE
    return obs


def gae_scan(rewards: np.ndarray, values: np.ndarray, lengths: np.ndarray,
             bootstrap: np.ndarray, gamma: float, lam: float):
    """Generalized advantage estimation over a padded episode batch.

    rewards/values are (N, T) with rows valid on [0, lengths[i]); bootstrap is
    the value of the state after the final step (zero on terminal episodes).
    Returns (advantages, returns), zero outside the valid region.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n, t_max = rewards.shape
    adv = np.zeros((n, t_max))
    carry = np.zeros(n)
    for t in range(t_max - 1, -1, -1):
        last = t == lengths - 1
        if t + 1 < t_max:
            v_next = np.where(last, bootstrap, values[:, t + 1])
        else:
            v_next = np.where(last, bootstrap, 0.0)
        delta = rewards[:, t] + gamma * v_next - values[:, t]
        # the recursion restarts at each episode's final step, so stale carry
        # values from the padded region never leak in
        carry = np.where(last, delta, delta + gamma * lam * carry)
        adv[:, t] = np.where(t < lengths, carry, 0.0)
    mask = np.arange(t_max)[None, :] < lengths[:, None]
    ret = np.where(mask, adv + values, 0.0)
    return adv, ret
