# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled stepping kernels.

Scalar-loop mirror of astba._backend.reference; the layout constants below
must match layout.py (guarded by LAYOUT_VERSION and the backend equivalence
tests).
"""

from libc.math cimport sqrt, pow, log, fabs, floor, cos, sin, fmin, fmax, copysign

import numpy as np

cimport numpy as cnp

cnp.import_array()

LAYOUT_VERSION = 1
NAME = "compiled"

cdef enum:
    VEH_X = 0
    VEH_V = 1
    VEH_A = 2
    PED_PX = 3
    PED_PY = 4
    PED_VX = 5
    PED_VY = 6
    EST_PX = 7
    EST_PY = 8
    EST_VX = 9
    EST_VY = 10
    EST_VALID = 11
    CENT_PX = 12
    CENT_PY = 13
    CENT_VALID = 14
    MIN_GAP = 15
    T_SLOT = 16
    STATE_DIM = 17

cdef enum:
    C_DT = 0
    C_HORIZON = 1
    C_QUANT = 2
    C_TRACKER = 3
    C_SENSOR = 4
    C_ALPHA = 5
    C_BETA = 6
    C_V_DESIRED = 7
    C_A_MAX = 8
    C_B_COMFORT = 9
    C_DELTA = 10
    C_S0 = 11
    C_T_HEADWAY = 12
    C_DECEL = 13
    C_CAR_LEN = 14
    C_CAR_W = 15
    C_PED_R = 16
    C_STREET_MIN = 17
    C_STREET_MAX = 18
    C_N_BEAMS = 19
    C_FOV_DEG = 20
    C_MAX_RANGE = 21
    C_ACT_DIM = 22
    C_PED_ACC_LIM = 23
    C_SUT_MODE = 24
    C_SIGMA0 = 25

cdef double HALF_LOG_2PI = 0.5 * log(2.0 * 3.141592653589793)


cdef inline double round_half_away(double x, double f) noexcept nogil:
    if x == 0.0:
        return 0.0
    return copysign(floor(fabs(x) * f + 0.5) / f, x)


def crosswalk_step(states, actions, cfg):
    """See reference.crosswalk_step; identical contract."""
    cdef double[:, :] s = np.ascontiguousarray(states, dtype=np.float64)
    cdef double[:, :] a = np.ascontiguousarray(actions, dtype=np.float64)
    cdef double[:] c = np.ascontiguousarray(cfg, dtype=np.float64)
    cdef Py_ssize_t m = s.shape[0]
    cdef int act_dim = <int> c[C_ACT_DIM]
    if a.shape[0] != m or a.shape[1] != act_dim:
        raise ValueError(
            f"action batch shape {tuple(np.asarray(actions).shape)} does not "
            f"match expected ({m}, {act_dim})")

    out_arr = np.empty((m, STATE_DIM), dtype=np.float64)
    ev_arr = np.empty(m, dtype=np.uint8)
    ll_arr = np.empty(m, dtype=np.float64)
    term_arr = np.empty(m, dtype=np.uint8)
    miss_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[::1] ev = ev_arr
    cdef double[::1] ll = ll_arr
    cdef unsigned char[::1] term = term_arr
    cdef double[::1] miss = miss_arr

    cdef double dt = c[C_DT]
    cdef int sensor = <int> c[C_SENSOR]
    cdef int tracker = 1 if c[C_TRACKER] > 0.5 else 0
    cdef int brake = 1 if <int> c[C_SUT_MODE] == 1 else 0
    cdef double acc_lim = c[C_PED_ACC_LIM]
    cdef double alpha = c[C_ALPHA]
    cdef double beta = c[C_BETA]
    cdef double v_des = c[C_V_DESIRED]
    cdef double a_max = c[C_A_MAX]
    cdef double b_comf = c[C_B_COMFORT]
    cdef double delta_exp = c[C_DELTA]
    cdef double s0 = c[C_S0]
    cdef double t_head = c[C_T_HEADWAY]
    cdef double decel = c[C_DECEL]
    cdef double car_len = c[C_CAR_LEN]
    cdef double car_w = c[C_CAR_W]
    cdef double ped_r = c[C_PED_R]
    cdef double street_min = c[C_STREET_MIN]
    cdef double street_max = c[C_STREET_MAX]
    cdef double decimals = c[C_QUANT]
    cdef double horizon = c[C_HORIZON]
    cdef double half_len = car_len / 2.0
    cdef double qf = 0.0
    cdef int quant = 0
    if decimals >= 0.0:
        quant = 1
        qf = pow(10.0, decimals)

    # beam angles computed with the same numpy routines as the fallback
    cdef int n_beams = <int> c[C_N_BEAMS]
    cdef double max_range = c[C_MAX_RANGE]
    cdef double[::1] ca
    cdef double[::1] sa
    if sensor == 1:
        ang = np.radians(np.linspace(-c[C_FOV_DEG] / 2.0, c[C_FOV_DEG] / 2.0, n_beams))
        ca = np.cos(ang)
        sa = np.sin(ang)
    else:
        ca = np.empty(0, dtype=np.float64)
        sa = np.empty(0, dtype=np.float64)

    cdef Py_ssize_t i, b, k
    cdef double ped_ax, ped_ay, meas_px, meas_py, meas_vx, meas_vy
    cdef int meas_valid, est_valid, in_street, have_est
    cdef double dx, dy, proj, perp2, disc, root, t0, t1, t_hit, raw_b, reading
    cdef double sum_x, sum_y, cnt, noise
    cdef double pred_x, pred_y, rx, ry
    cdef double v, v1, a_cmd, a_raw, free_term, a_free, s_star, ratio, gap, disp
    cdef double est_px, est_py, est_vx, est_vy
    cdef double ddx, ddy, dist, clearance, min_gap, lik, sig, z, t_new

    for i in range(m):
        for k in range(STATE_DIM):
            out[i, k] = s[i, k]

        ped_ax = a[i, 0]
        ped_ay = a[i, 1]
        if acc_lim >= 0.0:
            ped_ax = fmin(fmax(ped_ax, -acc_lim), acc_lim)
            ped_ay = fmin(fmax(ped_ay, -acc_lim), acc_lim)

        # --- sense ---
        meas_px = 0.0
        meas_py = 0.0
        meas_vx = 0.0
        meas_vy = 0.0
        if sensor == 0:
            meas_px = s[i, PED_PX] + a[i, 2]
            meas_py = s[i, PED_PY] + a[i, 3]
            meas_vx = s[i, PED_VX] + a[i, 4]
            meas_vy = s[i, PED_VY] + a[i, 5]
            meas_valid = 1
        else:
            noise = a[i, 2]
            dx = s[i, PED_PX] - s[i, VEH_X]
            dy = s[i, PED_PY]
            sum_x = 0.0
            sum_y = 0.0
            cnt = 0.0
            for b in range(n_beams):
                proj = dx * ca[b] + dy * sa[b]
                perp2 = dx * dx + dy * dy - proj * proj
                disc = ped_r * ped_r - perp2
                raw_b = max_range
                if disc >= 0.0:
                    root = sqrt(disc)
                    t0 = proj - root
                    t1 = proj + root
                    if t1 > 0.0:
                        t_hit = fmax(t0, 0.0)
                        raw_b = fmin(t_hit, max_range)
                if raw_b < max_range:
                    reading = fmin(fmax(raw_b + noise, 1e-9), max_range)
                    cnt += 1.0
                    sum_x += s[i, VEH_X] + reading * ca[b]
                    sum_y += reading * sa[b]
            meas_valid = 1 if cnt > 0.0 else 0
            if meas_valid:
                meas_px = sum_x / cnt
                meas_py = sum_y / cnt
                if s[i, CENT_VALID] > 0.5:
                    meas_vx = (meas_px - s[i, CENT_PX]) / dt
                    meas_vy = (meas_py - s[i, CENT_PY]) / dt
                out[i, CENT_PX] = meas_px
                out[i, CENT_PY] = meas_py
                out[i, CENT_VALID] = 1.0
            else:
                out[i, CENT_VALID] = 0.0

        # --- estimate update ---
        est_valid = 1 if s[i, EST_VALID] > 0.5 else 0
        if tracker:
            if meas_valid and not est_valid:
                out[i, EST_PX] = meas_px
                out[i, EST_PY] = meas_py
                if sensor == 0:
                    out[i, EST_VX] = meas_vx
                    out[i, EST_VY] = meas_vy
                else:
                    out[i, EST_VX] = 0.0
                    out[i, EST_VY] = 0.0
                out[i, EST_VALID] = 1.0
            elif meas_valid and est_valid:
                pred_x = s[i, EST_PX] + s[i, EST_VX] * dt
                pred_y = s[i, EST_PY] + s[i, EST_VY] * dt
                rx = meas_px - pred_x
                ry = meas_py - pred_y
                out[i, EST_PX] = pred_x + alpha * rx
                out[i, EST_PY] = pred_y + alpha * ry
                out[i, EST_VX] = s[i, EST_VX] + (beta / dt) * rx
                out[i, EST_VY] = s[i, EST_VY] + (beta / dt) * ry
                out[i, EST_VALID] = 1.0
            elif est_valid:
                out[i, EST_PX] = s[i, EST_PX] + s[i, EST_VX] * dt
                out[i, EST_PY] = s[i, EST_PY] + s[i, EST_VY] * dt
                out[i, EST_VALID] = 1.0
            else:
                out[i, EST_VALID] = 0.0
        else:
            if meas_valid:
                out[i, EST_PX] = meas_px
                out[i, EST_PY] = meas_py
                out[i, EST_VX] = meas_vx
                out[i, EST_VY] = meas_vy
                out[i, EST_VALID] = 1.0
            else:
                out[i, EST_VALID] = 0.0

        # --- SUT acceleration ---
        v = s[i, VEH_V]
        free_term = pow(v / v_des, delta_exp)
        a_free = a_max * (1.0 - free_term)
        if brake:
            a_cmd = decel
        else:
            est_px = out[i, EST_PX]
            est_py = out[i, EST_PY]
            est_vx = out[i, EST_VX]
            have_est = 1 if out[i, EST_VALID] > 0.5 else 0
            in_street = 1 if (have_est and street_min < est_py and est_py < street_max) else 0
            gap = est_px - s[i, VEH_X] - half_len
            if in_street and gap > 0.0:
                s_star = s0 + v * t_head + v * (v - est_vx) / (2.0 * sqrt(a_max * b_comf))
                ratio = s_star / gap
                a_raw = a_max * (1.0 - free_term - ratio * ratio)
            elif in_street and gap <= 0.0 and est_px >= s[i, VEH_X] - half_len:
                a_raw = decel
            else:
                a_raw = a_free
            a_cmd = fmin(fmax(a_raw, decel), a_max)

        # --- kinematics ---
        v1 = v + a_cmd * dt
        if v1 < 0.0:
            v1 = 0.0
            disp = v * v / (2.0 * -a_cmd)
        else:
            disp = v * dt + 0.5 * a_cmd * dt * dt
        out[i, VEH_X] = s[i, VEH_X] + disp
        out[i, VEH_V] = v1
        out[i, VEH_A] = a_cmd
        out[i, PED_PX] = s[i, PED_PX] + s[i, PED_VX] * dt + 0.5 * ped_ax * dt * dt
        out[i, PED_PY] = s[i, PED_PY] + s[i, PED_VY] * dt + 0.5 * ped_ay * dt * dt
        out[i, PED_VX] = s[i, PED_VX] + ped_ax * dt
        out[i, PED_VY] = s[i, PED_VY] + ped_ay * dt
        out[i, T_SLOT] = s[i, T_SLOT] + 1.0

        if quant:
            for k in range(STATE_DIM):
                out[i, k] = round_half_away(out[i, k], qf)

        # --- collision check ---
        ddx = fmax(fabs(out[i, PED_PX] - out[i, VEH_X]) - half_len, 0.0)
        ddy = fmax(fabs(out[i, PED_PY]) - car_w / 2.0, 0.0)
        dist = sqrt(ddx * ddx + ddy * ddy)
        ev[i] = 1 if dist <= ped_r else 0
        clearance = fmax(dist - ped_r, 0.0)
        if quant:
            clearance = round_half_away(clearance, qf)
        min_gap = fmin(out[i, MIN_GAP], clearance)
        out[i, MIN_GAP] = min_gap
        miss[i] = min_gap

        # --- action log-likelihood ---
        lik = 0.0
        for k in range(act_dim):
            sig = c[C_SIGMA0 + k]
            z = a[i, k] / sig
            lik = lik - (log(sig) + HALF_LOG_2PI + 0.5 * z * z)
        ll[i] = lik

        t_new = out[i, T_SLOT]
        term[i] = 1 if (ev[i] or t_new >= horizon) else 0

    return out_arr, ev_arr.view(np.bool_), ll_arr, term_arr.view(np.bool_), miss_arr


def observe(states, cfg):
    """See reference.observe; identical contract."""
    cdef double[:, :] s = np.ascontiguousarray(states, dtype=np.float64)
    cdef double[:] c = np.ascontiguousarray(cfg, dtype=np.float64)
    cdef Py_ssize_t m = s.shape[0]
    cdef int sensor = <int> c[C_SENSOR]
    cdef int dim = 11 if sensor == 0 else 9
    obs_arr = np.empty((m, dim), dtype=np.float64)
    cdef double[:, ::1] obs = obs_arr
    cdef double v_des = c[C_V_DESIRED]
    cdef double horizon = c[C_HORIZON]
    cdef Py_ssize_t i
    for i in range(m):
        obs[i, 0] = s[i, VEH_X] / 100.0
        obs[i, 1] = s[i, VEH_V] / v_des
        obs[i, 2] = s[i, PED_PX] / 10.0
        obs[i, 3] = s[i, PED_PY] / 10.0
        obs[i, 4] = s[i, PED_VX] / 2.0
        obs[i, 5] = s[i, PED_VY] / 2.0
        obs[i, 6] = s[i, T_SLOT] / horizon
        obs[i, 7] = s[i, EST_PX] / 10.0
        obs[i, 8] = s[i, EST_PY] / 10.0
        if sensor == 0:
            obs[i, 9] = s[i, EST_VX] / 2.0
            obs[i, 10] = s[i, EST_VY] / 2.0
    return obs_arr


def gae_scan(rewards, values, lengths, bootstrap, double gamma, double lam):
    """See reference.gae_scan; identical contract."""
    cdef double[:, :] r = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef double[:, :] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef cnp.int64_t[:] ln = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef double[:] bs = np.ascontiguousarray(bootstrap, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0]
    cdef Py_ssize_t t_max = r.shape[1]
    adv_arr = np.zeros((n, t_max), dtype=np.float64)
    ret_arr = np.zeros((n, t_max), dtype=np.float64)
    cdef double[:, ::1] adv = adv_arr
    cdef double[:, ::1] ret = ret_arr
    cdef Py_ssize_t i, t
    cdef double carry, delta, v_next
    for i in range(n):
        carry = 0.0
        for t in range(ln[i] - 1, -1, -1):
            if t == ln[i] - 1:
                v_next = bs[i]
            else:
                v_next = v[i, t + 1]
            delta = r[i, t] + gamma * v_next - v[i, t]
            if t == ln[i] - 1:
                carry = delta
            else:
                carry = delta + gamma * lam * carry
            adv[i, t] = carry
            ret[i, t] = carry + v[i, t]
    return adv_arr, ret_arr
