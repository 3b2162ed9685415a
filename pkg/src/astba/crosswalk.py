"""Pedestrian-crossing scenario with switchable fidelity.

A car governed by a modified intelligent driver model approaches a crosswalk
while a pedestrian crosses. The stress-test action at each step is the
pedestrian acceleration plus sensor-noise channels; fidelity knobs cover the
timestep, horizon, state quantization, the fixed-gain tracker, and the
sensing model (direct noisy measurements or a 2D lidar).

The scalar functions in this module are the readable reference semantics;
stepping goes through the selected backend kernel, which the tests hold to
the same behavior.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import _backend
from ._backend import layout as L
from .core import ConfigMismatchError, Simulator, StepBatch, StepOutcome


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class IdmParams:
    v_desired: float = 11.17
    a_max: float = 2.0
    b_comfort: float = 4.0
    delta: float = 4.0
    s0: float = 2.0
    t_headway: float = 1.5
    decel_limit: float = -8.0


@dataclass(frozen=True)
class LidarConfig:
    n_beams: int = 30
    fov: float = 180.0
    max_range: float = 100.0

    def __post_init__(self):
        if self.n_beams < 2:
            raise ValueError("need at least 2 beams")
        if not 0 < self.fov <= 360:
            raise ValueError("fov must be in (0, 360] degrees")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    """Geometry, initial conditions, SUT parameters, and action likelihood scales.

    action_sigma must match the action dimension of the active sensor model
    (6 for direct sensing, 3 for lidar); leave it None to take the defaults.
    sut_mode "brake" replaces the IDM with a constant full brake, used for
    provably collision-free variants. ped_accel_limit clamps the pedestrian
    acceleration the dynamics accept (the likelihood still scores the raw
    action).
    """

    car_x0: float = -55.0
    car_v0: float = 11.17
    ped_p0: tuple[float, float] = (0.0, -1.85)
    ped_v0: tuple[float, float] = (0.0, 1.0)
    street_y_min: float = -1.85
    street_y_max: float = 5.55
    idm: IdmParams = field(default_factory=IdmParams)
    car_length: float = 4.5
    car_width: float = 2.0
    ped_radius: float = 0.3
    action_sigma: Optional[tuple[float, ...]] = None
    ped_accel_limit: Optional[float] = None
    sut_mode: str = "idm"

    def __post_init__(self):
        if self.street_y_min >= self.street_y_max:
            raise ValueError("street band must have positive width")
        if min(self.car_length, self.car_width, self.ped_radius) <= 0:
            raise ValueError("geometric extents must be positive")
        if self.sut_mode not in ("idm", "brake"):
            raise ValueError(f"unknown sut_mode {self.sut_mode!r}")


@dataclass(frozen=True)
class FidelityConfig:
    dt: float = 0.1
    horizon: int = 50
    quantize_decimals: Optional[int] = None
    tracker_enabled: bool = True
    sensor_model: str = "direct"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.quantize_decimals is not None and self.quantize_decimals < 0:
            raise ValueError("quantize_decimals must be nonnegative")
        if self.sensor_model not in ("direct", "lidar"):
            raise ValueError(f"unknown sensor_model {self.sensor_model!r}")


DEFAULT_SIGMA_DIRECT = (1.0, 1.0, 0.3, 0.3, 0.3, 0.3)
DEFAULT_SIGMA_LIDAR = (1.0, 1.0, 0.5)

# critically damped fixed-gain pair: beta = alpha^2 / (2 - alpha)
TRACKER_ALPHA = 0.85
TRACKER_BETA = TRACKER_ALPHA * TRACKER_ALPHA / (2.0 - TRACKER_ALPHA)

LIDAR_DEFAULT = LidarConfig()


def action_dim(fidelity: FidelityConfig) -> int:
    return L.ACTION_DIM_DIRECT if fidelity.sensor_model == "direct" else L.ACTION_DIM_LIDAR


def observation_dim(fidelity: FidelityConfig) -> int:
    return L.OBS_DIM_DIRECT if fidelity.sensor_model == "direct" else L.OBS_DIM_LIDAR


def resolved_sigma(scenario: ScenarioConfig, fidelity: FidelityConfig) -> tuple[float, ...]:
    if scenario.action_sigma is not None:
        sig = tuple(float(x) for x in scenario.action_sigma)
    elif fidelity.sensor_model == "direct":
        sig = DEFAULT_SIGMA_DIRECT
    else:
        sig = DEFAULT_SIGMA_LIDAR
    if len(sig) != action_dim(fidelity):
        raise ValueError(
            f"action_sigma has {len(sig)} entries, sensor "
            f"{fidelity.sensor_model!r} needs {action_dim(fidelity)}")
    if any(s <= 0 for s in sig):
        raise ValueError("action sigmas must be positive")
    return sig


def scenario_to_json(scenario: ScenarioConfig, fidelity: FidelityConfig,
                     lidar: LidarConfig = LIDAR_DEFAULT) -> str:
    doc = {"scenario": asdict(scenario), "fidelity": asdict(fidelity),
           "lidar": asdict(lidar)}
    return json.dumps(doc, sort_keys=True)


def scenario_from_json(text: str):
    doc = json.loads(text)
    sc = dict(doc["scenario"])
    sc["idm"] = IdmParams(**sc["idm"])
    if sc.get("ped_p0") is not None:
        sc["ped_p0"] = tuple(sc["ped_p0"])
    if sc.get("ped_v0") is not None:
        sc["ped_v0"] = tuple(sc["ped_v0"])
    if sc.get("action_sigma") is not None:
        sc["action_sigma"] = tuple(sc["action_sigma"])
    scenario = ScenarioConfig(**sc)
    fidelity = FidelityConfig(**doc["fidelity"])
    lidar = LidarConfig(**doc.get("lidar", {}))
    return scenario, fidelity, lidar


def build_config_vector(scenario: ScenarioConfig, fidelity: FidelityConfig,
                        lidar: LidarConfig = LIDAR_DEFAULT) -> np.ndarray:
    cfg = np.zeros(L.CONFIG_DIM)
    cfg[L.C_DT] = fidelity.dt
    cfg[L.C_HORIZON] = float(fidelity.horizon)
    cfg[L.C_QUANT] = -1.0 if fidelity.quantize_decimals is None else float(fidelity.quantize_decimals)
    cfg[L.C_TRACKER] = 1.0 if fidelity.tracker_enabled else 0.0
    cfg[L.C_SENSOR] = float(L.SENSOR_DIRECT if fidelity.sensor_model == "direct" else L.SENSOR_LIDAR)
    cfg[L.C_ALPHA] = TRACKER_ALPHA
    cfg[L.C_BETA] = TRACKER_BETA
    idm = scenario.idm
    cfg[L.C_V_DESIRED] = idm.v_desired
    cfg[L.C_A_MAX] = idm.a_max
    cfg[L.C_B_COMFORT] = idm.b_comfort
    cfg[L.C_DELTA] = idm.delta
    cfg[L.C_S0] = idm.s0
    cfg[L.C_T_HEADWAY] = idm.t_headway
    cfg[L.C_DECEL] = idm.decel_limit
    cfg[L.C_CAR_LEN] = scenario.car_length
    cfg[L.C_CAR_W] = scenario.car_width
    cfg[L.C_PED_R] = scenario.ped_radius
    cfg[L.C_STREET_MIN] = scenario.street_y_min
    cfg[L.C_STREET_MAX] = scenario.street_y_max
    cfg[L.C_N_BEAMS] = float(lidar.n_beams)
    cfg[L.C_FOV_DEG] = lidar.fov
    cfg[L.C_MAX_RANGE] = lidar.max_range
    cfg[L.C_ACT_DIM] = float(action_dim(fidelity))
    cfg[L.C_PED_ACC_LIM] = -1.0 if scenario.ped_accel_limit is None else float(scenario.ped_accel_limit)
    cfg[L.C_SUT_MODE] = float(L.SUT_IDM if scenario.sut_mode == "idm" else L.SUT_BRAKE)
    for i, s in enumerate(resolved_sigma(scenario, fidelity)):
        cfg[L.C_SIGMA0 + i] = s
    return cfg


# --- state views ----------------------------------------------------------------


@dataclass
class VehicleState:
    x: float
    v: float
    a: float = 0.0


@dataclass
class PedestrianState:
    p: np.ndarray
    v: np.ndarray


@dataclass
class TrackerState:
    p_hat: np.ndarray
    v_hat: np.ndarray
    initialized: bool


@dataclass
class CrosswalkState:
    """Structured view over one state row."""

    vehicle: VehicleState
    pedestrian: PedestrianState
    tracker: TrackerState
    min_gap: float
    t: int

    @classmethod
    def from_vector(cls, row: np.ndarray) -> "CrosswalkState":
        return cls(
            vehicle=VehicleState(x=row[L.VEH_X], v=row[L.VEH_V], a=row[L.VEH_A]),
            pedestrian=PedestrianState(p=row[[L.PED_PX, L.PED_PY]].copy(),
                                       v=row[[L.PED_VX, L.PED_VY]].copy()),
            tracker=TrackerState(p_hat=row[[L.EST_PX, L.EST_PY]].copy(),
                                 v_hat=row[[L.EST_VX, L.EST_VY]].copy(),
                                 initialized=row[L.EST_VALID] > 0.5),
            min_gap=float(row[L.MIN_GAP]),
            t=int(row[L.T]))


def initial_state_vector(scenario: ScenarioConfig) -> np.ndarray:
    row = np.zeros(L.STATE_DIM)
    row[L.VEH_X] = scenario.car_x0
    row[L.VEH_V] = scenario.car_v0
    row[L.PED_PX], row[L.PED_PY] = scenario.ped_p0
    row[L.PED_VX], row[L.PED_VY] = scenario.ped_v0
    veh = VehicleState(x=scenario.car_x0, v=scenario.car_v0)
    ped = PedestrianState(p=np.array(scenario.ped_p0), v=np.array(scenario.ped_v0))
    _, gap = collision_check(veh, ped, scenario)
    row[L.MIN_GAP] = gap
    return row


# --- scalar reference operations ---------------------------------------------


def idm_acceleration(veh: VehicleState, lead_gap: Optional[float],
                     lead_speed: Optional[float], params: IdmParams) -> float:
    """Modified-IDM acceleration, clamped to [decel_limit, a_max].

    With no lead only the free-road term applies. lead_gap is measured from
    the front bumper to the obstacle and must be positive.
    """
    free = params.a_max * (1.0 - (veh.v / params.v_desired) ** params.delta)
    if lead_gap is None:
        raw = free
    else:
        if lead_gap <= 0:
            raise ValueError(f"lead gap must be positive, got {lead_gap}")
        dv = veh.v - (lead_speed if lead_speed is not None else 0.0)
        s_star = (params.s0 + veh.v * params.t_headway
                  + veh.v * dv / (2.0 * math.sqrt(params.a_max * params.b_comfort)))
        raw = free - params.a_max * (s_star / lead_gap) ** 2
    return min(max(raw, params.decel_limit), params.a_max)


def pedestrian_in_street(ped: PedestrianState, cfg: ScenarioConfig) -> bool:
    """Strict band membership, so a pedestrian exactly on the edge is outside."""
    return cfg.street_y_min < ped.p[1] < cfg.street_y_max


def kinematic_step(ped: PedestrianState, accel: np.ndarray, dt: float) -> PedestrianState:
    accel = np.asarray(accel, dtype=np.float64)
    if dt <= 0:
        raise ValueError("dt must be positive")
    return PedestrianState(p=ped.p + ped.v * dt + 0.5 * accel * dt * dt,
                           v=ped.v + accel * dt)


def vehicle_kinematic_step(veh: VehicleState, accel: float, dt: float) -> VehicleState:
    """Double-integrator update; the vehicle never reverses, so a braking
    vehicle stops exactly (displacement v^2/2|a|) instead of creeping back."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    v1 = veh.v + accel * dt
    if v1 < 0.0:
        disp = veh.v * veh.v / (2.0 * -accel)
        v1 = 0.0
    else:
        disp = veh.v * dt + 0.5 * accel * dt * dt
    return VehicleState(x=veh.x + disp, v=v1, a=accel)


@dataclass
class Measurement:
    rel_position: np.ndarray
    velocity: np.ndarray


def sense_direct(ped: PedestrianState, veh: VehicleState, noise: np.ndarray) -> Measurement:
    """Truth plus additive noise: channels 0-1 perturb the relative position,
    channels 2-3 the velocity."""
    noise = np.asarray(noise, dtype=np.float64)
    rel = ped.p - np.array([veh.x, 0.0])
    return Measurement(rel_position=rel + noise[:2], velocity=ped.v + noise[2:4])


@dataclass
class LidarScan:
    readings: np.ndarray
    est_position: Optional[np.ndarray]


def sense_lidar(ped: PedestrianState, veh: VehicleState, beam_noise: float,
                cfg: LidarConfig, ped_radius: float = 0.3) -> LidarScan:
    """Cast n_beams rays across the field of view against the pedestrian disc.

    Noise is added only to beams whose noise-free reading is below max_range;
    est_position is the centroid of the detecting beams' endpoints, or None
    when nothing detects.
    """
    row = np.zeros(L.STATE_DIM)
    row[L.VEH_X] = veh.x
    row[L.PED_PX], row[L.PED_PY] = ped.p
    kcfg = np.zeros(L.CONFIG_DIM)
    kcfg[L.C_N_BEAMS] = float(cfg.n_beams)
    kcfg[L.C_FOV_DEG] = cfg.fov
    kcfg[L.C_MAX_RANGE] = cfg.max_range
    kcfg[L.C_PED_R] = ped_radius
    from ._backend import reference
    readings, detect, end_x, end_y = reference._lidar_scan(
        row[None, :], np.array([beam_noise]), kcfg)
    if not detect.any():
        return LidarScan(readings=readings[0], est_position=None)
    est = np.array([end_x[0][detect[0]].mean(), end_y[0][detect[0]].mean()])
    return LidarScan(readings=readings[0], est_position=est)


def tracker_update(trk: TrackerState, z_position: np.ndarray, dt: float,
                   alpha: float, beta: float,
                   z_velocity: Optional[np.ndarray] = None) -> TrackerState:
    """One fixed-gain predict/correct cycle per axis.

    The first measurement initializes the position estimate directly; the
    velocity estimate starts at the measured velocity when one is available
    (direct sensing) and at zero otherwise (lidar centroids).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not 0 < alpha < 1 or beta <= 0:
        raise ValueError("need 0 < alpha < 1 and beta > 0")
    z = np.asarray(z_position, dtype=np.float64)
    if not trk.initialized:
        v0 = np.zeros(2) if z_velocity is None else np.asarray(z_velocity, dtype=np.float64)
        return TrackerState(p_hat=z.copy(), v_hat=v0.copy(), initialized=True)
    p_pred = trk.p_hat + trk.v_hat * dt
    r = z - p_pred
    return TrackerState(p_hat=p_pred + alpha * r,
                        v_hat=trk.v_hat + (beta / dt) * r,
                        initialized=True)


def collision_check(veh: VehicleState, ped: PedestrianState,
                    cfg: ScenarioConfig) -> tuple[bool, float]:
    """Disc-vs-rectangle test. The vehicle is an axis-aligned car_length x
    car_width box centered at (x, 0); contact on the inflated boundary counts
    as a collision. Returns (event, clearance)."""
    ddx = max(abs(ped.p[0] - veh.x) - cfg.car_length / 2.0, 0.0)
    ddy = max(abs(ped.p[1]) - cfg.car_width / 2.0, 0.0)
    dist = math.sqrt(ddx * ddx + ddy * ddy)
    return dist <= cfg.ped_radius, max(dist - cfg.ped_radius, 0.0)


def quantize_value(x: float, decimals: int) -> float:
    """Round half away from zero."""
    f = 10.0 ** decimals
    return math.copysign(math.floor(abs(x) * f + 0.5) / f, x) if x != 0.0 else 0.0


def quantize_state(row: np.ndarray, decimals: int) -> np.ndarray:
    """Quantize every stored component of a state row (idempotent)."""
    if decimals < 0:
        raise ValueError("decimals must be nonnegative")
    from ._backend import reference
    return reference._round_half_away(np.asarray(row, dtype=np.float64), float(decimals))


# --- simulators -------------------------------------------------------------------

_SNAP_MAGIC = b"XWK1"


class CrosswalkBatchEnv:
    """Vectorized stepping over M independent instances of one configuration.

    Rows are (STATE_DIM,) float64 vectors; stepping M rows is bit-identical
    to stepping them one at a time. The step counter counts every row of
    every step() call and nothing else.
    """

    def __init__(self, scenario: ScenarioConfig, fidelity: FidelityConfig,
                 lidar: LidarConfig = LIDAR_DEFAULT):
        self.scenario = scenario
        self.fidelity = fidelity
        self.lidar = lidar
        self.cfg = build_config_vector(scenario, fidelity, lidar)
        self.action_dim = action_dim(fidelity)
        self.obs_dim = observation_dim(fidelity)
        self.horizon = fidelity.horizon
        self._fingerprint = hashlib.sha256(
            scenario_to_json(scenario, fidelity, lidar).encode()).digest()[:8]
        self._steps = 0
        self._kernel = _backend.active

    def initial_rows(self, n: int) -> np.ndarray:
        row = initial_state_vector(self.scenario)
        if self.fidelity.quantize_decimals is not None:
            # quantized runs must start from a quantized state, with the
            # clearance bookkeeping recomputed from the rounded geometry
            d = self.fidelity.quantize_decimals
            row = quantize_state(row, d)
            veh = VehicleState(x=row[L.VEH_X], v=row[L.VEH_V])
            ped = PedestrianState(p=row[[L.PED_PX, L.PED_PY]],
                                  v=row[[L.PED_VX, L.PED_VY]])
            _, gap = collision_check(veh, ped, self.scenario)
            row[L.MIN_GAP] = quantize_value(gap, d)
        return np.tile(row, (n, 1))

    def observe(self, states: np.ndarray) -> np.ndarray:
        return self._kernel.observe(states, self.cfg)

    def step(self, states: np.ndarray, actions: np.ndarray):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim != 2 or actions.shape[1] != self.action_dim:
            raise ValueError(
                f"expected actions of dimension {self.action_dim}, "
                f"got shape {actions.shape}")
        out, event, loglik, terminal, miss = self._kernel.crosswalk_step(
            states, actions, self.cfg)
        self._steps += states.shape[0]
        return out, StepBatch(event=event, log_likelihood=loglik,
                              terminal=terminal, miss_distance=miss,
                              t=out[:, L.T].astype(np.int64))

    def max_episode_steps(self, start_row: np.ndarray) -> int:
        return max(1, self.horizon - int(start_row[L.T]))

    def steps_taken(self) -> int:
        return self._steps

    def snapshot_row(self, row: np.ndarray) -> bytes:
        return _SNAP_MAGIC + self._fingerprint + np.ascontiguousarray(row, dtype=np.float64).tobytes()

    def restore_row(self, blob: bytes) -> np.ndarray:
        if len(blob) != len(_SNAP_MAGIC) + 8 + 8 * L.STATE_DIM or not blob.startswith(_SNAP_MAGIC):
            raise ConfigMismatchError("not a crosswalk snapshot")
        if blob[len(_SNAP_MAGIC):len(_SNAP_MAGIC) + 8] != self._fingerprint:
            raise ConfigMismatchError(
                "snapshot was taken under a different scenario/fidelity configuration")
        return np.frombuffer(blob[len(_SNAP_MAGIC) + 8:], dtype=np.float64).copy()


class CrosswalkSimulator(Simulator):
    """Single-instance view satisfying the black-box simulator contract."""

    def __init__(self, scenario: ScenarioConfig = ScenarioConfig(),
                 fidelity: FidelityConfig = FidelityConfig(),
                 lidar: LidarConfig = LIDAR_DEFAULT):
        self.env = CrosswalkBatchEnv(scenario, fidelity, lidar)
        self._row = None
        self._terminal = True

    @property
    def scenario(self) -> ScenarioConfig:
        return self.env.scenario

    @property
    def fidelity(self) -> FidelityConfig:
        return self.env.fidelity

    @property
    def action_dim(self) -> int:
        return self.env.action_dim

    def reset(self, seed: int = 0) -> CrosswalkState:
        # dynamics are deterministic given the action sequence; the seed is
        # accepted for contract compatibility
        self._row = self.env.initial_rows(1)[0]
        self._terminal = False
        return self.state

    @property
    def state(self) -> CrosswalkState:
        return CrosswalkState.from_vector(self._row)

    def state_vector(self) -> np.ndarray:
        return self._row.copy()

    def observe(self) -> np.ndarray:
        return self.env.observe(self._row[None, :])[0]

    def step(self, action: np.ndarray) -> StepOutcome:
        if self._row is None:
            raise RuntimeError("call reset() before step()")
        if self._terminal:
            raise RuntimeError("episode is terminal; reset() or restore() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.env.action_dim,):
            raise ValueError(
                f"expected action of dimension {self.env.action_dim}, "
                f"got shape {action.shape}")
        out, sb = self.env.step(self._row[None, :], action[None, :])
        self._row = out[0]
        self._terminal = bool(sb.terminal[0])
        return StepOutcome(event=bool(sb.event[0]),
                           log_likelihood=float(sb.log_likelihood[0]),
                           terminal=bool(sb.terminal[0]),
                           miss_distance=float(sb.miss_distance[0]))

    def snapshot(self) -> bytes:
        return self.env.snapshot_row(self._row)

    def restore(self, blob: bytes) -> None:
        self._row = self.env.restore_row(blob)
        horizon = self.env.fidelity.horizon
        veh = VehicleState(x=self._row[L.VEH_X], v=self._row[L.VEH_V])
        ped = PedestrianState(p=self._row[[L.PED_PX, L.PED_PY]],
                              v=self._row[[L.PED_VX, L.PED_VY]])
        event, _ = collision_check(veh, ped, self.env.scenario)
        self._terminal = bool(event or self._row[L.T] >= horizon)

    def steps_taken(self) -> int:
        return self.env.steps_taken()
