"""Flat array layouts shared by the stepping kernels.

Both backends (numpy reference and the compiled extension) operate on the
same float64 vectors. The compiled module hardcodes these slot numbers, so
any change here must bump LAYOUT_VERSION and be mirrored in _fast.pyx;
test_backends.py cross-checks the two implementations element by element.
"""

LAYOUT_VERSION = 1

# --- simulator state vector ------------------------------------------------
VEH_X = 0        # vehicle longitudinal position, m (crosswalk at x = 0)
VEH_V = 1        # vehicle speed, m/s (never negative)
VEH_A = 2        # vehicle acceleration applied last step, m/s^2
PED_PX = 3       # pedestrian position, m
PED_PY = 4
PED_VX = 5       # pedestrian velocity, m/s
PED_VY = 6
EST_PX = 7       # SUT's pedestrian estimate (tracker state or raw measurement)
EST_PY = 8
EST_VX = 9
EST_VY = 10
EST_VALID = 11   # 0/1 flag: estimate initialized
CENT_PX = 12     # previous lidar centroid (for finite-difference velocity)
CENT_PY = 13
CENT_VALID = 14  # 0/1 flag
MIN_GAP = 15     # smallest vehicle-pedestrian clearance seen this episode, m
T = 16           # step count since reset (stored as float, exact for < 2^53)
STATE_DIM = 17

# --- kernel config vector ---------------------------------------------------
C_DT = 0
C_HORIZON = 1
C_QUANT = 2          # decimals to round to, -1 disables quantization
C_TRACKER = 3        # 0/1
C_SENSOR = 4         # 0 direct, 1 lidar
C_ALPHA = 5          # tracker position gain
C_BETA = 6           # tracker velocity gain
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
C_PED_ACC_LIM = 23   # per-axis |accel| clamp on pedestrian, -1 disables
C_SUT_MODE = 24      # 0 modified IDM, 1 constant emergency brake
C_SIGMA0 = 25        # action likelihood sigmas, C_SIGMA0 .. C_SIGMA0+5
CONFIG_DIM = 31

SENSOR_DIRECT = 0
SENSOR_LIDAR = 1
SUT_IDM = 0
SUT_BRAKE = 1

ACTION_DIM_DIRECT = 6   # 2 pedestrian accel + 4 measurement noise channels
ACTION_DIM_LIDAR = 3    # 2 pedestrian accel + 1 shared beam noise

# --- observation encoding ----------------------------------------------------
# base: [veh_x/XS, veh_v/v_desired, ped_px/PS, ped_py/PS, ped_vx/VS, ped_vy/VS,
#        t/horizon]; direct sensor appends the 4 estimate slots (same scales),
# lidar appends the 2 estimate position slots.
OBS_X_SCALE = 100.0
OBS_PED_POS_SCALE = 10.0
OBS_PED_VEL_SCALE = 2.0
OBS_DIM_DIRECT = 11
OBS_DIM_LIDAR = 9


def action_dim(sensor_code: int) -> int:
    return ACTION_DIM_DIRECT if sensor_code == SENSOR_DIRECT else ACTION_DIM_LIDAR


def obs_dim(sensor_code: int) -> int:
    return OBS_DIM_DIRECT if sensor_code == SENSOR_DIRECT else OBS_DIM_LIDAR
