"""
Shared configuration for the binaural reproduction toolkit.
Aligns with: Simulation → STFT → Filter design → Rendering → Metrics → Reports.
Every value can be overridden with a BSM_<NAME> environment variable.
"""
import os


def _env_float(name: str, default: str) -> float:
    return float(os.environ.get(f"BSM_{name}", default))


def _env_int(name: str, default: str) -> int:
    return int(float(os.environ.get(f"BSM_{name}", default)))


# ================= AUDIO =================
# All signals, HRIRs and renders share one sample rate.
FS = _env_int("FS", "48000")
SPEED_OF_SOUND = _env_float("SPEED_OF_SOUND", "343.0")  # m/s, fixed for the image method too

# ================= ARRAY =================
# Semi-circular array on a rigid sphere, mics on the horizontal plane from +90° to -90°.
NUM_MICS = _env_int("NUM_MICS", "6")
ARRAY_RADIUS = _env_float("ARRAY_RADIUS", "0.10")  # m
# Steering truncation: order >= ceil(e*k*r/2) + margin, never below the minimum.
STEERING_ORDER_MARGIN = _env_int("STEERING_ORDER_MARGIN", "8")
STEERING_MIN_ORDER = _env_int("STEERING_MIN_ORDER", "20")

# ================= HRTF =================
HRTF_SH_ORDER = _env_int("HRTF_SH_ORDER", "30")
# Analytic rigid-sphere head used when no measured HRIR directory is given.
HEAD_RADIUS = _env_float("HEAD_RADIUS", "0.0875")  # m
ANALYTIC_GRID_SIZE = _env_int("ANALYTIC_GRID_SIZE", "1800")
ANALYTIC_IR_LENGTH = _env_int("ANALYTIC_IR_LENGTH", "512")
# Tikhonov loading (relative to the largest squared singular value) for borderline SH fits.
HRTF_FIT_REGULARIZATION = _env_float("HRTF_FIT_REGULARIZATION", "1e-6")
HRTF_FIT_BORDERLINE_COND = _env_float("HRTF_FIT_BORDERLINE_COND", "1e6")

# ================= GRID =================
# Assumed plane-wave directions of the diffuse model (BSM and d-BSM reverberant part).
GRID_SIZE = _env_int("GRID_SIZE", "400")

# ================= STFT =================
STFT_WIN_LEN = _env_int("STFT_WIN_LEN", "1536")  # 0.032 s at 48 kHz
STFT_HOP = _env_int("STFT_HOP", "384")  # 0.008 s at 48 kHz
# Frequency smoothing half-width of the correlation estimate (bins).
CORRELATION_SMOOTHING_BINS = _env_int("CORRELATION_SMOOTHING_BINS", "1")

# ================= FILTERS =================
MAGLS_CUTOFF_HZ = _env_float("MAGLS_CUTOFF_HZ", "1500")
MAGLS_INIT_PHASE_DEG = _env_float("MAGLS_INIT_PHASE_DEG", "90")
MAGLS_TOL = _env_float("MAGLS_TOL", "1e-20")
# Double precision cannot resolve relative changes below this.
MAGLS_TOL_FLOOR = _env_float("MAGLS_TOL_FLOOR", "1e-12")
MAGLS_MAX_ITER = _env_int("MAGLS_MAX_ITER", "100000")
MAGLS_DIVERGENCE_SLACK = _env_float("MAGLS_DIVERGENCE_SLACK", "1e-12")
DESIGN_SNR_DB = _env_float("DESIGN_SNR_DB", "20")
LCMV_LOADING = _env_float("LCMV_LOADING", "1e-6")  # x trace(R_x)/M
# Fallback noise floor for d-BSM when the capture SNR is unknown (x mean trace(R_x)/M).
DBSM_NOISE_FLOOR = _env_float("DBSM_NOISE_FLOOR", "1e-4")

# ================= ROOM =================
MAX_IMAGE_ORDER = _env_int("MAX_IMAGE_ORDER", "40")
# Extra samples appended to room responses so steering/sphere responses do not wrap.
RIR_PADDING = _env_int("RIR_PADDING", "512")

# ================= DESK SCALE =================
# Reduced experiment size used by default; --full-scale restores the Table I values.
DESK_T60 = _env_float("DESK_T60", "0.3")
DESK_MAX_IMAGE_ORDER = _env_int("DESK_MAX_IMAGE_ORDER", "10")
DESK_DURATION = _env_float("DESK_DURATION", "1.0")
DESK_MAGLS_MAX_ITER = _env_int("DESK_MAGLS_MAX_ITER", "300")

# ================= REFERENCE =================
REFERENCE_HOA_ORDER = _env_int("REFERENCE_HOA_ORDER", "14")

# ================= METRICS =================
ITD_MAX_LAG_S = _env_float("ITD_MAX_LAG_S", "0.001")
ITD_LOWPASS_HZ = _env_float("ITD_LOWPASS_HZ", "1500")
ITD_LOWPASS_ORDER = _env_int("ITD_LOWPASS_ORDER", "8")
ERB_NUM_BANDS = _env_int("ERB_NUM_BANDS", "22")
ERB_LOW_HZ = _env_float("ERB_LOW_HZ", "1500")
ERB_HIGH_HZ = _env_float("ERB_HIGH_HZ", "20000")
ITD_JND_S = _env_float("ITD_JND_S", "100e-6")
ILD_JND_DB = _env_float("ILD_JND_DB", "1.0")
NMSE_FLOOR_DB = _env_float("NMSE_FLOOR_DB", "-120")
NMSE_BAND_HZ = (_env_float("NMSE_BAND_LOW_HZ", "2000"), _env_float("NMSE_BAND_HIGH_HZ", "10000"))

# ================= EXPERIMENTS =================
SWEEP_STEP_DEG = _env_float("SWEEP_STEP_DEG", "5")
OUTPUT_DIR = os.environ.get("BSM_OUTPUT_DIR", "runs")
SEED = _env_int("SEED", "1234")
OUTPUT_PEAK_DBFS = _env_float("OUTPUT_PEAK_DBFS", "-3")
CONFIG_SCHEMA_VERSION = 1

# ================= LOGGING =================
LOG_LEVEL = os.environ.get("BSM_LOG_LEVEL", "INFO").upper()
