"""
Binaural filter designs: diffuse-field BSM (LS below the MagLS cutoff, MagLS above),
the LCMV beamformer, COMPASS-BSM composition and directional BSM with informed
source statistics.

Filters are conjugate-applied: ear signal p[f] = c[f]^H x[f]. Coefficient arrays are
[F, M, 2] with the last axis (left, right).
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from . import config
from . import sh_core
from .sh_core import ArrayGeometry, Direction, HrtfSet, SteeringMatrix
from .spectral import SpatialCorrelation, TimeFreqSignal, estimate_correlation, istft, outer_products, smooth_bins, stft

logger = logging.getLogger(__name__)

METHODS = ("BSM", "COM", "DBSM")
EARS = ("left", "right")


class RankDeficientSteeringError(ValueError):
    """Direct-source steering matrix without full column rank at some frequency."""

    def __init__(self, frequency: float, rank: int, num_sources: int):
        self.frequency = frequency
        super().__init__(
            f"Direct-source steering matrix has rank {rank} < {num_sources} at {frequency:.1f} Hz; "
            "the assumed directions are not separable by the array there"
        )


class SingularSystemError(ValueError):
    """A filter normal-equation matrix could not be solved."""


class MagLsDivergenceError(RuntimeError):
    """MagLS objective increased between iterations."""

    def __init__(self, message: str, objectives: np.ndarray):
        self.objectives = objectives
        super().__init__(message)


# ================= TYPES =================

@dataclass
class BinauralFilterBank:
    method: str
    freqs: np.ndarray
    coefficients: np.ndarray  # complex [F, M, 2]
    magls_cutoff: float = config.MAGLS_CUTOFF_HZ
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"Unknown filter method '{self.method}', expected one of {METHODS}")
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.coefficients = np.asarray(self.coefficients, dtype=complex)
        c = self.coefficients
        if c.ndim != 3 or c.shape[0] != self.freqs.size or c.shape[2] != 2:
            raise ValueError(f"Coefficients must be [F={self.freqs.size}, M, 2], got {c.shape}")
        if not np.all(np.isfinite(c)):
            bad = self.freqs[~np.all(np.isfinite(c), axis=(1, 2))]
            raise ValueError(f"Filter bank has non-finite coefficients at {bad[:5].tolist()} Hz")

    @property
    def num_mics(self) -> int:
        return self.coefficients.shape[1]

    def apply(self, tf: TimeFreqSignal) -> TimeFreqSignal:
        """Per-bin ear signals c^H x; returns a two-channel TimeFreqSignal."""
        if tf.num_bins != self.freqs.size or not np.allclose(tf.freqs, self.freqs):
            raise ValueError(f"Filter bank has {self.freqs.size} bins, the capture has {tf.num_bins}")
        if tf.num_channels != self.num_mics:
            raise ValueError(f"Filter bank expects {self.num_mics} mics, the capture has {tf.num_channels}")
        return tf.with_frames(np.einsum("fme,tfm->tfe", self.coefficients.conj(), tf.frames))


@dataclass(frozen=True)
class SourceStatistics:
    r_sd: np.ndarray  # [F, D, D]
    sigma_r2: np.ndarray  # [F]
    sigma_n2: float

    def __post_init__(self):
        r_sd = np.asarray(self.r_sd, dtype=complex)
        sigma_r2 = np.asarray(self.sigma_r2, dtype=float)
        if r_sd.ndim != 3 or r_sd.shape[1] != r_sd.shape[2] or r_sd.shape[0] != sigma_r2.size:
            raise ValueError(f"Inconsistent statistics shapes: R_sd {r_sd.shape}, sigma_r2 {sigma_r2.shape}")
        if np.any(sigma_r2 < 0) or self.sigma_n2 < 0:
            raise ValueError("Residual and noise variances must be >= 0")
        object.__setattr__(self, "r_sd", r_sd)
        object.__setattr__(self, "sigma_r2", sigma_r2)

    @property
    def num_sources(self) -> int:
        return self.r_sd.shape[1]


@dataclass
class MagLsSolution:
    coefficients: np.ndarray
    objectives: np.ndarray  # objective trace, iteration axis first
    iterations: np.ndarray
    converged: np.ndarray


# ================= LEAST SQUARES =================

def _as_ears(h: np.ndarray) -> Tuple[np.ndarray, bool]:
    h = np.asarray(h, dtype=complex)
    return (h[:, None], True) if h.ndim == 1 else (h, False)


def _hermitian_solve(a: np.ndarray, b: np.ndarray, context: str) -> np.ndarray:
    try:
        return linalg.solve(a, b, assume_a="her")
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"{context}: {exc}. Increase the regularization (SNR or noise floor).") from exc


def bsm_ls(V: np.ndarray, h: np.ndarray, snr: float) -> np.ndarray:
    """c = (V V^H + I/snr)^-1 V h* at one frequency; h is [L] or [L, ears]."""
    if not (snr > 0):
        raise ValueError(f"SNR must be > 0 (linear), got {snr}")
    V = np.asarray(V, dtype=complex)
    hh, single = _as_ears(h)
    gram = V @ V.conj().T + np.eye(V.shape[0]) / snr
    c = _hermitian_solve(gram, V @ hh.conj(), "BSM normal equations")
    return c[:, 0] if single else c


def _magls_objective(A_h: np.ndarray, c: np.ndarray, target: np.ndarray, reg: np.ndarray) -> np.ndarray:
    y = np.abs(A_h @ c)
    return np.sum((y - target) ** 2, axis=1) + reg[:, None] * np.sum(np.abs(c) ** 2, axis=1)


def solve_magls_batch(
    A: np.ndarray,
    target_mag: np.ndarray,
    reg,
    init_phase_deg: float = config.MAGLS_INIT_PHASE_DEG,
    tol: float = config.MAGLS_TOL,
    max_iter: int = config.MAGLS_MAX_ITER,
) -> MagLsSolution:
    """Variable-exchange MagLS over a batch: minimise sum(|A^H c| - t)^2 + reg ||c||^2.

    A is [B, M, L], target_mag [B, L, E], reg scalar or [B]. Each exchange step fixes
    the phase of the target to that of A^H c and solves the regularized normal
    equations, so the objective never increases.
    """
    A = np.asarray(A, dtype=complex)
    target = np.asarray(target_mag, dtype=float)
    n_batch, n_mics, _ = A.shape
    reg = np.broadcast_to(np.asarray(reg, dtype=float), (n_batch,)).copy()
    if np.any(reg < 0):
        raise ValueError("MagLS regularization must be >= 0")
    if max_iter < 0:
        raise ValueError(f"max_iter must be >= 0, got {max_iter}")
    A_h = np.conj(np.transpose(A, (0, 2, 1)))
    gram = A @ A_h + reg[:, None, None] * np.eye(n_mics)
    try:
        # the exchange step is c = gram^-1 A z; solved once for all iterations
        projector = np.linalg.solve(gram, A)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"MagLS normal equations are singular: {exc}. Use a positive regularization.") from exc

    threshold = max(tol, config.MAGLS_TOL_FLOOR)
    z = target * np.exp(1j * math.radians(init_phase_deg))
    c = projector @ z
    obj = _magls_objective(A_h, c, target, reg)
    trace = [obj.copy()]
    active = np.ones(obj.shape, dtype=bool)
    iterations = np.zeros(obj.shape, dtype=int)
    # scale: the larger of the starting objective and the objective at c = 0
    scale = np.maximum(trace[0], np.sum(target ** 2, axis=1))
    slack = config.MAGLS_DIVERGENCE_SLACK * np.maximum(scale, np.finfo(float).tiny)

    for _ in range(max_iter):
        if not active.any():
            break
        y = A_h @ c
        c_new = projector @ (target * np.exp(1j * np.angle(y)))
        obj_new = _magls_objective(A_h, c_new, target, reg)
        rising = active & (obj_new - obj > slack)
        if rising.any():
            b, e = np.argwhere(rising)[0]
            history = np.array([t[b, e] for t in trace] + [obj_new[b, e]])
            raise MagLsDivergenceError(
                f"MagLS objective rose from {obj[b, e]:.6g} to {obj_new[b, e]:.6g} (problem {b}, ear {e})", history
            )
        done = active & (obj - obj_new <= threshold * obj)
        c = np.where(active[:, None, :], c_new, c)
        obj = np.where(active, obj_new, obj)
        iterations += active
        active &= ~done
        trace.append(obj.copy())

    if active.any():
        logger.debug("MagLS stopped at max_iter=%d for %d of %d problems", max_iter, int(active.sum()), active.size)
    return MagLsSolution(c, np.array(trace), iterations, ~active)


def solve_magls(
    A: np.ndarray,
    target_mag: np.ndarray,
    reg: float,
    init_phase_deg: float = config.MAGLS_INIT_PHASE_DEG,
    tol: float = config.MAGLS_TOL,
    max_iter: int = config.MAGLS_MAX_ITER,
) -> MagLsSolution:
    """Single-problem MagLS; A is [M, L], target_mag [L] or [L, ears]."""
    t, single = _as_ears(np.asarray(target_mag))
    return _single(solve_magls_batch(np.asarray(A)[None], np.real(t)[None], reg, init_phase_deg, tol, max_iter), single)


def mag_ls(
    V: np.ndarray,
    h: np.ndarray,
    snr: float,
    init_phase_deg: float = config.MAGLS_INIT_PHASE_DEG,
    tol: float = config.MAGLS_TOL,
    max_iter: int = config.MAGLS_MAX_ITER,
) -> np.ndarray:
    """Magnitude-only BSM at one frequency."""
    if not (snr > 0):
        raise ValueError(f"SNR must be > 0 (linear), got {snr}")
    return solve_magls(V, np.abs(np.asarray(h)), 1.0 / snr, init_phase_deg, tol, max_iter).coefficients


def design_snr(snr_db: Optional[float] = None) -> float:
    return 10.0 ** ((config.DESIGN_SNR_DB if snr_db is None else snr_db) / 10.0)


def design_bsm(
    V: SteeringMatrix,
    hrtf: HrtfSet,
    snr: Optional[float] = None,
    magls_cutoff: float = config.MAGLS_CUTOFF_HZ,
    init_phase_deg: float = config.MAGLS_INIT_PHASE_DEG,
    tol: float = config.MAGLS_TOL,
    max_iter: int = config.MAGLS_MAX_ITER,
) -> BinauralFilterBank:
    """Diffuse-field BSM bank: LS below the cutoff, MagLS at and above it."""
    snr = design_snr() if snr is None else snr
    if not (snr > 0):
        raise ValueError(f"SNR must be > 0 (linear), got {snr}")
    h = sh_core.hrtf_response(hrtf, V.directions, V.freqs)  # [F, L, 2]
    coefs = np.zeros((V.freqs.size, V.num_mics, 2), dtype=complex)
    high = V.freqs >= magls_cutoff
    for i in np.flatnonzero(~high):
        coefs[i] = bsm_ls(V.values[i], h[i], snr)
    if high.any():
        sol = solve_magls_batch(V.values[high], np.abs(h[high]), 1.0 / snr, init_phase_deg, tol, max_iter)
        coefs[high] = sol.coefficients
        _log_magls("BSM", sol)
    return BinauralFilterBank("BSM", V.freqs, coefs, magls_cutoff, {"snr": snr, "grid_size": V.num_directions})


def _log_magls(method: str, sol: MagLsSolution) -> None:
    pending = int(np.size(sol.converged) - np.count_nonzero(sol.converged))
    if pending:
        logger.warning("%s MagLS: %d of %d bin/ear problems hit max_iter before converging",
                       method, pending, np.size(sol.converged))


# ================= LCMV =================

# relative eigenvalue cutoff for the merged-constraint pseudo-inverse
_MERGE_RTOL = 1e-10


def lcmv_weights(V_d: np.ndarray, R: np.ndarray, frequency: float = 0.0,
                 loading: float = config.LCMV_LOADING, merge_degenerate: bool = False) -> np.ndarray:
    """W_d = (V_d^H R^-1 V_d)^-1 V_d^H R^-1 at one frequency, [D, M].

    A rank-deficient V_d raises unless merge_degenerate is set; the minimum-norm
    W_d = (V_d^H R^-1 V_d)^+ V_d^H R^-1 is returned then, which passes the sum of the
    indistinguishable sources split equally between them.
    """
    V_d = np.asarray(V_d, dtype=complex)
    n_mics, n_src = V_d.shape
    if n_src == 0:
        return np.zeros((0, n_mics), dtype=complex)
    rank = np.linalg.matrix_rank(V_d)
    degenerate = rank < n_src
    if degenerate and not merge_degenerate:
        raise RankDeficientSteeringError(frequency, rank, n_src)
    eps = loading * max(float(np.real(np.trace(R))) / n_mics, np.finfo(float).tiny)
    loaded = R + eps * np.eye(n_mics)
    r_inv_v = _hermitian_solve(loaded, V_d, f"LCMV at {frequency:.1f} Hz")
    gain = V_d.conj().T @ r_inv_v
    gain = 0.5 * (gain + gain.conj().T)
    if degenerate:
        return linalg.pinvh(gain, rtol=_MERGE_RTOL) @ r_inv_v.conj().T
    return _hermitian_solve(gain, r_inv_v.conj().T, f"LCMV constraint at {frequency:.1f} Hz")


def lcmv(V_d: np.ndarray, Rx: SpatialCorrelation, freqs: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-bin LCMV weights [F, D, M] from direct-source steering [F, M, D].

    Bins where the steering loses rank (always DC for D >= 2, where every column is
    ones) merge their constraints. Directions the array cannot separate at any
    nonzero frequency, such as duplicates, raise RankDeficientSteeringError.
    """
    V_d = np.asarray(V_d, dtype=complex)
    if V_d.shape[0] != Rx.matrices.shape[0] or V_d.shape[1] != Rx.num_mics:
        raise ValueError(f"Steering {V_d.shape} does not match correlation {Rx.matrices.shape}")
    freqs = np.arange(V_d.shape[0]) * Rx.bin_spacing if freqs is None else np.asarray(freqs, dtype=float)
    n_src = V_d.shape[2]
    ranks = np.array([np.linalg.matrix_rank(v) if n_src else 0 for v in V_d])
    degenerate = ranks < n_src
    informative = freqs > 0
    if degenerate.any() and informative.any() and np.all(degenerate[informative]):
        i = int(np.flatnonzero(informative)[0])
        raise RankDeficientSteeringError(float(freqs[i]), int(ranks[i]), n_src)
    if degenerate.any():
        logger.warning("LCMV: %d source steering has rank < %d at %d bin(s) from %.1f Hz; merging constraints there",
                       n_src, n_src, int(degenerate.sum()), float(freqs[degenerate][0]))
    return np.stack([
        lcmv_weights(V_d[i], Rx.matrices[i], float(freqs[i]), merge_degenerate=bool(degenerate[i]))
        for i in range(V_d.shape[0])
    ])


# ================= SOURCE STATISTICS =================

def estimate_source_stats(
    tf: TimeFreqSignal,
    V_d: np.ndarray,
    W_d: np.ndarray,
    L: int,
    half_width: int = config.CORRELATION_SMOOTHING_BINS,
    sigma_n2: float = 0.0,
) -> SourceStatistics:
    """Direct-source correlation and residual variance from beamformed and residual signals."""
    V_d = np.asarray(V_d, dtype=complex)
    W_d = np.asarray(W_d, dtype=complex)
    n_bins = tf.num_bins
    if V_d.shape[:2] != (n_bins, tf.num_channels) or W_d.shape != (n_bins, V_d.shape[2], tf.num_channels):
        raise ValueError(f"Steering {V_d.shape} / weights {W_d.shape} do not match capture "
                         f"[{tf.num_frames}, {n_bins}, {tf.num_channels}]")
    if L < 1:
        raise ValueError(f"Grid size L must be >= 1, got {L}")
    s_d = np.einsum("fdm,tfm->tfd", W_d, tf.frames)
    x_r = tf.frames - np.einsum("fmd,tfd->tfm", V_d, s_d)
    r_sd = smooth_bins(outer_products(s_d), half_width) / tf.num_frames
    residual = np.sum(np.abs(x_r) ** 2, axis=(0, 2))
    sigma_r2 = smooth_bins(residual, half_width) / (tf.num_frames * L)
    return SourceStatistics(r_sd, sigma_r2, sigma_n2)


# ================= COMPOSED FILTERS =================

def _steering_columns(V_d: np.ndarray) -> np.ndarray:
    """[M, D] direct steering; a 1-D input is a single source."""
    V_d = np.asarray(V_d, dtype=complex)
    return V_d[:, None] if V_d.ndim == 1 else V_d


def _source_rows(h_d: np.ndarray, n_src: int, n_ears: int) -> np.ndarray:
    h_d = np.asarray(h_d, dtype=complex)
    return h_d.reshape(n_src, n_ears) if h_d.size == n_src * n_ears else h_d


def com_filter(c_bsm: np.ndarray, V_d: np.ndarray, W_d: np.ndarray, h_d: np.ndarray) -> np.ndarray:
    """c_COM = (I - V_d W_d)^H c_BSM + W_d^H h_d* at one frequency."""
    c_bsm = np.asarray(c_bsm, dtype=complex)
    V_d = _steering_columns(V_d)
    W_d = np.asarray(W_d, dtype=complex)
    if W_d.ndim == 1:
        W_d = W_d[None, :]
    h_d = np.asarray(h_d, dtype=complex)
    if c_bsm.ndim == 2:
        h_d = _source_rows(h_d, V_d.shape[1], c_bsm.shape[1])
    residual = np.eye(c_bsm.shape[0]) - V_d @ W_d
    return residual.conj().T @ c_bsm + W_d.conj().T @ h_d.conj()


def dbsm_filter(
    V_d: np.ndarray,
    V_r: np.ndarray,
    r_sd: np.ndarray,
    sigma_r2: float,
    sigma_n2: float,
    h_d: np.ndarray,
    h_r: np.ndarray,
) -> np.ndarray:
    """c = B^-1 (V_d R_sd h_d* + sigma_r^2 V_r h_r*) at one frequency.

    B = sigma_r^2 V_r V_r^H + V_d R_sd V_d^H + sigma_n^2 I.
    """
    V_r = np.asarray(V_r, dtype=complex)
    V_d = _steering_columns(V_d)
    n_src = V_d.shape[1]
    r_sd = np.asarray(r_sd, dtype=complex).reshape(n_src, n_src)
    hr, single = _as_ears(h_r)
    hd = _source_rows(h_d, n_src, hr.shape[1])
    b_mat = sigma_r2 * (V_r @ V_r.conj().T) + V_d @ r_sd @ V_d.conj().T + sigma_n2 * np.eye(V_r.shape[0])
    rhs = V_d @ r_sd @ hd.conj() + sigma_r2 * (V_r @ hr.conj())
    hint = " with sigma_n^2 = 0" if sigma_n2 == 0 else ""
    c = _hermitian_solve(b_mat, rhs, f"d-BSM matrix is singular{hint}")
    return c[:, 0] if single else c


def psd_sqrt(mats: np.ndarray) -> np.ndarray:
    """Hermitian square root of PSD matrices (batched over leading axes)."""
    w, u = np.linalg.eigh(mats)
    root = np.sqrt(np.clip(w, 0.0, None))
    return (u * root[..., None, :]) @ np.conj(np.swapaxes(u, -1, -2))


def _weighted_system(V_d, V_r, r_sd, sigma_r2, h_d, h_r):
    """A = V R_s^{1/2} and target |R_s^{1/2} h*| for a batch of bins, R_s = diag(R_sd, sigma_r^2 I)."""
    root_d = psd_sqrt(r_sd) if r_sd.shape[1] else r_sd
    scale = np.sqrt(np.asarray(sigma_r2, dtype=float))[:, None, None]
    A = np.concatenate([V_d @ root_d, scale * V_r], axis=2)
    target = np.concatenate([np.abs(root_d @ h_d.conj()), scale * np.abs(h_r)], axis=1)
    return A, target


def _single(sol: MagLsSolution, single: bool) -> MagLsSolution:
    if single:
        return MagLsSolution(sol.coefficients[0, :, 0], sol.objectives[:, 0, 0], int(sol.iterations[0, 0]),
                             bool(sol.converged[0, 0]))
    return MagLsSolution(sol.coefficients[0], sol.objectives[:, 0], sol.iterations[0], sol.converged[0])


def dbsm_magls(
    V_d: np.ndarray,
    V_r: np.ndarray,
    r_sd: np.ndarray,
    sigma_r2: float,
    sigma_n2: float,
    h_d: np.ndarray,
    h_r: np.ndarray,
    init_phase_deg: float = config.MAGLS_INIT_PHASE_DEG,
    tol: float = config.MAGLS_TOL,
    max_iter: int = config.MAGLS_MAX_ITER,
) -> MagLsSolution:
    """Weighted MagLS: min || |R_s^{1/2} V^H c| - |R_s^{1/2} h*| ||^2 + sigma_n^2 ||c||^2 at one frequency."""
    V_r = np.asarray(V_r, dtype=complex)
    V_d = _steering_columns(V_d)
    n_src = V_d.shape[1]
    hr, single = _as_ears(h_r)
    hd = _source_rows(h_d, n_src, hr.shape[1])
    r_sd = np.asarray(r_sd, dtype=complex).reshape(1, n_src, n_src)
    A, target = _weighted_system(V_d[None], V_r[None], r_sd, np.array([sigma_r2]), hd[None], hr[None])
    return _single(solve_magls_batch(A, target, sigma_n2, init_phase_deg, tol, max_iter), single)


# ================= INFORMED DESIGNS =================

def _direct_model(tf: TimeFreqSignal, geom: ArrayGeometry, directions: Sequence[Direction], hrtf: HrtfSet):
    freqs = tf.freqs
    if tf.num_channels != geom.num_mics:
        raise ValueError(f"Capture has {tf.num_channels} channels, the array has {geom.num_mics} mics")
    V_d = sh_core.steering_matrix(geom, directions, freqs).values if directions else np.zeros((freqs.size, geom.num_mics, 0), complex)
    h_d = sh_core.hrtf_response(hrtf, directions, freqs) if directions else np.zeros((freqs.size, 0, 2), complex)
    return freqs, V_d, h_d


def design_com(
    tf: TimeFreqSignal,
    geom: ArrayGeometry,
    directions: Sequence[Direction],
    hrtf: HrtfSet,
    bsm_bank: BinauralFilterBank,
    half_width: int = config.CORRELATION_SMOOTHING_BINS,
) -> BinauralFilterBank:
    """COMPASS-BSM: LCMV-extracted direct sources rendered with their HRTFs, residual through BSM."""
    freqs, V_d, h_d = _direct_model(tf, geom, directions, hrtf)
    if bsm_bank.freqs.size != freqs.size or bsm_bank.num_mics != geom.num_mics:
        raise ValueError("The BSM bank was designed on a different frequency grid or array")
    W_d = lcmv(V_d, estimate_correlation(tf, half_width), freqs)
    coefs = np.stack([com_filter(bsm_bank.coefficients[i], V_d[i], W_d[i], h_d[i]) for i in range(freqs.size)])
    meta = dict(bsm_bank.metadata)
    meta["directions_deg"] = [[d.elevation_deg, d.azimuth_deg] for d in directions]
    return BinauralFilterBank("COM", freqs, coefs, bsm_bank.magls_cutoff, meta)


def default_noise_variance(
    V_d: np.ndarray, r_sd: np.ndarray, Rx: SpatialCorrelation, snr_db: Optional[float]
) -> float:
    """sigma_n^2 implied by the capture SNR, or a small fraction of the mean mic power when unknown."""
    if snr_db is not None and math.isfinite(snr_db) and V_d.shape[2] > 0:
        direct = np.einsum("fmd,fde,fme->f", V_d, r_sd, V_d.conj()).real / V_d.shape[1]
        value = float(np.mean(direct)) / 10.0 ** (snr_db / 10.0)
        if value > 0:
            return value
    return config.DBSM_NOISE_FLOOR * Rx.mean_trace() / Rx.num_mics


def design_dbsm(
    tf: TimeFreqSignal,
    geom: ArrayGeometry,
    directions: Sequence[Direction],
    hrtf: HrtfSet,
    V_r: SteeringMatrix,
    sigma_n2: Optional[float] = None,
    snr_db: Optional[float] = None,
    magls_cutoff: float = config.MAGLS_CUTOFF_HZ,
    half_width: int = config.CORRELATION_SMOOTHING_BINS,
    init_phase_deg: float = config.MAGLS_INIT_PHASE_DEG,
    tol: float = config.MAGLS_TOL,
    max_iter: int = config.MAGLS_MAX_ITER,
) -> BinauralFilterBank:
    """Directional BSM with the informed source correlation matrix."""
    freqs, V_d, h_d = _direct_model(tf, geom, directions, hrtf)
    if V_r.freqs.size != freqs.size or not np.allclose(V_r.freqs, freqs):
        raise ValueError("Reverberant steering matrix is on a different frequency grid than the capture")
    Rx = estimate_correlation(tf, half_width)
    W_d = lcmv(V_d, Rx, freqs)
    stats = estimate_source_stats(tf, V_d, W_d, V_r.num_directions, half_width)
    noise = default_noise_variance(V_d, stats.r_sd, Rx, snr_db) if sigma_n2 is None else float(sigma_n2)
    logger.debug("d-BSM noise variance %.4g", noise)
    h_r = sh_core.hrtf_response(hrtf, V_r.directions, freqs)

    coefs = np.zeros((freqs.size, geom.num_mics, 2), dtype=complex)
    high = freqs >= magls_cutoff
    for i in np.flatnonzero(~high):
        coefs[i] = dbsm_filter(V_d[i], V_r.values[i], stats.r_sd[i], stats.sigma_r2[i], noise, h_d[i], h_r[i])
    if high.any():
        A, target = _weighted_system(V_d[high], V_r.values[high], stats.r_sd[high], stats.sigma_r2[high],
                                     h_d[high], h_r[high])
        sol = solve_magls_batch(A, target, noise, init_phase_deg, tol, max_iter)
        coefs[high] = sol.coefficients
        _log_magls("d-BSM", sol)
    meta = {
        "sigma_n2": noise,
        "grid_size": V_r.num_directions,
        "directions_deg": [[d.elevation_deg, d.azimuth_deg] for d in directions],
    }
    return BinauralFilterBank("DBSM", freqs, coefs, magls_cutoff, meta)


# ================= RENDERING & STORAGE =================

def render_binaural(bank: BinauralFilterBank, capture: np.ndarray, fs: int = config.FS,
                    win_len: int = config.STFT_WIN_LEN, hop: int = config.STFT_HOP) -> np.ndarray:
    """STFT, per-bin filtering and inverse STFT; returns [samples, 2]."""
    return istft(bank.apply(stft(capture, fs, win_len, hop)))


BANK_COLUMNS = ["frequency_hz", "ear", "mic", "real", "imag"]


def save_filter_bank(bank: BinauralFilterBank, path) -> Path:
    """Write coefficients as CSV (one row per bin, ear, mic) plus a JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(BANK_COLUMNS)
        for i, freq in enumerate(bank.freqs):
            for e, ear in enumerate(EARS):
                for m in range(bank.num_mics):
                    value = bank.coefficients[i, m, e]
                    writer.writerow([repr(float(freq)), ear, m, repr(float(value.real)), repr(float(value.imag))])
    sidecar = {
        "method": bank.method,
        "magls_cutoff": bank.magls_cutoff,
        "num_bins": int(bank.freqs.size),
        "num_mics": bank.num_mics,
        "metadata": bank.metadata,
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, default=float)
    return path


def load_filter_bank(path) -> BinauralFilterBank:
    path = Path(path)
    with open(path.with_suffix(".json"), "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    n_bins, n_mics = int(sidecar["num_bins"]), int(sidecar["num_mics"])
    freqs = np.zeros(n_bins)
    coefs = np.zeros((n_bins, n_mics, 2), dtype=complex)
    seen = np.zeros((n_bins, n_mics, 2), dtype=bool)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != BANK_COLUMNS:
            raise ValueError(f"{path}: expected columns {BANK_COLUMNS}, got {reader.fieldnames}")
        rows = list(reader)
    if len(rows) != n_bins * n_mics * 2:
        raise ValueError(f"{path}: {len(rows)} rows, expected {n_bins * n_mics * 2}")
    for k, row in enumerate(rows):
        i, m, e = k // (2 * n_mics), int(row["mic"]), EARS.index(row["ear"])
        freqs[i] = float(row["frequency_hz"])
        coefs[i, m, e] = complex(float(row["real"]), float(row["imag"]))
        seen[i, m, e] = True
    if not seen.all():
        raise ValueError(f"{path}: missing coefficients for some (bin, mic, ear)")
    return BinauralFilterBank(sidecar["method"], freqs, coefs, float(sidecar["magls_cutoff"]), sidecar.get("metadata", {}))
