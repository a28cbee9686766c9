"""
Objective error measures: NMSE, directional error, ITD/ILD with their error measures,
and the gammatone ERB filter bank used for the ILD.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sps

from . import config
from . import sh_core
from .filters import BinauralFilterBank
from .sh_core import ArrayGeometry, Direction, HrtfSet, SteeringMatrix
from .spectral import TimeFreqSignal

logger = logging.getLogger(__name__)


def to_db(values, floor_db: float = config.NMSE_FLOOR_DB) -> np.ndarray:
    """10 log10 of nonnegative values, floored (zero maps to the floor)."""
    values = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(values)
    return np.where(np.isnan(out), np.nan, np.maximum(out, floor_db))


# ================= NMSE =================

def nmse(p_hat, p_ref, f, cutoff: float = config.MAGLS_CUTOFF_HZ):
    """Complex error below the cutoff, magnitude error at and above it, normalized by |p_ref|^2."""
    p_hat = np.asarray(p_hat, dtype=complex)
    p_ref = np.asarray(p_ref, dtype=complex)
    ref_power = np.abs(p_ref) ** 2
    if np.any(ref_power == 0):
        raise ValueError("NMSE is undefined where the reference is zero; exclude those bins")
    complex_err = np.abs(p_hat - p_ref) ** 2
    mag_err = (np.abs(p_hat) - np.abs(p_ref)) ** 2
    out = np.where(np.asarray(f) >= cutoff, mag_err, complex_err) / ref_power
    return float(out) if out.ndim == 0 else out


def nmse_profile(
    p_hat: TimeFreqSignal,
    p_ref: TimeFreqSignal,
    cutoff: float = config.MAGLS_CUTOFF_HZ,
) -> np.ndarray:
    """Per-bin, per-ear NMSE summed over frames, [F, ears]; bins with a silent reference are NaN."""
    if p_hat.frames.shape != p_ref.frames.shape:
        raise ValueError(f"Estimate {p_hat.frames.shape} and reference {p_ref.frames.shape} frames differ")
    est, ref = p_hat.frames, p_ref.frames
    high = (p_ref.freqs >= cutoff)[None, :, None]
    err = np.where(high, (np.abs(est) - np.abs(ref)) ** 2, np.abs(est - ref) ** 2).sum(axis=0)
    power = (np.abs(ref) ** 2).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(power > 0, err / power, np.nan)


def diffuse_nmse(bank: BinauralFilterBank, V: SteeringMatrix, h_grid: np.ndarray) -> np.ndarray:
    """Diffuse-field binaural error over the model directions, [F, 2]."""
    if V.freqs.size != bank.freqs.size:
        raise ValueError("Steering matrix and filter bank use different frequency grids")
    est = np.einsum("fme,fml->fle", bank.coefficients.conj(), V.values)
    ref = np.asarray(h_grid)
    high = (bank.freqs >= bank.magls_cutoff)[:, None, None]
    err = np.where(high, (np.abs(est) - np.abs(ref)) ** 2, np.abs(est - ref) ** 2).sum(axis=1)
    return err / (np.abs(ref) ** 2).sum(axis=1)


# ================= DIRECTIONAL ERROR =================

def system_response(bank: BinauralFilterBank, geom: ArrayGeometry, dirs: Sequence[Direction]) -> np.ndarray:
    """c^H v(direction, f) for head-frame directions, [F, D, 2]."""
    V = sh_core.steering_matrix(geom, dirs, bank.freqs)
    return np.einsum("fme,fmd->fde", bank.coefficients.conj(), V.values)


def directional_error_surface(
    bank: BinauralFilterBank, geom: ArrayGeometry, hrtf: HrtfSet, dirs: Sequence[Direction]
) -> np.ndarray:
    """Normalized per-direction filter/HRTF mismatch over the bank's grid, [F, D, 2]."""
    est = system_response(bank, geom, dirs)
    ref = sh_core.hrtf_response(hrtf, dirs, bank.freqs)
    mag = np.abs(ref)
    if np.any(mag == 0):
        raise ValueError("Directional error is undefined where the HRTF magnitude is zero")
    high = (bank.freqs >= bank.magls_cutoff)[:, None, None]
    return np.where(high, np.abs(np.abs(est) - mag), np.abs(est - ref)) / mag


def directional_error(
    bank: BinauralFilterBank, geom: ArrayGeometry, hrtf: HrtfSet, direction: Direction, f: float
) -> np.ndarray:
    """Per-ear directional error at the bank bin nearest to f, shape (2,)."""
    i = int(np.argmin(np.abs(bank.freqs - f)))
    single = BinauralFilterBank(bank.method, bank.freqs[i:i + 1], bank.coefficients[i:i + 1], bank.magls_cutoff)
    return directional_error_surface(single, geom, hrtf, [direction])[0, 0]


# ================= ITD =================

def itd(p_l: np.ndarray, p_r: np.ndarray, fs: int = config.FS,
        max_lag_s: float = config.ITD_MAX_LAG_S, lowpass_hz: float = config.ITD_LOWPASS_HZ) -> float:
    """Lag of the low-passed interaural cross-correlation peak, seconds; positive when the left ear lags."""
    p_l = np.asarray(p_l, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    if p_l.shape != p_r.shape or p_l.ndim != 1:
        raise ValueError(f"ITD needs two equal-length mono signals, got {p_l.shape} and {p_r.shape}")
    if not (np.any(p_l) and np.any(p_r)):
        raise ValueError("ITD is undefined for an all-zero channel")
    sos = sps.butter(config.ITD_LOWPASS_ORDER, lowpass_hz, fs=fs, output="sos")
    left, right = sps.sosfiltfilt(sos, p_l), sps.sosfiltfilt(sos, p_r)
    xcorr = sps.correlate(left, right, mode="full")
    lags = sps.correlation_lags(left.size, right.size, mode="full")
    window = np.abs(lags) <= int(round(max_lag_s * fs))
    best = np.argmax(np.abs(xcorr[window]))
    return float(lags[window][best]) / fs


# ================= ERB BANK / ILD =================

def erb_bandwidth(fc):
    """Glasberg-Moore equivalent rectangular bandwidth in Hz."""
    return 24.7 * (4.37 * np.asarray(fc, dtype=float) / 1000.0 + 1.0)


def erb_number(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=float))


def erb_number_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=float) / 21.4) - 1.0) / 0.00437


@dataclass(frozen=True)
class ErbBank:
    centers: np.ndarray
    fs: int

    @property
    def num_bands(self) -> int:
        return self.centers.size

    @property
    def bandwidths(self) -> np.ndarray:
        return erb_bandwidth(self.centers)

    @property
    def upper_limits(self) -> np.ndarray:
        """Per-band summation limit min(fs/2, fc + 4 ERB)."""
        return np.minimum(self.fs / 2.0, self.centers + 4.0 * self.bandwidths)

    def gains(self, freqs: np.ndarray) -> np.ndarray:
        """Fourth-order gammatone magnitude responses, zero above each band's limit, [bands, F]."""
        freqs = np.asarray(freqs, dtype=float)
        b = 1.019 * self.bandwidths[:, None]
        g = (1.0 + ((freqs[None, :] - self.centers[:, None]) / b) ** 2) ** -2
        return np.where(freqs[None, :] <= self.upper_limits[:, None], g, 0.0)


def erb_bank(fs: int = config.FS, num_bands: int = config.ERB_NUM_BANDS,
             low_hz: float = config.ERB_LOW_HZ, high_hz: float = config.ERB_HIGH_HZ) -> ErbBank:
    """Centers uniformly spaced on the ERB-number scale between low_hz and high_hz."""
    if fs / 2.0 < high_hz:
        raise ValueError(f"fs={fs} Hz cannot represent the {high_hz:.0f} Hz top band (needs fs >= {2 * high_hz:.0f})")
    if num_bands < 1 or not (0 < low_hz < high_hz):
        raise ValueError(f"Invalid ERB bank: {num_bands} bands over [{low_hz}, {high_hz}] Hz")
    centers = erb_number_to_hz(np.linspace(erb_number(low_hz), erb_number(high_hz), num_bands))
    return ErbBank(centers, fs)


def ild_bands(p_l: np.ndarray, p_r: np.ndarray, bank: ErbBank) -> np.ndarray:
    """Per-band ILD in dB, positive when the left ear is louder."""
    p_l = np.asarray(p_l, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    if p_l.shape != p_r.shape or p_l.ndim != 1:
        raise ValueError(f"ILD needs two equal-length mono signals, got {p_l.shape} and {p_r.shape}")
    freqs = sp_fft.rfftfreq(p_l.size, 1.0 / bank.fs)
    weights = bank.gains(freqs) ** 2
    left = weights @ (np.abs(sp_fft.rfft(p_l)) ** 2)
    right = weights @ (np.abs(sp_fft.rfft(p_r)) ** 2)
    if np.any(right <= 0) or np.any(left <= 0):
        empty = bank.centers[(right <= 0) | (left <= 0)]
        raise ValueError(f"Zero-energy ERB band(s) at {np.round(empty).tolist()} Hz")
    return 10.0 * (np.log10(left) - np.log10(right))


def ild(p_l: np.ndarray, p_r: np.ndarray, bank: ErbBank) -> float:
    """Band-averaged ILD in dB."""
    return float(np.mean(ild_bands(p_l, p_r, bank)))


def itd_error(test: np.ndarray, ref: np.ndarray, fs: int = config.FS) -> float:
    """|ITD(test) - ITD(ref)| for [samples, 2] ear signals."""
    return abs(itd(test[:, 0], test[:, 1], fs) - itd(ref[:, 0], ref[:, 1], fs))


def ild_error(test: np.ndarray, ref: np.ndarray, bank: ErbBank) -> float:
    """Mean over bands of |ILD_f(test) - ILD_f(ref)|."""
    diff = ild_bands(test[:, 0], test[:, 1], bank) - ild_bands(ref[:, 0], ref[:, 1], bank)
    return float(np.mean(np.abs(diff)))


# ================= FREE-FIELD EVALUATION =================

def _centred_ir(spectrum: np.ndarray, win_len: int) -> np.ndarray:
    return np.fft.fftshift(sp_fft.irfft(spectrum, win_len, axis=0), axes=0)


def free_field_binaural_ir(bank: BinauralFilterBank, geom: ArrayGeometry, direction: Direction,
                           win_len: Optional[int] = None) -> np.ndarray:
    """Rendered ear responses to a unit plane wave, circularly centred, [win_len, 2]."""
    win_len = 2 * (bank.freqs.size - 1) if win_len is None else win_len
    return _centred_ir(system_response(bank, geom, [direction])[:, 0, :], win_len)


def reference_binaural_ir(hrtf: HrtfSet, direction: Direction, freqs: np.ndarray,
                          win_len: Optional[int] = None) -> np.ndarray:
    """HRTF pair for one direction as a circularly centred impulse response, [win_len, 2]."""
    win_len = 2 * (np.size(freqs) - 1) if win_len is None else win_len
    return _centred_ir(sh_core.hrtf_response(hrtf, [direction], freqs)[:, 0, :], win_len)


# ================= REPORT =================

@dataclass
class MetricReport:
    """Per-method evaluation results; arrays are None when not computed."""

    method: str
    freqs: Optional[np.ndarray] = None
    nmse: Optional[np.ndarray] = None  # linear [F, 2]
    azimuths_deg: Optional[np.ndarray] = None
    itd: Optional[np.ndarray] = None  # s
    ild: Optional[np.ndarray] = None  # dB
    itd_error: Optional[np.ndarray] = None
    ild_error: Optional[np.ndarray] = None
    directional_error: Optional[np.ndarray] = None  # [F, D, 2]
    diffuse_nmse: Optional[np.ndarray] = None  # linear [F, 2], bank over the design grid

    def __post_init__(self):
        for name in ("nmse", "itd_error", "ild_error", "directional_error", "diffuse_nmse"):
            value = getattr(self, name)
            if value is not None and np.any(np.asarray(value) < 0):
                raise ValueError(f"{name} must be nonnegative")

    def nmse_db(self, floor_db: float = config.NMSE_FLOOR_DB) -> np.ndarray:
        return to_db(self.nmse, floor_db)

    def diffuse_nmse_db(self, floor_db: float = config.NMSE_FLOOR_DB) -> np.ndarray:
        return to_db(self.diffuse_nmse, floor_db)

    def band_mean_nmse_db(self, band: Tuple[float, float] = config.NMSE_BAND_HZ) -> np.ndarray:
        """Per-ear mean of the dB NMSE over bins inside the band."""
        return self._band_mean(self.nmse_db(), band)

    def band_mean_diffuse_nmse_db(self, band: Tuple[float, float] = config.NMSE_BAND_HZ) -> np.ndarray:
        return self._band_mean(self.diffuse_nmse_db(), band)

    def _band_mean(self, values_db: np.ndarray, band: Tuple[float, float]) -> np.ndarray:
        sel = (self.freqs >= band[0]) & (self.freqs <= band[1])
        return np.nanmean(values_db[sel], axis=0)

    @property
    def itd_within_jnd(self) -> np.ndarray:
        return np.asarray(self.itd_error) < config.ITD_JND_S

    @property
    def ild_within_jnd(self) -> np.ndarray:
        return np.asarray(self.ild_error) < config.ILD_JND_DB
