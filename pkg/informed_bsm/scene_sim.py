"""
Shoebox image-method simulation: image sources, multichannel sphere-array captures
and ground-truth binaural references.

Image directions are expressed in the array frame (array axes aligned with the room).
Rotating the array relative to the head rotates mics and images together, so the
capture does not depend on the rotation; only the head-frame geometry does.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sps

from . import config
from . import sh_core
from .sh_core import ArrayGeometry, Direction, HrtfSet

logger = logging.getLogger(__name__)

# images processed per block in frequency-domain composition
IMAGE_CHUNK = 1024
# windowed-sinc fractional delay used for omnidirectional room responses
SINC_TAPS = 64


@dataclass
class Scenario:
    """One simulated recording set-up. Source direction is relative to the array."""

    room_dims: Tuple[float, float, float]
    t60: float
    array_position: Tuple[float, float, float]
    source_distance: float
    source_direction: Direction = field(default_factory=lambda: Direction.from_degrees(90.0, 40.0))
    source_signal: Optional[np.ndarray] = None
    duration: float = config.DESK_DURATION
    head_rotation_deg: float = 0.0
    snr_db: Optional[float] = config.DESIGN_SNR_DB
    fs: int = config.FS
    scenario_id: str = "custom"

    def __post_init__(self):
        self.room_dims = tuple(float(v) for v in self.room_dims)
        self.array_position = tuple(float(v) for v in self.array_position)
        if len(self.room_dims) != 3 or len(self.array_position) != 3:
            raise ValueError("Room dimensions and array position need exactly three coordinates")
        if any(d <= 0 for d in self.room_dims):
            raise ValueError(f"Degenerate room: every dimension must be > 0 m, got {self.room_dims}")
        if not (self.t60 > 0):
            raise ValueError(f"T60 must be > 0 s, got {self.t60}")
        if not (self.duration > 0):
            raise ValueError(f"Duration must be > 0 s, got {self.duration}")
        if not (self.source_distance > 0):
            raise ValueError(f"Source distance must be > 0 m, got {self.source_distance}")
        for name, pos in (("array", np.array(self.array_position)), ("source", self.source_position)):
            if np.any(pos <= 0) or np.any(pos >= np.array(self.room_dims)):
                raise ValueError(f"The {name} at {np.round(pos, 4).tolist()} m is not strictly inside the room {self.room_dims}")
        if self.source_signal is not None:
            self.source_signal = np.asarray(self.source_signal, dtype=float)

    @property
    def source_position(self) -> np.ndarray:
        return np.array(self.array_position) + self.source_distance * self.source_direction.unit_vector()

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.fs))

    def source_samples(self, seed: int = config.SEED) -> np.ndarray:
        """The configured source signal, or seeded unit-variance white noise of the scenario duration."""
        if self.source_signal is not None:
            return self.source_signal
        return np.random.default_rng(seed).standard_normal(self.num_samples)


@dataclass(frozen=True)
class ImageSourceSet:
    """Plane-wave arrivals at the array centre; entry 0 is the direct source."""

    vectors: np.ndarray  # [I, 3] unit vectors from the array centre, array frame
    delays: np.ndarray  # seconds
    gains: np.ndarray
    speed_of_sound: float = config.SPEED_OF_SOUND
    complete_until: Optional[float] = None  # all images arriving before this time (s) are present

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=float).reshape(-1, 3)
        delays = np.asarray(self.delays, dtype=float).reshape(-1)
        gains = np.asarray(self.gains, dtype=float).reshape(-1)
        if not (vecs.shape[0] == delays.size == gains.size):
            raise ValueError(f"Image set has {vecs.shape[0]} directions, {delays.size} delays and {gains.size} gains")
        if not (np.all(np.isfinite(gains)) and np.all(np.isfinite(delays))):
            raise ValueError("Image gains and delays must be finite")
        if np.any(delays < 0):
            raise ValueError("Image delays must be >= 0")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "delays", delays)
        object.__setattr__(self, "gains", gains)

    def __len__(self) -> int:
        return self.delays.size

    @property
    def directions(self) -> List[Direction]:
        return [sh_core.direction_from_vector(v) for v in self.vectors]

    @property
    def direct_direction(self) -> Direction:
        return sh_core.direction_from_vector(self.vectors[0])

    def scaled(self, factor: float) -> "ImageSourceSet":
        return ImageSourceSet(self.vectors, self.delays, self.gains * factor, self.speed_of_sound, self.complete_until)

    def direct_only(self) -> "ImageSourceSet":
        return ImageSourceSet(self.vectors[:1], self.delays[:1], self.gains[:1], self.speed_of_sound, self.delays[0])


# ================= ROOM ACOUSTICS =================

def _inverse_length_norm(room_dims: Sequence[float]) -> float:
    return math.sqrt(sum(1.0 / (d * d) for d in room_dims))


def sabine_reflection_coefficient(room_dims: Sequence[float], t60: float) -> float:
    """Uniform wall pressure reflection coefficient sqrt(1 - alpha), alpha from Sabine's formula."""
    lx, ly, lz = room_dims
    if min(room_dims) <= 0:
        raise ValueError(f"Degenerate room: {tuple(room_dims)}")
    if not (t60 > 0):
        raise ValueError(f"T60 must be > 0 s, got {t60}")
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = min(1.0, max(0.0, 0.161 * volume / (surface * t60)))
    return math.sqrt(1.0 - alpha)


def default_max_order(
    room_dims: Sequence[float],
    t60: float,
    c: float = config.SPEED_OF_SOUND,
    clamp: int = config.MAX_IMAGE_ORDER,
) -> int:
    """Smallest order whose image set covers propagation paths up to c*t60, clamped."""
    order = math.ceil(c * t60 * _inverse_length_norm(room_dims)) + 1
    return int(min(order, clamp))


def _axis_candidates(src: float, length: float, max_order: int) -> Tuple[np.ndarray, np.ndarray]:
    n = np.arange(-max_order - 1, max_order + 2)
    coords, counts = [], []
    for q in (0, 1):
        count = np.abs(n - q) + np.abs(n)
        keep = count <= max_order
        coords.append((1 - 2 * q) * src + 2 * n[keep] * length)
        counts.append(count[keep])
    return np.concatenate(coords), np.concatenate(counts)


def image_sources(
    scn: Scenario,
    max_order: int,
    c: float = config.SPEED_OF_SOUND,
    reflection_coefficient: Optional[float] = None,
) -> ImageSourceSet:
    """Allen-Berkley images of total reflection order <= max_order, sorted by delay."""
    if max_order < 0:
        raise ValueError(f"Reflection order must be >= 0, got {max_order}")
    beta = sabine_reflection_coefficient(scn.room_dims, scn.t60) if reflection_coefficient is None else reflection_coefficient
    src = scn.source_position
    axes = [_axis_candidates(src[i], scn.room_dims[i], max_order) for i in range(3)]
    (x, cx), (y, cy), (z, cz) = axes
    total = cx[:, None, None] + cy[None, :, None] + cz[None, None, :]
    ix, iy, iz = np.nonzero(total <= max_order)
    positions = np.stack([x[ix], y[iy], z[iz]], axis=1)
    counts = total[ix, iy, iz]

    rel = positions - np.array(scn.array_position)
    dist = np.linalg.norm(rel, axis=1)
    order = np.argsort(dist, kind="stable")
    rel, dist, counts = rel[order], dist[order], counts[order]
    gains = np.power(beta, counts) / (4.0 * np.pi * dist)
    complete = max(max_order - 2, 0) / _inverse_length_norm(scn.room_dims) / c
    logger.debug("Image method: order %d, beta=%.4f, %d images", max_order, beta, dist.size)
    return ImageSourceSet(rel / dist[:, None], dist / c, gains, c, max(complete, dist[0] / c))


# ================= FREQUENCY-DOMAIN COMPOSITION =================

def _rir_fft_length(images: ImageSourceSet, fs: int) -> int:
    return sp_fft.next_fast_len(int(math.ceil(images.delays.max() * fs)) + config.RIR_PADDING, real=True)


def _phasors(images: ImageSourceSet, sl: slice, freqs: np.ndarray) -> np.ndarray:
    return images.gains[sl][None, :] * np.exp(-2j * np.pi * np.outer(freqs, images.delays[sl]))


def _sphere_spectra(images: ImageSourceSet, point_vecs: np.ndarray, radius: float, freqs: np.ndarray) -> np.ndarray:
    """Sum over images of gain*delay*rigid-sphere response at surface points, [F, P]."""
    n_max = sh_core.max_order_for(freqs, radius)
    strengths = sh_core.modal_strengths(freqs, radius, n_max)
    acc = np.zeros((freqs.size, n_max + 1, point_vecs.shape[0]), dtype=complex)
    for start in range(0, len(images), IMAGE_CHUNK):
        sl = slice(start, start + IMAGE_CHUNK)
        kernel = sh_core.legendre_kernel(point_vecs, images.vectors[sl], n_max)
        acc += np.tensordot(_phasors(images, sl, freqs), kernel, axes=([1], [2]))
    return np.einsum("fn,fnp->fp", strengths, acc)


def _omni_spectra(images: ImageSourceSet, num_points: int, freqs: np.ndarray) -> np.ndarray:
    total = np.zeros(freqs.size, dtype=complex)
    for start in range(0, len(images), IMAGE_CHUNK):
        total += _phasors(images, slice(start, start + IMAGE_CHUNK), freqs).sum(axis=1)
    return np.repeat(total[:, None], num_points, axis=1)


def _sh_spectra(images: ImageSourceSet, hrtf: HrtfSet, order: int, freqs: np.ndarray) -> np.ndarray:
    """Order-limited SH encoding of the images rendered through SH-fitted HRTFs, [F, 2]."""
    encoded = np.zeros((freqs.size, (order + 1) ** 2), dtype=complex)
    for start in range(0, len(images), IMAGE_CHUNK):
        sl = slice(start, start + IMAGE_CHUNK)
        theta, phi = sh_core.vector_angles(images.vectors[sl])
        encoded += _phasors(images, sl, freqs) @ sh_core._sh_matrix(order, theta, phi)
    return np.einsum("fk,fke->fe", encoded, hrtf.sh_coefficients(freqs, order))


def mic_room_responses(images: ImageSourceSet, geom: ArrayGeometry, fs: int = config.FS,
                       omnidirectional: bool = False) -> np.ndarray:
    """Room impulse responses at each array mic, [n_fft, M]."""
    if len(images) == 0:
        raise ValueError("Image set is empty")
    n_fft = _rir_fft_length(images, fs)
    freqs = sp_fft.rfftfreq(n_fft, 1.0 / fs)
    if omnidirectional:
        spectra = _omni_spectra(images, geom.num_mics, freqs)
    else:
        spectra = _sphere_spectra(images, sh_core.unit_vectors(geom.mic_directions), geom.sphere_radius, freqs)
    return sp_fft.irfft(spectra, n_fft, axis=0)


def binaural_room_responses(images: ImageSourceSet, hrtf: HrtfSet, fs: int = config.FS,
                            head_rotation_deg: float = 0.0, method: str = "exact",
                            hoa_order: int = config.REFERENCE_HOA_ORDER) -> np.ndarray:
    """Binaural room impulse responses, [n_fft, 2] (left, right)."""
    if len(images) == 0:
        raise ValueError("Image set is empty")
    if method not in ("exact", "hoa"):
        raise ValueError(f"Unknown reference method '{method}' (use 'exact' or 'hoa')")
    rotated = ImageSourceSet(sh_core.rotate_vectors(images.vectors, head_rotation_deg), images.delays,
                             images.gains, images.speed_of_sound, images.complete_until)
    n_fft = _rir_fft_length(images, fs)
    freqs = sp_fft.rfftfreq(n_fft, 1.0 / fs)
    if method == "exact" and hrtf.ear_model is not None:
        ears = hrtf.ear_model
        spectra = _sphere_spectra(rotated, sh_core.unit_vectors([ears.left, ears.right]), ears.radius, freqs)
    else:
        order = hrtf.sh_order if method == "exact" else hoa_order
        spectra = _sh_spectra(rotated, hrtf, order, freqs)
    return sp_fft.irfft(spectra, n_fft, axis=0)


def _check_signal(signal: np.ndarray) -> np.ndarray:
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"Source signal must be a non-empty mono array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("Source signal contains non-finite samples")
    return x


def _convolve(signal: np.ndarray, responses: np.ndarray) -> np.ndarray:
    return sps.fftconvolve(signal[:, None], responses, axes=0)[: signal.size]


def synth_mic_signals(
    images: ImageSourceSet,
    geom: ArrayGeometry,
    signal: np.ndarray,
    fs: int = config.FS,
    snr_db: Optional[float] = None,
    *,
    seed: int = config.SEED,
    omnidirectional: bool = False,
) -> np.ndarray:
    """Array capture [samples, M]; white Gaussian noise at snr_db relative to direct-path mic power."""
    x = _check_signal(signal)
    if len(images) == 0:
        raise ValueError("Image set is empty")
    mics = _convolve(x, mic_room_responses(images, geom, fs, omnidirectional))
    if snr_db is None or math.isinf(snr_db):
        return mics
    direct = _convolve(x, mic_room_responses(images.direct_only(), geom, fs, omnidirectional))
    power = float(np.mean(direct ** 2))
    sigma = math.sqrt(power / 10.0 ** (snr_db / 10.0))
    logger.debug("Capture noise: direct power %.3g, SNR %.1f dB, sigma %.3g", power, snr_db, sigma)
    return mics + sigma * np.random.default_rng(seed).standard_normal(mics.shape)


def synth_reference_binaural(
    images: ImageSourceSet,
    hrtf: HrtfSet,
    signal: np.ndarray,
    fs: int = config.FS,
    head_rotation_deg: float = 0.0,
    method: str = "exact",
    hoa_order: int = config.REFERENCE_HOA_ORDER,
) -> np.ndarray:
    """Ground-truth ear signals [samples, 2]: exact plane-wave HRTF sum, or order-limited HOA path."""
    x = _check_signal(signal)
    return _convolve(x, binaural_room_responses(images, hrtf, fs, head_rotation_deg, method, hoa_order))


# ================= ROOM RESPONSE ANALYSIS =================

def room_impulse_response(images: ImageSourceSet, fs: int = config.FS, length: Optional[int] = None) -> np.ndarray:
    """Omnidirectional pressure response at the array centre, Hann-windowed sinc fractional delays."""
    if len(images) == 0:
        raise ValueError("Image set is empty")
    if length is None:
        length = int(math.ceil(images.delays.max() * fs)) + SINC_TAPS
    half = SINC_TAPS // 2
    base = np.floor(images.delays * fs).astype(int)
    idx = base[:, None] + np.arange(-half + 1, half + 1)[None, :]
    t = idx / fs - images.delays[:, None]
    width = SINC_TAPS / fs
    taps = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / width)) * np.sinc(fs * t) * images.gains[:, None]
    keep = (idx >= 0) & (idx < length)
    return np.bincount(idx[keep], weights=taps[keep], minlength=length)[:length]


def _fit_decay_slope(edc: np.ndarray, fs: int, fit_range_db: Tuple[float, float]) -> float:
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    upper, lower = max(fit_range_db), min(fit_range_db)
    start = np.argmax(edc_db <= upper)
    if edc_db[-1] > lower:
        raise ValueError(f"Energy decay only reaches {edc_db[-1]:.1f} dB, the fit needs {lower:.1f} dB")
    stop = np.argmax(edc_db <= lower)
    if stop - start < 2:
        raise ValueError("Too few samples inside the decay fit range")
    t = np.arange(start, stop) / fs
    slope, _ = np.polyfit(t, edc_db[start:stop], 1)
    if slope >= 0:
        raise ValueError("Energy decay curve does not decay inside the fit range")
    return float(slope)


def _backward_integral(energy: np.ndarray) -> np.ndarray:
    return np.cumsum(energy[::-1])[::-1]


def schroeder_decay_time(
    rir: np.ndarray,
    fs: int = config.FS,
    fit_range_db: Tuple[float, float] = (-5.0, -15.0),
    complete_until: Optional[float] = None,
) -> float:
    """-60 dB decay time from a linear fit to the Schroeder backward integral.

    With complete_until, the response is cut there and continued by the fitted
    exponential before refitting (two refinement passes).
    """
    energy = np.asarray(rir, dtype=float) ** 2
    truncated = complete_until is not None and complete_until * fs < energy.size
    if truncated:
        energy = energy[: max(int(complete_until * fs), 1)]
    if not np.any(energy > 0):
        raise ValueError("Room response has no energy")
    slope = _fit_decay_slope(_backward_integral(energy), fs, fit_range_db)
    if truncated:
        level = float(np.mean(energy[-max(int(0.01 * fs), 1):]))
        for _ in range(2):
            rate = -slope * math.log(10.0) / 10.0
            n_tail = int(min(math.ceil(80.0 / -slope * fs), 10 * fs))
            tail = level * np.exp(-rate * np.arange(1, n_tail + 1) / fs)
            slope = _fit_decay_slope(_backward_integral(np.concatenate([energy, tail])), fs, fit_range_db)
    return -60.0 / slope
