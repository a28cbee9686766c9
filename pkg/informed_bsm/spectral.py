"""
STFT analysis/synthesis and spatial correlation estimation.
Frames are stored as [frames, bins, channels]; time-domain signals as [samples, channels].
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from . import config

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeFreqSignal:
    frames: np.ndarray  # complex [T, F, C]
    fs: int
    win_len: int = config.STFT_WIN_LEN
    hop: int = config.STFT_HOP
    n_samples: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise ValueError(f"Frames must be [frames, bins, channels], got shape {frames.shape}")
        if self.hop < 1 or self.hop > self.win_len:
            raise ValueError(f"Hop must be in [1, win_len={self.win_len}], got {self.hop}")
        if frames.shape[1] != self.win_len // 2 + 1:
            raise ValueError(f"{frames.shape[1]} bins do not match win_len={self.win_len} (expected {self.win_len // 2 + 1})")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[2]

    @property
    def freqs(self) -> np.ndarray:
        return np.fft.rfftfreq(self.win_len, 1.0 / self.fs)

    def with_frames(self, frames: np.ndarray) -> "TimeFreqSignal":
        """Same geometry, new (e.g. filtered) frames."""
        return TimeFreqSignal(frames, self.fs, self.win_len, self.hop, self.n_samples)


@dataclass(frozen=True)
class SpatialCorrelation:
    matrices: np.ndarray  # complex [F, M, M]
    smoothing_bins: int
    bin_spacing: float
    num_frames: int

    def __post_init__(self):
        mats = np.asarray(self.matrices)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ValueError(f"Correlation matrices must be [F, M, M], got {mats.shape}")
        object.__setattr__(self, "matrices", mats)

    @property
    def num_mics(self) -> int:
        return self.matrices.shape[1]

    def mean_trace(self) -> float:
        return float(np.mean(np.real(np.trace(self.matrices, axis1=1, axis2=2))))


def _engine(fs: int, win_len: int, hop: int) -> sps.ShortTimeFFT:
    window = sps.get_window("bartlett", win_len)  # periodic
    return sps.ShortTimeFFT(window, hop, fs, fft_mode="onesided", mfft=win_len)


def stft(samples: np.ndarray, fs: int = config.FS, win_len: int = config.STFT_WIN_LEN,
         hop: int = config.STFT_HOP) -> TimeFreqSignal:
    """Bartlett-windowed onesided STFT of a [samples] or [samples, channels] real signal."""
    x = np.asarray(samples)
    if np.iscomplexobj(x):
        raise ValueError("STFT takes real signals only (onesided spectrum); got complex samples")
    x = x.astype(float, copy=False)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError(f"STFT needs a non-empty [samples, channels] signal, got shape {x.shape}")
    if x.shape[0] < win_len:
        raise ValueError(f"Signal has {x.shape[0]} samples, shorter than the {win_len}-sample window")
    if hop < 1 or hop > win_len:
        raise ValueError(f"Hop must be in [1, {win_len}], got {hop}")
    spec = _engine(fs, win_len, hop).stft(x.T, axis=-1)  # [C, F, T]
    return TimeFreqSignal(np.transpose(spec, (2, 1, 0)), fs, win_len, hop, x.shape[0])


def istft(tf: TimeFreqSignal) -> np.ndarray:
    """Weighted overlap-add inverse; returns [n_samples, channels]."""
    engine = _engine(tf.fs, tf.win_len, tf.hop)
    if tf.n_samples < 1:
        raise ValueError("TimeFreqSignal does not record its signal length; build it with stft()")
    expected = engine.p_max(tf.n_samples) - engine.p_min
    if tf.num_frames != expected:
        raise ValueError(f"{tf.num_frames} frames are inconsistent with {tf.n_samples} samples (expected {expected})")
    out = engine.istft(np.transpose(tf.frames, (2, 1, 0)), k1=tf.n_samples)
    return np.real(out).T


def smooth_bins(per_bin: np.ndarray, half_width: int) -> np.ndarray:
    """Sum over neighbouring bins f-J..f+J along axis 0, truncated at the edges."""
    out = per_bin.copy()
    for j in range(1, half_width + 1):
        if j >= per_bin.shape[0]:
            break
        out[:-j] += per_bin[j:]
        out[j:] += per_bin[:-j]
    return out


def outer_products(frames: np.ndarray) -> np.ndarray:
    """Frame-summed per-bin outer products x x^H of [T, F, C] frames, [F, C, C]."""
    return np.einsum("tfm,tfn->fmn", frames, frames.conj())


def estimate_correlation(tf: TimeFreqSignal, half_width: int = config.CORRELATION_SMOOTHING_BINS) -> SpatialCorrelation:
    """Time and frequency averaged spatial correlation, divided by the frame count only."""
    if half_width < 0:
        raise ValueError(f"Smoothing half-width must be >= 0, got {half_width}")
    if tf.num_frames < 1:
        raise ValueError("Correlation estimation needs at least one frame")
    mats = smooth_bins(outer_products(tf.frames), half_width) / tf.num_frames
    return SpatialCorrelation(mats, half_width, tf.fs / tf.win_len, tf.num_frames)
