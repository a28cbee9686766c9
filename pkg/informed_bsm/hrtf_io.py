"""
HRTF sets on disk and the analytic rigid-sphere substitute.

HRIR-grid layout (one directory):
  directions.csv   rows of azimuth_deg, elevation_deg (header row optional)
  hrir_left.wav    multichannel, channel i is the HRIR for row i
  hrir_right.wav   same layout for the right ear
  hrtf.json        optional: lead_samples, sh_order, source
"""
import csv
import json
import logging
import re
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import soundfile as sf

from . import config
from . import sh_core
from .sh_core import Direction, EarModel, HrtfSet

logger = logging.getLogger(__name__)

DIRECTIONS_FILE = "directions.csv"
LEFT_FILE = "hrir_left.wav"
RIGHT_FILE = "hrir_right.wav"
SIDECAR_FILE = "hrtf.json"
DIRECTION_COLUMNS = ["azimuth_deg", "elevation_deg"]
# libsndfile channel limit
MAX_WAV_CHANNELS = 1024

_ANALYTIC = re.compile(
    r"^analytic-sphere(?:\(\s*(?P<radius>[0-9]*\.?[0-9]+)\s*(?:,\s*(?P<offset>[-+]?[0-9]*\.?[0-9]+)\s*)?\))?$"
)


def analytic_hrtf(
    radius: float = config.HEAD_RADIUS,
    ear_offset_deg: float = 0.0,
    grid_size: int = config.ANALYTIC_GRID_SIZE,
    ir_length: int = config.ANALYTIC_IR_LENGTH,
    fs: int = config.FS,
    sh_order: int = config.HRTF_SH_ORDER,
) -> HrtfSet:
    """Rigid-sphere head with point ears, sampled on a nearly uniform grid."""
    if not (radius > 0):
        raise ValueError(f"Head radius must be positive, got {radius} m")
    if ir_length < 2:
        raise ValueError(f"HRIR length must be >= 2 samples, got {ir_length}")
    ears = EarModel.symmetric(radius, ear_offset_deg)
    grid, _ = sh_core.nearly_uniform_grid(grid_size)
    lead = ir_length // 2
    freqs = np.fft.rfftfreq(ir_length, 1.0 / fs)
    spectra = ears.response(grid, freqs) * np.exp(-2j * np.pi * freqs * lead / fs)[:, None, None]
    hrirs = np.fft.irfft(spectra, ir_length, axis=0)  # [taps, Q, 2]
    # float32-exact so that WAV round trips are lossless
    hrirs = np.transpose(hrirs, (1, 2, 0)).astype(np.float32).astype(float)
    logger.debug("Analytic HRTF: a=%.4f m, offset %.1f deg, %d directions", radius, ear_offset_deg, grid_size)
    return HrtfSet(grid, hrirs, fs, sh_order, "analytic-sphere", lead, ears)


def _read_directions(path: Path) -> List[Direction]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = [row for row in csv.reader(f) if row and any(cell.strip() for cell in row)]
    if rows and rows[0][0].strip().lower() == DIRECTION_COLUMNS[0]:
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{path}: no directions")
    out = []
    for i, row in enumerate(rows, start=1):
        if len(row) != 2:
            raise ValueError(f"{path}: row {i} has {len(row)} fields, expected azimuth_deg, elevation_deg")
        try:
            az, el = float(row[0]), float(row[1])
            out.append(Direction.from_degrees(el, az))
        except ValueError as exc:
            raise ValueError(f"{path}: malformed direction on row {i}: {exc}") from exc
    return out


def _read_channels(path: Path, fs: int, expected: int) -> np.ndarray:
    if not path.exists():
        raise ValueError(f"Missing HRIR channel file {path}")
    data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    if rate != fs:
        raise ValueError(f"{path} is sampled at {rate} Hz, expected {fs} Hz")
    if data.shape[1] != expected:
        raise ValueError(f"{path} has {data.shape[1]} channels for {expected} directions")
    return data.T  # [Q, taps]


def load_hrtf(
    source: Union[str, Path],
    fs: int = config.FS,
    sh_order: Optional[int] = None,
    lead_samples: Optional[int] = None,
) -> HrtfSet:
    """Load an HRIR-grid directory or build the analytic set from 'analytic-sphere[(a_mm[, offset_deg])]'."""
    match = _ANALYTIC.match(str(source).strip())
    if match:
        radius = float(match.group("radius")) / 1000.0 if match.group("radius") else config.HEAD_RADIUS
        offset = float(match.group("offset")) if match.group("offset") else 0.0
        order = config.HRTF_SH_ORDER if sh_order is None else sh_order
        return analytic_hrtf(radius, offset, fs=fs, sh_order=order)
    if str(source).startswith("analytic"):
        raise ValueError(f"Malformed analytic HRTF spec '{source}'; use analytic-sphere, "
                         "analytic-sphere(a_mm) or analytic-sphere(a_mm, offset_deg)")

    root = Path(source)
    if not root.is_dir():
        raise ValueError(f"HRTF source '{source}' is neither an analytic spec nor a directory")
    if not (root / DIRECTIONS_FILE).exists():
        raise ValueError(f"Missing {root / DIRECTIONS_FILE}")
    sidecar = {}
    if (root / SIDECAR_FILE).exists():
        with open(root / SIDECAR_FILE, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
    grid = _read_directions(root / DIRECTIONS_FILE)
    left = _read_channels(root / LEFT_FILE, fs, len(grid))
    right = _read_channels(root / RIGHT_FILE, fs, len(grid))
    if left.shape != right.shape:
        raise ValueError(f"Left ({left.shape[1]} taps) and right ({right.shape[1]} taps) HRIR lengths differ")
    order = sh_order if sh_order is not None else int(sidecar.get("sh_order", config.HRTF_SH_ORDER))
    lead = lead_samples if lead_samples is not None else int(sidecar.get("lead_samples", 0))
    logger.info("Loaded %d HRIR pairs (%d taps) from %s", len(grid), left.shape[1], root)
    return HrtfSet(grid, np.stack([left, right], axis=1), fs, order, "measured", lead)


def write_hrtf(hrtf: HrtfSet, directory: Union[str, Path]) -> Path:
    """Write the set in the HRIR-grid layout (32-bit float WAV).

    One WAV channel per direction, so grids are limited to MAX_WAV_CHANNELS
    directions; larger sets (the default analytic grid among them) raise ValueError.
    """
    root = Path(directory)
    if len(hrtf.grid) > MAX_WAV_CHANNELS:
        raise ValueError(f"{len(hrtf.grid)} directions exceed the {MAX_WAV_CHANNELS}-channel WAV limit; "
                         "use a smaller grid")
    root.mkdir(parents=True, exist_ok=True)
    with open(root / DIRECTIONS_FILE, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DIRECTION_COLUMNS)
        for d in hrtf.grid:
            writer.writerow([repr(d.azimuth_deg), repr(d.elevation_deg)])
    for ear, name in enumerate((LEFT_FILE, RIGHT_FILE)):
        sf.write(str(root / name), hrtf.hrirs[:, ear, :].T, hrtf.fs, subtype="FLOAT")
    with open(root / SIDECAR_FILE, "w", encoding="utf-8") as f:
        json.dump({"lead_samples": hrtf.lead_samples, "sh_order": hrtf.sh_order, "source": hrtf.source}, f, indent=2)
    return root
