"""
Experiment drivers: scenario configs, simulated captures, filter design per method,
rendering with NMSE against the reference, ITD/ILD sweeps over source azimuth,
off-source analysis and directional-error maps. Every driver writes CSV reports
stamped with the run's provenance.
"""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf

from . import config
from . import report
from . import scene_sim
from . import sh_core
from . import stage_timer
from .filters import BinauralFilterBank, design_bsm, design_com, design_dbsm
from .hrtf_io import load_hrtf
from .metrics import (
    ErbBank, MetricReport, diffuse_nmse, directional_error_surface, erb_bank, free_field_binaural_ir, ild_bands,
    itd, nmse_profile, reference_binaural_ir,
)
from .run_context import clear_run_context, set_run_context, update_run_context
from .scene_sim import ImageSourceSet, Scenario
from .sh_core import ArrayGeometry, Direction, HrtfSet, SteeringMatrix
from .spectral import TimeFreqSignal, istft, stft

logger = logging.getLogger(__name__)

METHODS = ("BSM", "COM", "DBSM", "REFERENCE")
INFORMED_METHODS = ("COM", "DBSM")
SCENARIO_DIR = Path(__file__).resolve().parent / "scenarios"


class ExperimentError(RuntimeError):
    """A driver failed; the message names the scenario and rotation."""


# ================= CONFIG =================

@dataclass
class ExperimentConfig:
    """One experiment: scenario, methods, rotation, assumed-DOA error, sweep and output."""

    scenario: Scenario
    methods: Tuple[str, ...] = ("BSM", "COM", "DBSM")
    head_rotation_deg: float = 0.0
    doa_error_deg: Tuple[float, float] = (0.0, 0.0)  # (azimuth, elevation)
    sweep_start_deg: float = 0.0
    sweep_stop_deg: float = 360.0
    sweep_step_deg: float = config.SWEEP_STEP_DEG
    output_dir: str = config.OUTPUT_DIR
    seed: int = config.SEED
    hrtf_spec: str = "analytic-sphere"
    max_image_order: Optional[int] = None
    magls_max_iter: int = config.MAGLS_MAX_ITER
    grid_size: int = config.GRID_SIZE
    reference_method: str = "hoa"
    full_scale: bool = False

    def __post_init__(self):
        self.methods = tuple(m.upper() for m in self.methods)
        if not self.methods:
            raise ValueError("An experiment needs at least one method")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"Unknown method(s) {unknown}; choose from {list(METHODS)}")
        self.doa_error_deg = tuple(float(v) for v in self.doa_error_deg)
        if len(self.doa_error_deg) != 2:
            raise ValueError("doa_error_deg needs (azimuth, elevation) in degrees")
        if not (self.sweep_step_deg > 0) or self.sweep_stop_deg <= self.sweep_start_deg:
            raise ValueError(f"Invalid sweep: start {self.sweep_start_deg}, stop {self.sweep_stop_deg}, "
                             f"step {self.sweep_step_deg} (need step > 0 and stop > start)")
        if self.reference_method not in ("exact", "hoa"):
            raise ValueError(f"Unknown reference method '{self.reference_method}' (use 'exact' or 'hoa')")
        if self.seed is None:
            raise ValueError("A fixed seed is required")
        if self.scenario.head_rotation_deg != self.head_rotation_deg:
            self.scenario = dataclasses.replace(self.scenario, head_rotation_deg=self.head_rotation_deg)

    @property
    def scenario_id(self) -> str:
        return self.scenario.scenario_id

    @property
    def fs(self) -> int:
        return self.scenario.fs

    def sweep_azimuths(self) -> np.ndarray:
        """Sweep azimuths in degrees, stop excluded."""
        count = int(math.ceil((self.sweep_stop_deg - self.sweep_start_deg) / self.sweep_step_deg - 1e-9))
        return self.sweep_start_deg + self.sweep_step_deg * np.arange(count)

    def image_order(self) -> int:
        if self.max_image_order is not None:
            return int(self.max_image_order)
        clamp = config.MAX_IMAGE_ORDER if self.full_scale else config.DESK_MAX_IMAGE_ORDER
        return scene_sim.default_max_order(self.scenario.room_dims, self.scenario.t60, clamp=clamp)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _resolve_config_path(source: Union[str, Path]) -> Path:
    path = Path(source)
    if path.exists():
        return path
    name = str(source)
    if name.isdigit():
        name = f"scenario{name}"
    bundled = SCENARIO_DIR / f"{name}.json"
    if bundled.exists():
        return bundled
    options = sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))
    raise ValueError(f"Config '{source}' is neither a file nor a bundled scenario {options}")


def _snr(value) -> Optional[float]:
    if value is None or (isinstance(value, str) and value.lower() in ("inf", "none", "off")):
        return None
    return float(value)


def scenario_from_dict(data: dict, full_scale: bool = False, base_dir: Optional[Path] = None) -> Scenario:
    """Build a Scenario; desk scale replaces T60 and duration with the reduced values."""
    required = ("room_dims", "t60", "array_position", "source_distance")
    missing = [k for k in required if k not in data]
    if missing:
        raise ValueError(f"Scenario is missing {missing}")
    direction = Direction.from_degrees(float(data.get("source_elevation_deg", 90.0)),
                                       float(data.get("source_azimuth_deg", 40.0)))
    signal = None
    if data.get("source_wav"):
        wav = Path(data["source_wav"])
        if base_dir is not None and not wav.is_absolute():
            wav = base_dir / wav
        samples, rate = sf.read(str(wav), dtype="float64", always_2d=True)
        if rate != config.FS:
            raise ValueError(f"{wav} is sampled at {rate} Hz, expected {config.FS} Hz")
        signal = samples[:, 0]
    t60 = float(data["t60"]) if full_scale else config.DESK_T60
    duration = float(data.get("duration", config.DESK_DURATION)) if full_scale else config.DESK_DURATION
    if signal is not None:
        signal = signal[: int(round(duration * config.FS))]
    return Scenario(
        room_dims=tuple(data["room_dims"]),
        t60=t60,
        array_position=tuple(data["array_position"]),
        source_distance=float(data["source_distance"]),
        source_direction=direction,
        source_signal=signal,
        duration=duration,
        head_rotation_deg=float(data.get("head_rotation_deg", 0.0)),
        snr_db=_snr(data.get("snr_db", config.DESIGN_SNR_DB)),
        scenario_id=str(data.get("scenario_id", "custom")),
    )


def load_experiment_config(source: Union[str, Path] = "scenario1", full_scale: bool = False,
                           **overrides) -> ExperimentConfig:
    """Read a versioned JSON experiment config (or a bundled scenario name) and apply overrides."""
    path = _resolve_config_path(source)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    version = data.get("schema_version")
    if version != config.CONFIG_SCHEMA_VERSION:
        raise ValueError(f"{path}: schema_version {version} is not supported (expected {config.CONFIG_SCHEMA_VERSION})")
    if "scenario" not in data:
        raise ValueError(f"{path}: missing the 'scenario' block")
    scenario = scenario_from_dict(data["scenario"], full_scale, path.parent)
    sweep = data.get("sweep", {})
    cfg = ExperimentConfig(
        scenario=scenario,
        methods=tuple(data.get("methods", ("BSM", "COM", "DBSM"))),
        head_rotation_deg=float(data.get("head_rotation_deg", scenario.head_rotation_deg)),
        doa_error_deg=tuple(data.get("doa_error_deg", (0.0, 0.0))),
        sweep_start_deg=float(sweep.get("start_deg", 0.0)),
        sweep_stop_deg=float(sweep.get("stop_deg", 360.0)),
        sweep_step_deg=float(sweep.get("step_deg", config.SWEEP_STEP_DEG)),
        output_dir=str(data.get("output_dir", config.OUTPUT_DIR)),
        seed=int(data.get("seed", config.SEED)),
        hrtf_spec=str(data.get("hrtf", "analytic-sphere")),
        max_image_order=data.get("max_image_order"),
        magls_max_iter=int(data.get("magls_max_iter", config.MAGLS_MAX_ITER if full_scale else config.DESK_MAGLS_MAX_ITER)),
        grid_size=int(data.get("grid_size", config.GRID_SIZE)),
        reference_method=str(data.get("reference_method", "hoa")),
        full_scale=full_scale,
    )
    return cfg.with_overrides(**overrides)


# ================= SIMULATION =================

@dataclass
class Capture:
    images: ImageSourceSet
    signal: np.ndarray
    mics: np.ndarray  # [samples, M]
    geometry: ArrayGeometry
    max_order: int
    reference: Optional[np.ndarray] = None  # [samples, 2]


def simulate_capture(cfg: ExperimentConfig, hrtf: Optional[HrtfSet] = None,
                     scenario: Optional[Scenario] = None) -> Capture:
    """Image-method capture of the scenario; the binaural reference is rendered when an HRTF set is given."""
    scn = cfg.scenario if scenario is None else scenario
    order = cfg.image_order()
    with stage_timer.timed("Image sources", f"order {order}"):
        images = scene_sim.image_sources(scn, order)
    signal = scn.source_samples(cfg.seed)
    geom = ArrayGeometry.semicircular(rotation_deg=cfg.head_rotation_deg)
    with stage_timer.timed("Array capture", f"{len(images)} images"):
        # noise stream seeded apart from the source stream
        mics = scene_sim.synth_mic_signals(images, geom, signal, scn.fs, scn.snr_db, seed=cfg.seed + 1)
    reference = None
    if hrtf is not None:
        with stage_timer.timed("Binaural reference", cfg.reference_method):
            reference = scene_sim.synth_reference_binaural(images, hrtf, signal, scn.fs, cfg.head_rotation_deg,
                                                           cfg.reference_method)
    return Capture(images, signal, mics, geom, order, reference)


def measure_decay(capture: Capture, fs: int = config.FS) -> float:
    """Schroeder decay time of the omnidirectional response at the array centre."""
    rir = scene_sim.room_impulse_response(capture.images, fs)
    return scene_sim.schroeder_decay_time(rir, fs, complete_until=capture.images.complete_until)


def assumed_direction(cfg: ExperimentConfig, source: Direction) -> Tuple[Direction, Direction]:
    """(true, assumed) head-frame directions of an array-frame source; assumed adds the DOA error."""
    true_dir = sh_core.rotate_azimuth([source], cfg.head_rotation_deg)[0]
    d_az, d_el = cfg.doa_error_deg
    elevation = min(max(true_dir.elevation_deg + d_el, 0.0), 180.0)
    return true_dir, Direction.from_degrees(elevation, true_dir.azimuth_deg + d_az)


# ================= DESIGN =================

class FilterDesigner:
    """Designs banks on one STFT grid for one array rotation, reusing the signal-independent parts."""

    def __init__(self, cfg: ExperimentConfig, hrtf: HrtfSet,
                 win_len: int = config.STFT_WIN_LEN, hop: int = config.STFT_HOP):
        self.cfg = cfg
        self.hrtf = hrtf
        self.win_len = win_len
        self.hop = hop
        self.freqs = np.fft.rfftfreq(win_len, 1.0 / cfg.fs)
        self.geometry = ArrayGeometry.semicircular(rotation_deg=cfg.head_rotation_deg)
        self._steering: Optional[SteeringMatrix] = None
        self._grid_hrtf: Optional[np.ndarray] = None
        self._bsm: Optional[BinauralFilterBank] = None

    @property
    def steering(self) -> SteeringMatrix:
        if self._steering is None:
            grid, _ = sh_core.nearly_uniform_grid(self.cfg.grid_size)
            with stage_timer.timed("Steering matrix", f"L={len(grid)}, F={self.freqs.size}"):
                self._steering = sh_core.steering_matrix(self.geometry, grid, self.freqs)
        return self._steering

    @property
    def grid_hrtf(self) -> np.ndarray:
        """HRTFs at the steering directions, [F, L, 2]."""
        if self._grid_hrtf is None:
            self._grid_hrtf = sh_core.hrtf_response(self.hrtf, self.steering.directions, self.freqs)
        return self._grid_hrtf

    def bsm(self) -> BinauralFilterBank:
        if self._bsm is None:
            with stage_timer.timed("Design BSM", f"max_iter {self.cfg.magls_max_iter}"):
                self._bsm = design_bsm(self.steering, self.hrtf, max_iter=self.cfg.magls_max_iter)
        return self._bsm

    def design(self, method: str, tf: Optional[TimeFreqSignal], directions: Sequence[Direction]) -> BinauralFilterBank:
        if method == "BSM":
            return self.bsm()
        if tf is None:
            raise ValueError(f"{method} needs the array capture to estimate source statistics")
        if method == "COM":
            bsm = self.bsm()
            with stage_timer.timed("Design COM", f"{len(directions)} source(s)"):
                return design_com(tf, self.geometry, directions, self.hrtf, bsm)
        if method == "DBSM":
            with stage_timer.timed("Design d-BSM", f"max_iter {self.cfg.magls_max_iter}"):
                return design_dbsm(tf, self.geometry, directions, self.hrtf, self.steering,
                                   snr_db=self.cfg.scenario.snr_db, max_iter=self.cfg.magls_max_iter)
        raise ValueError(f"No filter bank for method '{method}'")

    def stft(self, samples: np.ndarray) -> TimeFreqSignal:
        return stft(samples, self.cfg.fs, self.win_len, self.hop)


def design_banks(cfg: ExperimentConfig, hrtf: HrtfSet, capture: Capture,
                 designer: Optional[FilterDesigner] = None) -> Dict[str, BinauralFilterBank]:
    """Filter banks for every requested method that has one (REFERENCE has none)."""
    designer = designer or FilterDesigner(cfg, hrtf)
    _, assumed = assumed_direction(cfg, cfg.scenario.source_direction)
    needs_tf = any(m in INFORMED_METHODS for m in cfg.methods)
    tf = designer.stft(capture.mics) if needs_tf else None
    return {m: designer.design(m, tf, [assumed]) for m in cfg.methods if m != "REFERENCE"}


# ================= OUTPUT =================

def write_wav(path, samples: np.ndarray, fs: int = config.FS, peak_dbfs: Optional[float] = config.OUTPUT_PEAK_DBFS) -> Path:
    """32-bit float WAV, scaled to the given peak level (None keeps the samples as they are)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(samples, dtype=float)
    if peak_dbfs is not None:
        peak = float(np.max(np.abs(data))) if data.size else 0.0
        if peak > 0:
            data = data * (10.0 ** (peak_dbfs / 20.0) / peak)
    sf.write(str(path), data.astype(np.float32), fs, subtype="FLOAT")
    return path


def _start_run(cfg: ExperimentConfig) -> Path:
    set_run_context(cfg.scenario_id, cfg.head_rotation_deg, cfg.doa_error_deg[0], cfg.doa_error_deg[1], cfg.seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ================= DRIVERS =================

def run_scenario(cfg: ExperimentConfig, hrtf: Optional[HrtfSet] = None) -> Dict[str, MetricReport]:
    """Simulate, design each bank, render through the STFT and score NMSE against the reference."""
    hrtf = hrtf or load_hrtf(cfg.hrtf_spec, cfg.fs)
    out = _start_run(cfg)
    try:
        capture = simulate_capture(cfg, hrtf)
        designer = FilterDesigner(cfg, hrtf)
        tf = designer.stft(capture.mics)
        ref_tf = designer.stft(capture.reference)
        _, assumed = assumed_direction(cfg, cfg.scenario.source_direction)
        reports: Dict[str, MetricReport] = {}
        rows: List[dict] = []
        diffuse_rows: List[dict] = []
        write_wav(out / "reference.wav", capture.reference, cfg.fs)
        for method in cfg.methods:
            update_run_context(method=method)
            diffuse = None
            if method == "REFERENCE":
                est_tf = ref_tf
            else:
                bank = designer.design(method, tf, [assumed])
                with stage_timer.timed(f"Render {method}", f"{tf.num_frames} frames"):
                    est_tf = bank.apply(tf)
                write_wav(out / f"render_{method.lower()}.wav", istft(est_tf), cfg.fs)
                diffuse = diffuse_nmse(bank, designer.steering, designer.grid_hrtf)
            reports[method] = MetricReport(method, tf.freqs, nmse_profile(est_tf, ref_tf), diffuse_nmse=diffuse)
            rows.extend(report.build_nmse_rows(reports[method]))
            band = reports[method].band_mean_nmse_db()
            logger.info("%s: band-mean NMSE left %.2f dB, right %.2f dB", method, band[0], band[1])
            if diffuse is not None:
                diffuse_rows.extend(report.build_diffuse_rows(reports[method]))
                band = reports[method].band_mean_diffuse_nmse_db()
                logger.info("%s: band-mean diffuse NMSE left %.2f dB, right %.2f dB", method, band[0], band[1])
        report.write_report_csv(out / report.NMSE_FILE, report.NMSE_COLUMNS, rows)
        if diffuse_rows:
            report.write_report_csv(out / report.DIFFUSE_FILE, report.DIFFUSE_COLUMNS, diffuse_rows)
        return reports
    except (ValueError, RuntimeError) as exc:
        raise ExperimentError(f"[{cfg.scenario_id}, rotation {cfg.head_rotation_deg:g} deg] {exc}") from exc
    finally:
        clear_run_context()


@dataclass
class _CueSet:
    itd: List[float] = field(default_factory=list)
    ild: List[float] = field(default_factory=list)
    itd_error: List[float] = field(default_factory=list)
    ild_error: List[float] = field(default_factory=list)


def _cues(ir: np.ndarray, fs: int, bands: ErbBank) -> Tuple[float, np.ndarray]:
    return itd(ir[:, 0], ir[:, 1], fs), ild_bands(ir[:, 0], ir[:, 1], bands)


def _score(cues: _CueSet, test: Tuple[float, np.ndarray], ref: Tuple[float, np.ndarray]) -> None:
    cues.itd.append(test[0])
    cues.ild.append(float(np.mean(test[1])))
    cues.itd_error.append(abs(test[0] - ref[0]))
    cues.ild_error.append(float(np.mean(np.abs(test[1] - ref[1]))))


def _cue_reports(cfg: ExperimentConfig, azimuths: np.ndarray, cues: Dict[str, _CueSet], ref: _CueSet,
                 path: Path) -> Dict[str, MetricReport]:
    reports, rows = {}, []
    for method in cfg.methods:
        update_run_context(method=method)
        c = cues[method]
        reports[method] = MetricReport(method, azimuths_deg=azimuths, itd=np.array(c.itd), ild=np.array(c.ild),
                                       itd_error=np.array(c.itd_error), ild_error=np.array(c.ild_error))
        rows.extend(report.build_sweep_rows(reports[method], ref.itd, ref.ild))
    report.write_report_csv(path, report.SWEEP_COLUMNS, rows)
    return reports


def _evaluate_direction(banks: Dict[str, BinauralFilterBank], designer: FilterDesigner, true_dir: Direction,
                        bands: ErbBank, cues: Dict[str, _CueSet], ref_cues: _CueSet) -> None:
    fs = designer.cfg.fs
    ref = _cues(reference_binaural_ir(designer.hrtf, true_dir, designer.freqs), fs, bands)
    ref_cues.itd.append(ref[0])
    ref_cues.ild.append(float(np.mean(ref[1])))
    for method in designer.cfg.methods:
        if method == "REFERENCE":
            test = ref
        else:
            test = _cues(free_field_binaural_ir(banks[method], designer.geometry, true_dir), fs, bands)
        _score(cues[method], test, ref)


def sweep_doa(cfg: ExperimentConfig, hrtf: Optional[HrtfSet] = None) -> Dict[str, MetricReport]:
    """Per source azimuth: simulate the room capture, design, and score free-field ITD/ILD from that direction."""
    hrtf = hrtf or load_hrtf(cfg.hrtf_spec, cfg.fs)
    out = _start_run(cfg)
    try:
        designer = FilterDesigner(cfg, hrtf)
        bands = erb_bank(cfg.fs)
        azimuths = cfg.sweep_azimuths()
        needs_capture = any(m in INFORMED_METHODS for m in cfg.methods)
        cues = {m: _CueSet() for m in cfg.methods}
        ref_cues = _CueSet()
        for i, az in enumerate(azimuths):
            source = Direction.from_degrees(90.0, az)
            true_dir, assumed = assumed_direction(cfg, source)
            tf = None
            if needs_capture:
                scn = dataclasses.replace(cfg.scenario, source_direction=source)
                tf = designer.stft(simulate_capture(cfg, scenario=scn).mics)
            banks = {m: designer.design(m, tf, [assumed]) for m in cfg.methods if m != "REFERENCE"}
            _evaluate_direction(banks, designer, true_dir, bands, cues, ref_cues)
            logger.info("Sweep %d/%d: azimuth %.1f deg done", i + 1, azimuths.size, az)
        return _cue_reports(cfg, azimuths, cues, ref_cues, out / report.SWEEP_FILE)
    except (ValueError, RuntimeError) as exc:
        raise ExperimentError(f"[{cfg.scenario_id} sweep, rotation {cfg.head_rotation_deg:g} deg] {exc}") from exc
    finally:
        clear_run_context()


def off_source_analysis(cfg: ExperimentConfig, hrtf: Optional[HrtfSet] = None) -> Dict[str, MetricReport]:
    """Design once for the scenario's source; score free-field ITD/ILD at every sweep azimuth."""
    hrtf = hrtf or load_hrtf(cfg.hrtf_spec, cfg.fs)
    out = _start_run(cfg)
    try:
        designer = FilterDesigner(cfg, hrtf)
        banks = design_banks(cfg, hrtf, simulate_capture(cfg), designer)
        bands = erb_bank(cfg.fs)
        azimuths = cfg.sweep_azimuths()
        cues = {m: _CueSet() for m in cfg.methods}
        ref_cues = _CueSet()
        with stage_timer.timed("Off-source evaluation", f"{azimuths.size} azimuths"):
            for az in azimuths:
                true_dir = sh_core.rotate_azimuth([Direction.from_degrees(90.0, az)], cfg.head_rotation_deg)[0]
                _evaluate_direction(banks, designer, true_dir, bands, cues, ref_cues)
        return _cue_reports(cfg, azimuths, cues, ref_cues, out / report.OFF_SOURCE_FILE)
    except (ValueError, RuntimeError) as exc:
        raise ExperimentError(f"[{cfg.scenario_id} off-source, rotation {cfg.head_rotation_deg:g} deg] {exc}") from exc
    finally:
        clear_run_context()


def directional_error_map(cfg: ExperimentConfig, hrtf: Optional[HrtfSet] = None) -> Dict[str, MetricReport]:
    """Directional error over head-frame horizontal azimuths and the STFT frequency grid, per ear."""
    hrtf = hrtf or load_hrtf(cfg.hrtf_spec, cfg.fs)
    out = _start_run(cfg)
    try:
        designer = FilterDesigner(cfg, hrtf)
        needs_capture = any(m in INFORMED_METHODS for m in cfg.methods)
        capture = simulate_capture(cfg) if needs_capture else None
        tf = designer.stft(capture.mics) if capture is not None else None
        _, assumed = assumed_direction(cfg, cfg.scenario.source_direction)
        azimuths = cfg.sweep_azimuths()
        dirs = [Direction.from_degrees(90.0, az) for az in azimuths]
        reports, rows = {}, []
        for method in cfg.methods:
            update_run_context(method=method)
            if method == "REFERENCE":
                surface = np.zeros((designer.freqs.size, len(dirs), 2))
            else:
                bank = designer.design(method, tf, [assumed])
                with stage_timer.timed(f"Directional error {method}", f"{len(dirs)} directions"):
                    surface = directional_error_surface(bank, designer.geometry, hrtf, dirs)
            reports[method] = MetricReport(method, designer.freqs, azimuths_deg=azimuths, directional_error=surface)
            rows.extend(report.build_dirmap_rows(reports[method]))
        report.write_report_csv(out / report.DIRMAP_FILE, report.DIRMAP_COLUMNS, rows)
        return reports
    except (ValueError, RuntimeError) as exc:
        raise ExperimentError(f"[{cfg.scenario_id} dirmap, rotation {cfg.head_rotation_deg:g} deg] {exc}") from exc
    finally:
        clear_run_context()
