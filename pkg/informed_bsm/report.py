"""
CSV reports for experiment runs. One row per measurement, every row stamped with
the run's provenance (scenario, method, rotation, DOA error, seed).
Floats are written with %.10g so fixed seeds give byte-identical files.
"""
import csv
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import config
from .metrics import MetricReport
from .run_context import PROVENANCE_FIELDS, get_run_context

logger = logging.getLogger(__name__)

NMSE_FILE = "nmse.csv"
DIFFUSE_FILE = "diffuse_nmse.csv"
SWEEP_FILE = "sweep.csv"
OFF_SOURCE_FILE = "offsource.csv"
DIRMAP_FILE = "dirmap.csv"
DECAY_FILE = "decay.csv"
SUMMARY_FILE = "summary.csv"

# Schemas: provenance first, then one metric per column
NMSE_COLUMNS = PROVENANCE_FIELDS + ["frequency_hz", "nmse_left_db", "nmse_right_db"]
DIFFUSE_COLUMNS = PROVENANCE_FIELDS + ["frequency_hz", "diffuse_nmse_left_db", "diffuse_nmse_right_db"]
SWEEP_COLUMNS = PROVENANCE_FIELDS + [
    "azimuth_deg", "itd_s", "itd_ref_s", "ild_db", "ild_ref_db", "itd_error_s", "ild_error_db",
]
DIRMAP_COLUMNS = PROVENANCE_FIELDS + ["azimuth_deg", "frequency_hz", "error_left", "error_right"]
DECAY_COLUMNS = PROVENANCE_FIELDS + ["t60_configured_s", "t60_measured_s", "max_image_order", "num_images"]
SUMMARY_COLUMNS = PROVENANCE_FIELDS + [
    "nmse_band_left_db", "nmse_band_right_db", "mean_itd_error_s", "mean_ild_error_db", "num_azimuths",
]


def _provenance(method: Optional[str]) -> Dict[str, Any]:
    ctx = get_run_context()
    if ctx is None:
        raise RuntimeError("Report rows need a run context (scenario, rotation, seed); none is set")
    row = {name: ctx.get(name) for name in PROVENANCE_FIELDS}
    if method is not None:
        row["method"] = method
    return row


def build_nmse_rows(report: MetricReport) -> List[Dict[str, Any]]:
    """One row per frequency bin with per-ear NMSE in dB."""
    base = _provenance(report.method)
    nmse_db = report.nmse_db()
    return [
        {**base, "frequency_hz": f, "nmse_left_db": nmse_db[i, 0], "nmse_right_db": nmse_db[i, 1]}
        for i, f in enumerate(report.freqs)
    ]


def build_diffuse_rows(report: MetricReport) -> List[Dict[str, Any]]:
    """One row per bin with the bank's diffuse-field NMSE over the design grid, dB."""
    base = _provenance(report.method)
    diffuse_db = report.diffuse_nmse_db()
    return [
        {**base, "frequency_hz": f, "diffuse_nmse_left_db": diffuse_db[i, 0], "diffuse_nmse_right_db": diffuse_db[i, 1]}
        for i, f in enumerate(report.freqs)
    ]


def build_sweep_rows(report: MetricReport, itd_ref: Sequence[float], ild_ref: Sequence[float]) -> List[Dict[str, Any]]:
    """One row per sweep azimuth with test and reference cues and their errors."""
    base = _provenance(report.method)
    return [
        {
            **base,
            "azimuth_deg": az,
            "itd_s": report.itd[i],
            "itd_ref_s": itd_ref[i],
            "ild_db": report.ild[i],
            "ild_ref_db": ild_ref[i],
            "itd_error_s": report.itd_error[i],
            "ild_error_db": report.ild_error[i],
        }
        for i, az in enumerate(report.azimuths_deg)
    ]


def build_dirmap_rows(report: MetricReport) -> List[Dict[str, Any]]:
    """Azimuth-major rows of the directional error surface."""
    base = _provenance(report.method)
    err = report.directional_error
    rows = []
    for d, az in enumerate(report.azimuths_deg):
        for i, f in enumerate(report.freqs):
            rows.append({**base, "azimuth_deg": az, "frequency_hz": f,
                         "error_left": err[i, d, 0], "error_right": err[i, d, 1]})
    return rows


def build_decay_rows(t60_configured: float, t60_measured: float, max_order: int, num_images: int) -> List[Dict[str, Any]]:
    return [{**_provenance(None), "t60_configured_s": t60_configured, "t60_measured_s": t60_measured,
             "max_image_order": max_order, "num_images": num_images}]


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.10g" % float(value)
    return str(value)


def write_report_csv(path, schema: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    """Write rows under the schema header; rows with missing or extra columns are rejected."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    for i, row in enumerate(rows):
        if set(row) != set(schema):
            missing, extra = set(schema) - set(row), set(row) - set(schema)
            raise ValueError(f"Row {i} does not match the schema (missing {sorted(missing)}, extra {sorted(extra)})")
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(schema)
        for row in rows:
            writer.writerow([_format(row[name]) for name in schema])
    logger.debug("Wrote %d rows to %s", len(rows), path)
    return path


def read_report_csv(path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _to_float(text: str) -> float:
    return float(text) if text not in ("", None) else math.nan


def _group(rows: List[Dict[str, str]]) -> "OrderedDict[tuple, List[Dict[str, str]]]":
    groups: "OrderedDict[tuple, List[Dict[str, str]]]" = OrderedDict()
    for row in rows:
        groups.setdefault(tuple(row[name] for name in PROVENANCE_FIELDS), []).append(row)
    return groups


def _nanmean(values: List[float]) -> float:
    arr = np.asarray(values, dtype=float)
    return float(np.nanmean(arr)) if np.any(np.isfinite(arr)) else math.nan


def summarize_run(directory, band=config.NMSE_BAND_HZ) -> List[Dict[str, Any]]:
    """Band-mean NMSE and mean ITD/ILD errors per provenance group of a run directory."""
    root = Path(directory)
    if not root.is_dir():
        raise ValueError(f"Run directory {root} does not exist")
    summary: "OrderedDict[tuple, Dict[str, Any]]" = OrderedDict()

    def entry(key: tuple) -> Dict[str, Any]:
        if key not in summary:
            summary[key] = {**dict(zip(PROVENANCE_FIELDS, key)), "nmse_band_left_db": None,
                            "nmse_band_right_db": None, "mean_itd_error_s": None,
                            "mean_ild_error_db": None, "num_azimuths": None}
        return summary[key]

    if (root / NMSE_FILE).exists():
        for key, rows in _group(read_report_csv(root / NMSE_FILE)).items():
            inside = [r for r in rows if band[0] <= float(r["frequency_hz"]) <= band[1]]
            row = entry(key)
            row["nmse_band_left_db"] = _nanmean([_to_float(r["nmse_left_db"]) for r in inside])
            row["nmse_band_right_db"] = _nanmean([_to_float(r["nmse_right_db"]) for r in inside])
    for name in (SWEEP_FILE, OFF_SOURCE_FILE):
        if (root / name).exists():
            for key, rows in _group(read_report_csv(root / name)).items():
                row = entry(key)
                row["mean_itd_error_s"] = _nanmean([_to_float(r["itd_error_s"]) for r in rows])
                row["mean_ild_error_db"] = _nanmean([_to_float(r["ild_error_db"]) for r in rows])
                row["num_azimuths"] = len(rows)
    if not summary:
        raise ValueError(f"No {NMSE_FILE}, {SWEEP_FILE} or {OFF_SOURCE_FILE} in {root}")
    return list(summary.values())
