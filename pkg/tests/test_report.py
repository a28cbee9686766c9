import math

import numpy as np
import pytest

from informed_bsm import report, run_context, stage_timer
from informed_bsm.metrics import MetricReport
from informed_bsm.run_context import (
    PROVENANCE_FIELDS, clear_run_context, get_run_context, set_run_context, update_run_context,
)


@pytest.fixture
def context():
    set_run_context("scenario1", 50.0, 10.0, 0.0, seed=7)


def _nmse_report(method="BSM"):
    freqs = np.array([1000.0, 2000.0, 5000.0, 12000.0])
    nmse = np.array([[0.5, 0.5], [0.1, 0.01], [0.001, 0.1], [1.0, 1.0]])
    return MetricReport(method, freqs=freqs, nmse=nmse)


def _sweep_report(method="BSM"):
    return MetricReport(method, azimuths_deg=np.array([0.0, 90.0]), itd=np.array([0.0, -6e-4]),
                        ild=np.array([0.0, 8.0]), itd_error=np.array([2e-5, 1e-4]), ild_error=np.array([0.5, 2.5]))


# ================= RUN CONTEXT =================

def test_run_context_lifecycle():
    assert get_run_context() is None
    set_run_context("scenario2", 0.0, seed=3)
    update_run_context(method="COM")
    ctx = get_run_context()
    assert ctx["method"] == "COM"
    assert ctx["seed"] == 3
    assert set(ctx) == set(PROVENANCE_FIELDS)
    assert clear_run_context() == ctx
    assert get_run_context() is None


def test_update_run_context_errors():
    with pytest.raises(RuntimeError):
        update_run_context(method="BSM")
    set_run_context("scenario1", 0.0)
    with pytest.raises(ValueError):
        update_run_context(room="large")


# ================= STAGE TIMER =================

def test_stage_timer_records_even_on_error(capsys):
    stage_timer.record("load", 0.5, "hrtf")
    with pytest.raises(KeyError):
        with stage_timer.timed("design", "BSM"):
            raise KeyError("x")
    stages = stage_timer.get_and_clear()
    assert [s["stage"] for s in stages] == ["load", "design"]
    assert stages[1]["seconds"] >= 0.0
    assert stage_timer.get_and_clear() == []
    stage_timer.print_breakdown(stages)
    out = capsys.readouterr().out
    assert "Time per stage" in out
    assert "Total" in out


def test_print_breakdown_is_silent_without_stages(capsys):
    stage_timer.print_breakdown([])
    assert capsys.readouterr().out == ""


# ================= ROWS =================

def test_rows_need_a_context():
    with pytest.raises(RuntimeError):
        report.build_nmse_rows(_nmse_report())


def test_nmse_rows_carry_provenance(context):
    rows = report.build_nmse_rows(_nmse_report("DBSM"))
    assert len(rows) == 4
    assert rows[1]["method"] == "DBSM"
    assert rows[1]["rotation_deg"] == 50.0
    assert rows[1]["doa_err_az_deg"] == 10.0
    assert rows[1]["nmse_right_db"] == pytest.approx(-20.0)
    assert set(rows[0]) == set(report.NMSE_COLUMNS)


def test_diffuse_rows_carry_provenance(context):
    rep = _nmse_report("COM")
    rep.diffuse_nmse = np.array([[1.0, 0.1], [0.01, 0.01], [0.5, 0.5], [1e-3, 1.0]])
    rows = report.build_diffuse_rows(rep)
    assert len(rows) == 4
    assert rows[0]["method"] == "COM"
    assert rows[0]["seed"] == 7
    assert rows[0]["diffuse_nmse_right_db"] == pytest.approx(-10.0)
    assert rows[3]["diffuse_nmse_left_db"] == pytest.approx(-30.0)
    assert set(rows[0]) == set(report.DIFFUSE_COLUMNS)


def test_sweep_dirmap_and_decay_rows(context):
    sweep = report.build_sweep_rows(_sweep_report(), [0.0, -6.5e-4], [0.0, 9.0])
    assert sweep[1]["itd_ref_s"] == -6.5e-4
    assert set(sweep[0]) == set(report.SWEEP_COLUMNS)
    dirmap = MetricReport("COM", freqs=np.array([100.0, 200.0]), azimuths_deg=np.array([0.0, 5.0, 10.0]),
                          directional_error=np.arange(12.0).reshape(2, 3, 2))
    rows = report.build_dirmap_rows(dirmap)
    assert len(rows) == 6
    assert rows[1]["frequency_hz"] == 200.0
    assert rows[1]["error_left"] == 6.0
    decay = report.build_decay_rows(0.3, 0.31, 10, 4000)
    assert decay[0]["method"] is None
    assert set(decay[0]) == set(report.DECAY_COLUMNS)


# ================= CSV =================

def test_write_report_csv_formats_values(tmp_path, context):
    rows = report.build_decay_rows(0.3, 1.0 / 3.0, 10, 4000)
    path = report.write_report_csv(tmp_path / "out" / report.DECAY_FILE, report.DECAY_COLUMNS, rows)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(report.DECAY_COLUMNS)
    assert lines[1] == "scenario1,,50,10,0,7,0.3,0.3333333333,10,4000"


def test_write_report_csv_rejects_schema_mismatch(tmp_path, context):
    rows = report.build_decay_rows(0.3, 0.3, 10, 4000)
    rows[0]["extra"] = 1
    with pytest.raises(ValueError):
        report.write_report_csv(tmp_path / "bad.csv", report.DECAY_COLUMNS, rows)


def test_write_is_byte_stable(tmp_path, context):
    rows = report.build_nmse_rows(_nmse_report())
    a = report.write_report_csv(tmp_path / "a.csv", report.NMSE_COLUMNS, rows)
    b = report.write_report_csv(tmp_path / "b.csv", report.NMSE_COLUMNS, rows)
    assert a.read_bytes() == b.read_bytes()


# ================= SUMMARY =================

def test_summarize_run(tmp_path, context):
    rows = report.build_nmse_rows(_nmse_report("BSM")) + report.build_nmse_rows(_nmse_report("COM"))
    report.write_report_csv(tmp_path / report.NMSE_FILE, report.NMSE_COLUMNS, rows)
    run_context.update_run_context(method="BSM")
    report.write_report_csv(tmp_path / report.SWEEP_FILE, report.SWEEP_COLUMNS,
                            report.build_sweep_rows(_sweep_report(), [0.0, 0.0], [0.0, 0.0]))
    summary = report.summarize_run(tmp_path)
    assert [row["method"] for row in summary] == ["BSM", "COM"]
    bsm = summary[0]
    assert bsm["nmse_band_left_db"] == pytest.approx(-20.0)
    assert bsm["nmse_band_right_db"] == pytest.approx(-15.0)
    assert bsm["mean_itd_error_s"] == pytest.approx(6e-5)
    assert bsm["mean_ild_error_db"] == pytest.approx(1.5)
    assert bsm["num_azimuths"] == 2
    assert summary[1]["num_azimuths"] is None
    path = report.write_report_csv(tmp_path / report.SUMMARY_FILE, report.SUMMARY_COLUMNS, summary)
    assert len(report.read_report_csv(path)) == 2


def test_summarize_run_errors(tmp_path):
    with pytest.raises(ValueError):
        report.summarize_run(tmp_path / "missing")
    with pytest.raises(ValueError):
        report.summarize_run(tmp_path)


def test_summary_handles_empty_band(tmp_path, context):
    rows = report.build_nmse_rows(MetricReport("BSM", freqs=np.array([100.0]), nmse=np.array([[0.1, 0.1]])))
    report.write_report_csv(tmp_path / report.NMSE_FILE, report.NMSE_COLUMNS, rows)
    summary = report.summarize_run(tmp_path)
    assert math.isnan(summary[0]["nmse_band_left_db"])
