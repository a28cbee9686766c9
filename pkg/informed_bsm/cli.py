"""
Command-line entry point: simulate, design, render, evaluate, sweep, dirmap, report.

  python -m informed_bsm evaluate --scenario scenario1 --rotation-deg 50
  python -m informed_bsm sweep --scenario 1 --method BSM --method DBSM --off-source
  python -m informed_bsm report runs
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import soundfile as sf

from . import config
from . import experiments
from . import report
from . import stage_timer
from .filters import load_filter_bank, render_binaural, save_filter_bank
from .hrtf_io import load_hrtf
from .run_context import clear_run_context, set_run_context

logger = logging.getLogger(__name__)


def _banner(title: str, *lines: str) -> None:
    print("\n" + "=" * 60)
    print(f"  {title}")
    print("=" * 60)
    for line in lines:
        print(f"\n  {line}")
    if lines:
        print("=" * 60)


def _config_from_args(args) -> experiments.ExperimentConfig:
    return experiments.load_experiment_config(
        args.scenario,
        full_scale=args.full_scale,
        methods=tuple(args.method) if args.method else None,
        head_rotation_deg=args.rotation_deg,
        doa_error_deg=tuple(args.doa_error_deg) if args.doa_error_deg else None,
        seed=args.seed,
        hrtf_spec=args.hrtf,
        output_dir=args.output,
        max_image_order=args.max_image_order,
        magls_max_iter=args.magls_max_iter,
        sweep_step_deg=args.sweep_step_deg,
    )


def _describe(cfg: experiments.ExperimentConfig) -> str:
    scn = cfg.scenario
    return (f"{cfg.scenario_id}: room {'x'.join(f'{d:g}' for d in scn.room_dims)} m, T60 {scn.t60:g} s, "
            f"rotation {cfg.head_rotation_deg:g} deg, methods {','.join(cfg.methods)}, seed {cfg.seed}")


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    print("\n[Step 1] Loading HRTF set...", flush=True)
    hrtf = load_hrtf(cfg.hrtf_spec, cfg.fs)
    print(f"   {len(hrtf.grid)} directions ({hrtf.source}).")
    print("\n[Step 2] Simulating room capture and binaural reference...", flush=True)
    capture = experiments.simulate_capture(cfg, hrtf)
    out = Path(cfg.output_dir)
    experiments.write_wav(out / "capture.wav", capture.mics, cfg.fs, peak_dbfs=None)
    experiments.write_wav(out / "reference.wav", capture.reference, cfg.fs)
    print(f"   {len(capture.images)} image sources (order {capture.max_order}); "
          f"capture and reference written to {out}/")
    print("\n[Step 3] Checking the room decay...", flush=True)
    try:
        with stage_timer.timed("Schroeder decay"):
            measured = experiments.measure_decay(capture, cfg.fs)
        print(f"   Configured T60 {cfg.scenario.t60:.3f} s, Schroeder decay {measured:.3f} s "
              f"({100.0 * (measured / cfg.scenario.t60 - 1.0):+.1f}%)")
    except ValueError as e:
        # low image orders leave too short a complete response to fit
        measured = float("nan")
        print(f"   Configured T60 {cfg.scenario.t60:.3f} s, decay not measurable: {e}")
    set_run_context(cfg.scenario_id, cfg.head_rotation_deg, cfg.doa_error_deg[0], cfg.doa_error_deg[1], cfg.seed)
    try:
        rows = report.build_decay_rows(cfg.scenario.t60, measured, capture.max_order, len(capture.images))
        report.write_report_csv(out / report.DECAY_FILE, report.DECAY_COLUMNS, rows)
    finally:
        clear_run_context()
    return 0


def cmd_design(args) -> int:
    cfg = _config_from_args(args)
    hrtf = load_hrtf(cfg.hrtf_spec, cfg.fs)
    print("\n[Step 1] Simulating room capture...", flush=True)
    capture = experiments.simulate_capture(cfg)
    print("\n[Step 2] Designing filter banks...", flush=True)
    banks = experiments.design_banks(cfg, hrtf, capture)
    out = Path(cfg.output_dir)
    for method, bank in banks.items():
        path = save_filter_bank(bank, out / f"filters_{method.lower()}.csv")
        print(f"   {method}: {bank.freqs.size} bins x {bank.num_mics} mics → {path}")
    experiments.write_wav(out / "capture.wav", capture.mics, cfg.fs, peak_dbfs=None)
    return 0


def cmd_render(args) -> int:
    if not args.filters or not args.capture:
        print("   ERROR: render needs --filters and --capture")
        return 1
    print("\n[Step 1] Loading filter bank and capture...", flush=True)
    bank = load_filter_bank(args.filters)
    capture, fs = sf.read(args.capture, dtype="float64", always_2d=True)
    if fs != config.FS:
        raise ValueError(f"{args.capture} is sampled at {fs} Hz, expected {config.FS} Hz")
    print(f"   {bank.method} bank, capture {capture.shape[0]} samples x {capture.shape[1]} channels")
    print("\n[Step 2] Rendering...", flush=True)
    with stage_timer.timed(f"Render {bank.method}", f"{capture.shape[0]} samples"):
        ears = render_binaural(bank, capture, fs)
    out = Path(args.output or config.OUTPUT_DIR) / f"render_{bank.method.lower()}.wav"
    experiments.write_wav(out, ears, fs)
    print(f"   Wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    print(f"\n[Step 1] Running {_describe(cfg)}", flush=True)
    reports = experiments.run_scenario(cfg)
    lo, hi = config.NMSE_BAND_HZ
    print(f"\n[Step 2] Band-mean NMSE ({lo / 1000:g}-{hi / 1000:g} kHz):")
    for method, rep in reports.items():
        left, right = rep.band_mean_nmse_db()
        line = f"   {method:10} left {left:8.2f} dB   right {right:8.2f} dB"
        if rep.diffuse_nmse is not None:
            d_left, d_right = rep.band_mean_diffuse_nmse_db()
            line += f"   (diffuse field: left {d_left:8.2f} dB, right {d_right:8.2f} dB)"
        print(line)
    print(f"\n   Reports and audio in {cfg.output_dir}/")
    return 0


def _print_cues(reports) -> None:
    for method, rep in reports.items():
        itd_ok = float(np.mean(rep.itd_within_jnd)) * 100.0
        ild_ok = float(np.mean(rep.ild_within_jnd)) * 100.0
        print(f"   {method:10} mean ITD error {np.mean(rep.itd_error) * 1e6:7.1f} us ({itd_ok:5.1f}% < JND)   "
              f"mean ILD error {np.mean(rep.ild_error):5.2f} dB ({ild_ok:5.1f}% < JND)")


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    label = "Off-source analysis" if args.off_source else "DOA sweep"
    print(f"\n[Step 1] {label}: {_describe(cfg)}, {cfg.sweep_azimuths().size} azimuths", flush=True)
    if args.off_source:
        reports = experiments.off_source_analysis(cfg)
    else:
        reports = experiments.sweep_doa(cfg)
    print("\n[Step 2] Interaural cue errors:")
    _print_cues(reports)
    return 0


def cmd_dirmap(args) -> int:
    cfg = _config_from_args(args)
    print(f"\n[Step 1] Directional error map: {_describe(cfg)}", flush=True)
    reports = experiments.directional_error_map(cfg)
    print("\n[Step 2] Mean directional error below and above the MagLS cutoff:")
    for method, rep in reports.items():
        low = rep.freqs < config.MAGLS_CUTOFF_HZ
        err = rep.directional_error
        print(f"   {method:10} below {np.mean(err[low]):.3f}   above {np.mean(err[~low]):.3f}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rows = report.summarize_run(run_dir)
    path = report.write_report_csv(run_dir / report.SUMMARY_FILE, report.SUMMARY_COLUMNS, rows)
    print(f"\n  {'method':10} {'rotation':>8} {'NMSE L dB':>10} {'NMSE R dB':>10} {'ITD err us':>11} {'ILD err dB':>11}")
    for row in rows:
        def fmt(value, scale=1.0, width=10):
            return f"{value * scale:{width}.2f}" if value is not None else f"{'-':>{width}}"
        print(f"  {row['method']:10} {row['rotation_deg']:>8} {fmt(row['nmse_band_left_db'])} "
              f"{fmt(row['nmse_band_right_db'])} {fmt(row['mean_itd_error_s'], 1e6, 11)} "
              f"{fmt(row['mean_ild_error_db'], 1.0, 11)}")
    print(f"\n   Summary written to {path}")
    return 0


COMMANDS = {
    "simulate": (cmd_simulate, "Simulate the array capture and binaural reference; check the room decay"),
    "design": (cmd_design, "Design filter banks from a simulated capture and save them as CSV"),
    "render": (cmd_render, "Render a capture WAV through a saved filter bank"),
    "evaluate": (cmd_evaluate, "Simulate, design, render and score NMSE against the reference and the diffuse field"),
    "sweep": (cmd_sweep, "ITD/ILD errors over source azimuths (or off-source with --off-source)"),
    "dirmap": (cmd_dirmap, "Directional error over horizontal azimuth and frequency"),
    "report": (cmd_report, "Summarise the CSV reports of a run directory"),
}


def _add_experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", type=str, default="scenario1",
                   help="Bundled scenario name (scenario1..3 or 1..3) or path to a JSON experiment config.")
    p.add_argument("--method", action="append", choices=list(experiments.METHODS), default=None,
                   help="Method to run; repeat for several. Default: the config's method list.")
    p.add_argument("--rotation-deg", type=float, default=None, help="Array rotation relative to the head.")
    p.add_argument("--doa-error-deg", type=float, nargs=2, metavar=("AZ", "EL"), default=None,
                   help="Error added to the assumed source direction (azimuth, elevation).")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--full-scale", action="store_true", help="Use the full T60, duration and image order.")
    p.add_argument("--hrtf", type=str, default=None,
                   help="HRIR-grid directory or analytic-sphere[(a_mm[, offset_deg])].")
    p.add_argument("--output", type=str, default=None, help=f"Output directory (default {config.OUTPUT_DIR}).")
    p.add_argument("--max-image-order", type=int, default=None)
    p.add_argument("--magls-max-iter", type=int, default=None)
    p.add_argument("--sweep-step-deg", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="informed_bsm", description="Binaural reproduction from a wearable array: "
                                     "BSM, COMPASS-BSM and directional BSM with simulation and metrics.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "report":
            p.add_argument("run_dir", type=str, help="Directory holding nmse.csv / sweep.csv / offsource.csv.")
            continue
        if name == "render":
            p.add_argument("--filters", type=str, default=None, help="Filter bank CSV written by 'design'.")
            p.add_argument("--capture", type=str, default=None, help="Multichannel capture WAV.")
            p.add_argument("--output", type=str, default=None)
            continue
        _add_experiment_args(p)
        if name == "sweep":
            p.add_argument("--off-source", action="store_true",
                           help="Design once for the configured source and evaluate every sweep azimuth.")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handler, help_text = COMMANDS[args.command]
    stage_timer.clear()
    _banner(f"BINAURAL REPRODUCTION: {args.command}", help_text)
    try:
        status = handler(args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"\n   ERROR: {e}")
        status = 1
    stage_timer.print_breakdown(stage_timer.get_and_clear())
    if status == 0:
        print("=" * 60)
        print(f"  {args.command} complete.")
        print("=" * 60 + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
