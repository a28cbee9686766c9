"""
End-to-end properties of the three renderers: algebraic identities of the
informed filters, the MagLS solver, the high-SNR reconstruction regime, and the
ordering claims of the rotation, DOA sweep and off-source experiments.
"""
import dataclasses

import numpy as np
import pytest

from informed_bsm import config, experiments, scene_sim, sh_core
from informed_bsm.filters import (
    bsm_ls, com_filter, dbsm_filter, design_bsm, lcmv_weights, render_binaural, solve_magls_batch,
)
from informed_bsm.metrics import directional_error_surface, nmse, nmse_profile, to_db
from informed_bsm.sh_core import Direction, hrtf_response, steering_matrix
from informed_bsm.spectral import stft


def _random_pd(crandn, m):
    a = crandn(m, 2 * m)
    return a @ a.conj().T / (2 * m) + 0.1 * np.eye(m)


def _fraction(mask) -> float:
    return float(np.mean(np.asarray(mask)))


# ================= FILTER ALGEBRA =================

def test_com_filter_equals_explicit_pipeline(rng, crandn):
    for _ in range(200):
        n_src = int(rng.integers(1, 3))
        V, h = crandn(6, 50), crandn(50, 2)
        c_bsm = bsm_ls(V, h, 100.0)
        V_d, h_d = crandn(6, n_src), crandn(n_src, 2)
        W_d = lcmv_weights(V_d, _random_pd(crandn, 6))
        x = crandn(6)

        s_d = W_d @ x
        x_r = x - V_d @ s_d
        explicit = h_d.T @ s_d + c_bsm.conj().T @ x_r
        composed = com_filter(c_bsm, V_d, W_d, h_d).conj().T @ x
        assert np.linalg.norm(composed - explicit) < 1e-12 * np.linalg.norm(explicit)


def test_lcmv_constraint_holds_exactly(rng, crandn):
    for _ in range(200):
        n_src = int(rng.integers(1, 3))
        V_d = crandn(6, n_src)
        W_d = lcmv_weights(V_d, _random_pd(crandn, 6))
        assert np.linalg.norm(W_d @ V_d - np.eye(n_src)) < 1e-10


def test_dbsm_without_sources_is_bsm(crandn):
    V_r, h_r = crandn(6, 50), crandn(50, 2)
    sigma_r2, sigma_n2 = 0.8, 0.05
    c = dbsm_filter(np.zeros((6, 0)), V_r, np.zeros((0, 0)), sigma_r2, sigma_n2, np.zeros((0, 2)), h_r)
    expected = bsm_ls(V_r, h_r, sigma_r2 / sigma_n2)
    assert np.linalg.norm(c - expected) < 1e-10 * np.linalg.norm(expected)


def test_dbsm_with_white_source_statistics_is_stacked_bsm(crandn):
    V_d, h_d = crandn(6, 2), crandn(2, 2)
    V_r, h_r = crandn(6, 50), crandn(50, 2)
    sigma_r2, sigma_n2 = 0.6, 0.02
    c = dbsm_filter(V_d, V_r, sigma_r2 * np.eye(2), sigma_r2, sigma_n2, h_d, h_r)
    expected = bsm_ls(np.hstack([V_d, V_r]), np.vstack([h_d, h_r]), sigma_r2 / sigma_n2)
    assert np.linalg.norm(c - expected) < 1e-10 * np.linalg.norm(expected)


# ================= MAGLS =================

def test_magls_objective_never_increases(crandn):
    A = crandn(50, 6, 400)
    target = np.abs(crandn(50, 400, 2))
    sol = solve_magls_batch(A, target, 0.01, max_iter=200)
    scale = np.maximum(sol.objectives[0], np.sum(target ** 2, axis=1))
    assert np.all(np.diff(sol.objectives, axis=0) <= 1e-12 * scale)
    assert np.all(sol.objectives[-1] <= sol.objectives[0])


def test_magls_reaches_feasible_targets(crandn):
    A = crandn(50, 6, 6)
    target = np.abs(crandn(50, 6, 2)) + 0.1
    sol = solve_magls_batch(A, target, 0.0, max_iter=50)
    assert np.all(sol.objectives[-1] < 1e-10 * np.sum(target ** 2, axis=1))
    assert np.all(sol.converged)


# ================= RECONSTRUCTION =================

def test_high_snr_bsm_reconstructs_on_grid_source(geometry, small_hrtf):
    freqs = np.fft.rfftfreq(config.STFT_WIN_LEN, 1.0 / config.FS)
    freqs = freqs[freqs < config.MAGLS_CUTOFF_HZ]
    dirs = [Direction.from_degrees(90.0, az) for az in (40.0, 100.0, 160.0, 220.0, 280.0, 340.0)]
    V = steering_matrix(geometry, dirs, freqs).values
    h = hrtf_response(small_hrtf, dirs, freqs)
    for i, f in enumerate(freqs):
        c = bsm_ls(V[i], h[i], 1e12)
        rendered = c.conj().T @ V[i][:, 0]
        assert nmse(rendered, h[i, 0], f) < 1e-6


def test_anechoic_capture_renders_through_com_to_the_reference(tmp_path, hrtf):
    cfg = experiments.load_experiment_config("scenario1", methods=("COM",), max_image_order=0, grid_size=50,
                                             magls_max_iter=10, reference_method="exact", output_dir=str(tmp_path))
    cfg = cfg.with_overrides(scenario=dataclasses.replace(cfg.scenario, snr_db=None, duration=1.0))
    capture = experiments.simulate_capture(cfg, hrtf)
    assert len(capture.images) == 1
    bank = experiments.design_banks(cfg, hrtf, capture)["COM"]
    rendered = render_binaural(bank, capture.mics, cfg.fs)
    assert rendered.shape == capture.reference.shape

    profile = nmse_profile(stft(rendered, cfg.fs), stft(capture.reference, cfg.fs))
    freqs = bank.freqs
    band = (freqs >= 200.0) & (freqs < config.MAGLS_CUTOFF_HZ)
    assert np.all(np.nanmean(to_db(profile[band]), axis=0) < -20.0)


def test_directional_error_is_high_where_the_hrtf_is_weak(geometry, hrtf):
    freqs = np.array([4000.0, 8000.0])
    V = steering_matrix(geometry, sh_core.nearly_uniform_grid(config.GRID_SIZE)[0], freqs)
    bank = design_bsm(V, hrtf, max_iter=2000)
    dirs = [Direction.from_degrees(90.0, az) for az in np.arange(0.0, 360.0, 5.0)]
    err = directional_error_surface(bank, geometry, hrtf, dirs)
    mag = np.abs(hrtf_response(hrtf, dirs, freqs))
    for i in range(freqs.size):
        for ear in range(2):
            assert np.corrcoef(err[i, :, ear], mag[i, :, ear])[0, 1] < -0.4


# ================= ROOM =================

@pytest.mark.slow
@pytest.mark.parametrize("name", ["scenario1", "scenario2", "scenario3"])
def test_room_decay_matches_configured_t60(name):
    cfg = experiments.load_experiment_config(name, full_scale=True)
    scn = cfg.scenario
    images = scene_sim.image_sources(scn, scene_sim.default_max_order(scn.room_dims, scn.t60))
    rir = scene_sim.room_impulse_response(images, scn.fs)
    measured = scene_sim.schroeder_decay_time(rir, scn.fs, complete_until=images.complete_until)
    assert measured == pytest.approx(scn.t60, rel=0.25)


# ================= EXPERIMENTS =================

def _desk(tmp, **changes):
    changes.setdefault("max_image_order", 6)
    return experiments.load_experiment_config("scenario1", output_dir=str(tmp), **changes)


@pytest.mark.slow
def test_nmse_grows_with_head_rotation(tmp_path, hrtf):
    right = {}
    for rotation in (0.0, 50.0, 90.0):
        cfg = _desk(tmp_path / f"rot{rotation:g}", methods=("BSM",), head_rotation_deg=rotation)
        right[rotation] = experiments.run_scenario(cfg, hrtf)["BSM"].band_mean_nmse_db()[1]
    assert right[90.0] > right[50.0] > right[0.0]


@pytest.fixture(scope="module")
def rotated_sweeps(tmp_path_factory, hrtf):
    """Source sweeps at 50 deg rotation with exact and 10 deg-off assumed directions."""
    out = {}
    for doa_az in (0.0, 10.0):
        cfg = _desk(tmp_path_factory.mktemp(f"sweep{doa_az:g}"), methods=("BSM", "COM", "DBSM"),
                    head_rotation_deg=50.0, doa_error_deg=(doa_az, 0.0), sweep_step_deg=30.0)
        out[doa_az] = experiments.sweep_doa(cfg, hrtf)
    return out


@pytest.mark.slow
def test_informed_methods_improve_ild_at_the_source(rotated_sweeps):
    reports = rotated_sweeps[0.0]
    bsm = reports["BSM"].ild_error
    for method in ("COM", "DBSM"):
        assert _fraction(reports[method].ild_error < bsm) >= 0.7
    for method in ("BSM", "COM", "DBSM"):
        assert _fraction(reports[method].itd_error < config.ITD_JND_S) >= 0.7


@pytest.mark.slow
def test_doa_error_shrinks_the_informed_advantage(rotated_sweeps):
    def advantage(reports, method):
        return float(np.mean(reports["BSM"].ild_error - reports[method].ild_error))

    for method in ("COM", "DBSM"):
        assert advantage(rotated_sweeps[10.0], method) < advantage(rotated_sweeps[0.0], method)


@pytest.mark.slow
def test_off_source_trade_off(tmp_path, hrtf):
    cfg = _desk(tmp_path, methods=("BSM", "COM", "DBSM"), sweep_step_deg=20.0)
    reports = experiments.off_source_analysis(cfg, hrtf)
    azimuths = reports["BSM"].azimuths_deg
    at_source = int(np.flatnonzero(np.isclose(azimuths, 40.0))[0])
    for method in ("COM", "DBSM"):
        assert reports[method].ild_error[at_source] < reports["BSM"].ild_error[at_source]
    behind = (azimuths >= 180.0) & (azimuths <= 260.0)
    assert np.mean(reports["DBSM"].ild_error[behind]) <= np.mean(reports["COM"].ild_error[behind])
