import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import signal as sps

from informed_bsm import config, sh_core
from informed_bsm.filters import (
    BinauralFilterBank, MagLsDivergenceError, RankDeficientSteeringError, SingularSystemError, bsm_ls, com_filter,
    dbsm_filter, dbsm_magls, design_bsm, design_com, design_dbsm, estimate_source_stats, lcmv, lcmv_weights,
    load_filter_bank, mag_ls, psd_sqrt, render_binaural, save_filter_bank, solve_magls, solve_magls_batch,
)
from informed_bsm.sh_core import Direction, nearly_uniform_grid, steering_matrix
from informed_bsm.spectral import SpatialCorrelation, TimeFreqSignal, estimate_correlation, stft

FS = 48000


def _random_pd(crandn, m):
    x = crandn(m, 3 * m)
    return x @ x.conj().T / (3 * m)


@pytest.fixture
def capture_tf(rng):
    return stft(rng.standard_normal((9600, 6)), FS)


@pytest.fixture
def coarse_bsm(geometry, small_hrtf):
    grid, _ = nearly_uniform_grid(50)
    freqs = np.fft.rfftfreq(config.STFT_WIN_LEN, 1.0 / FS)
    V = steering_matrix(geometry, grid, freqs)
    return V, design_bsm(V, small_hrtf, max_iter=10)


# ================= LEAST SQUARES =================

def test_bsm_ls_matches_closed_form(crandn):
    V, h = crandn(6, 40), crandn(40)
    c = bsm_ls(V, h, 100.0)
    expected = np.linalg.inv(V @ V.conj().T + np.eye(6) / 100.0) @ V @ h.conj()
    assert_allclose(c, expected, rtol=1e-10)


def test_bsm_ls_handles_both_ears_at_once(crandn):
    V, h = crandn(6, 40), crandn(40, 2)
    both = bsm_ls(V, h, 10.0)
    assert both.shape == (6, 2)
    assert_allclose(both[:, 1], bsm_ls(V, h[:, 1], 10.0))


def test_bsm_ls_rejects_non_positive_snr(crandn):
    with pytest.raises(ValueError):
        bsm_ls(crandn(6, 10), crandn(10), 0.0)


# ================= MAGLS =================

def test_magls_objective_never_increases(crandn):
    A = crandn(4, 6, 80)
    target = np.abs(crandn(4, 80, 2))
    sol = solve_magls_batch(A, target, 0.01, max_iter=200)
    obj = sol.objectives
    assert obj.shape[1:] == (4, 2)
    assert np.all(np.diff(obj, axis=0) <= 1e-12 * obj[0])
    assert sol.coefficients.shape == (4, 6, 2)


def test_magls_improves_on_its_starting_point(crandn):
    A = crandn(6, 100)
    target = np.abs(crandn(100))
    sol = solve_magls(A, target, 0.0, max_iter=500)
    assert sol.objectives[-1] < sol.objectives[0]
    assert isinstance(sol.iterations, int)


def test_magls_square_system_is_exact(crandn):
    A = crandn(6, 6)
    target = np.abs(crandn(6))
    sol = solve_magls(A, target, 0.0, max_iter=5)
    assert_allclose(np.abs(A.conj().T @ sol.coefficients), target, rtol=1e-8)
    assert sol.converged


def test_magls_zero_iterations_returns_initial_solution(crandn):
    A = crandn(6, 20)
    target = np.abs(crandn(20))
    sol = solve_magls(A, target, 0.1, init_phase_deg=0.0, max_iter=0)
    expected = np.linalg.solve(A @ A.conj().T + 0.1 * np.eye(6), A @ target)
    assert_allclose(sol.coefficients, expected, rtol=1e-10)
    assert sol.objectives.shape == (1,)


def test_magls_validation(crandn):
    A = crandn(1, 6, 20)
    with pytest.raises(ValueError):
        solve_magls_batch(A, np.ones((1, 20, 1)), -1.0)
    with pytest.raises(ValueError):
        solve_magls_batch(A, np.ones((1, 20, 1)), 0.1, max_iter=-1)
    with pytest.raises(SingularSystemError):
        solve_magls_batch(np.zeros((1, 3, 5)), np.ones((1, 5, 1)), 0.0)


def test_magls_divergence_is_reported(crandn, monkeypatch):
    monkeypatch.setattr(config, "MAGLS_DIVERGENCE_SLACK", -1.0)
    with pytest.raises(MagLsDivergenceError) as info:
        solve_magls(crandn(6, 50), np.abs(crandn(50)), 0.01, max_iter=10)
    assert info.value.objectives.size >= 2


def test_mag_ls_shapes(crandn):
    c = mag_ls(crandn(6, 30), crandn(30, 2), 100.0, max_iter=20)
    assert c.shape == (6, 2)
    with pytest.raises(ValueError):
        mag_ls(crandn(6, 30), crandn(30), -1.0)


def test_design_bsm_uses_ls_below_cutoff(geometry, small_hrtf):
    grid, _ = nearly_uniform_grid(60)
    V = steering_matrix(geometry, grid, [500.0, 1000.0, 3000.0])
    bank = design_bsm(V, small_hrtf, snr=100.0, max_iter=20)
    assert bank.method == "BSM"
    assert bank.coefficients.shape == (3, 6, 2)
    h = sh_core.hrtf_response(small_hrtf, grid, [1000.0])[0]
    assert_allclose(bank.coefficients[1], bsm_ls(V.values[1], h, 100.0))
    assert bank.metadata["grid_size"] == 60


# ================= LCMV =================

def test_lcmv_satisfies_distortionless_constraint(crandn):
    V_d = crandn(6, 2)
    W = lcmv_weights(V_d, _random_pd(crandn, 6), 1000.0)
    assert W.shape == (2, 6)
    assert np.linalg.norm(W @ V_d - np.eye(2)) < 1e-10


def test_lcmv_rank_deficient_steering(crandn):
    v = crandn(6, 1)
    with pytest.raises(RankDeficientSteeringError) as info:
        lcmv_weights(np.hstack([v, 2.0 * v]), np.eye(6), 2500.0)
    assert info.value.frequency == 2500.0


def test_lcmv_without_sources_is_empty(crandn):
    assert lcmv_weights(np.zeros((6, 0)), np.eye(6)).shape == (0, 6)


def test_lcmv_per_bin(crandn):
    mats = np.stack([_random_pd(crandn, 6) for _ in range(3)])
    V_d = crandn(3, 6, 1)
    W = lcmv(V_d, SpatialCorrelation(mats, 1, 31.25, 10))
    assert W.shape == (3, 1, 6)
    assert_allclose(np.einsum("fdm,fme->fde", W, V_d), np.ones((3, 1, 1)), atol=1e-10)
    with pytest.raises(ValueError):
        lcmv(crandn(2, 6, 1), SpatialCorrelation(mats, 1, 31.25, 10))


def test_lcmv_merges_identical_columns_when_asked():
    W = lcmv_weights(np.ones((6, 2), dtype=complex), np.eye(6), 0.0, merge_degenerate=True)
    assert W.shape == (2, 6)
    assert_allclose(W @ np.ones((6, 2)), np.full((2, 2), 0.5), atol=1e-12)


def test_lcmv_two_sources_pass_dc_and_stay_distortionless(geometry, crandn, caplog):
    freqs = np.fft.rfftfreq(config.STFT_WIN_LEN, 1.0 / FS)
    dirs = [Direction.from_degrees(90.0, 40.0), Direction.from_degrees(90.0, 120.0)]
    V_d = steering_matrix(geometry, dirs, freqs).values
    s = crandn(40, freqs.size, 2)
    direct = np.einsum("fmd,tfd->tfm", V_d, s)
    tf = TimeFreqSignal(direct + 0.1 * crandn(40, freqs.size, 6), FS)
    with caplog.at_level(logging.WARNING, logger="informed_bsm.filters"):
        W = lcmv(V_d, estimate_correlation(tf), freqs)
    assert "merging constraints" in caplog.text
    gain = np.einsum("fdm,fme->fde", W, V_d)
    assert_allclose(gain[1:], np.broadcast_to(np.eye(2), gain[1:].shape), atol=1e-8)
    assert_allclose(gain[0], np.full((2, 2), 0.5), atol=1e-10)
    recovered = np.einsum("fdm,tfm->tfd", W, direct)
    assert np.linalg.norm(recovered[:, 1:] - s[:, 1:]) < 1e-8 * np.linalg.norm(s[:, 1:])


def test_lcmv_rejects_directions_the_array_never_separates(geometry):
    freqs = np.array([0.0, 500.0, 2000.0])
    d = Direction.from_degrees(90.0, 40.0)
    V_d = steering_matrix(geometry, [d, d], freqs).values
    mats = np.broadcast_to(np.eye(6), (3, 6, 6))
    with pytest.raises(RankDeficientSteeringError) as info:
        lcmv(V_d, SpatialCorrelation(mats, 1, 31.25, 10), freqs)
    assert info.value.frequency == 500.0


# ================= SOURCE STATISTICS =================

def test_source_stats_of_a_noiseless_plane_wave(crandn):
    n_frames, n_bins = 20, 5
    v = crandn(n_bins, 6, 1)
    s = crandn(n_frames, n_bins, 1)
    frames = np.einsum("fmd,tfd->tfm", v, s)
    tf = TimeFreqSignal(frames, FS, win_len=8, hop=2)
    W = np.stack([lcmv_weights(v[i], np.eye(6)) for i in range(n_bins)])
    stats = estimate_source_stats(tf, v, W, L=40, half_width=0)
    assert_allclose(stats.sigma_r2, 0.0, atol=1e-20)
    assert_allclose(stats.r_sd[:, 0, 0], np.mean(np.abs(s[:, :, 0]) ** 2, axis=0), rtol=1e-10)
    assert stats.num_sources == 1


def test_source_stats_residual_divides_by_grid_size(crandn):
    frames = crandn(10, 5, 6)
    tf = TimeFreqSignal(frames, FS, win_len=8, hop=2)
    empty_v, empty_w = np.zeros((5, 6, 0)), np.zeros((5, 0, 6))
    stats = estimate_source_stats(tf, empty_v, empty_w, L=30, half_width=0)
    assert_allclose(stats.sigma_r2, np.sum(np.abs(frames) ** 2, axis=(0, 2)) / (10 * 30))
    with pytest.raises(ValueError):
        estimate_source_stats(tf, empty_v, empty_w, L=0)


def test_source_stats_match_the_source_psd(geometry, rng, crandn):
    source = rng.standard_normal(48000)
    S = stft(source, FS).frames  # [T, F, 1]
    freqs = np.fft.rfftfreq(config.STFT_WIN_LEN, 1.0 / FS)
    V_d = steering_matrix(geometry, [Direction.from_degrees(90.0, 40.0)], freqs).values
    frames = np.einsum("fmd,tfd->tfm", V_d, S) + 1e-3 * crandn(S.shape[0], freqs.size, 6)
    tf = TimeFreqSignal(frames, FS)
    assert tf.num_frames >= 100
    W = lcmv(V_d, estimate_correlation(tf, 0), freqs)
    stats = estimate_source_stats(tf, V_d, W, L=400, half_width=0)
    # unit-variance white noise through an unscaled windowed DFT
    psd = np.sum(sps.get_window("bartlett", config.STFT_WIN_LEN) ** 2)
    r_sd = stats.r_sd[1:-1, 0, 0].real
    assert np.mean(r_sd) == pytest.approx(psd, rel=0.05)
    assert np.mean(np.abs(r_sd / psd - 1.0) < 0.3) >= 0.9
    assert np.all(stats.sigma_r2 < 1e-4 * psd)


# ================= COMPOSED FILTERS =================

def test_com_without_direct_sources_is_bsm(crandn):
    c_bsm = crandn(6, 2)
    assert_allclose(com_filter(c_bsm, np.zeros((6, 0)), np.zeros((0, 6)), np.zeros((0, 2))), c_bsm)


def test_com_renders_the_direct_source_with_its_hrtf(crandn):
    V_d = crandn(6, 2)
    W = lcmv_weights(V_d, _random_pd(crandn, 6))
    h_d = crandn(2, 2)
    c = com_filter(crandn(6, 2), V_d, W, h_d)
    assert_allclose(c.conj().T @ V_d, h_d.T, atol=1e-10)


def test_dbsm_singular_without_noise_or_residual(crandn):
    with pytest.raises(SingularSystemError):
        dbsm_filter(np.zeros((6, 0)), crandn(6, 20), np.zeros((0, 0)), 0.0, 0.0, np.zeros((0, 2)), crandn(20, 2))


def test_psd_sqrt_squares_back(crandn):
    mats = np.stack([_random_pd(crandn, 3), _random_pd(crandn, 3)])
    root = psd_sqrt(mats)
    assert_allclose(root @ root, mats, atol=1e-12)
    assert_allclose(root, np.conj(np.swapaxes(root, 1, 2)), atol=1e-12)


def test_dbsm_magls_single_problem(crandn):
    sol = dbsm_magls(crandn(6), crandn(6, 40), np.array([[2.0]]), 0.5, 0.01, crandn(2), crandn(40, 2), max_iter=50)
    assert sol.coefficients.shape == (6, 2)
    assert np.all(np.diff(sol.objectives, axis=0) <= 1e-12 * sol.objectives[0])


# ================= INFORMED DESIGNS =================

def test_design_com_renders_assumed_direction_exactly(capture_tf, geometry, small_hrtf, coarse_bsm):
    _, bsm = coarse_bsm
    direction = Direction.from_degrees(90.0, 40.0)
    bank = design_com(capture_tf, geometry, [direction], small_hrtf, bsm)
    assert bank.method == "COM"
    freqs = capture_tf.freqs
    v = steering_matrix(geometry, [direction], freqs).values[:, :, 0]
    h = sh_core.hrtf_response(small_hrtf, [direction], freqs)[:, 0, :]
    rendered = np.einsum("fme,fm->fe", bank.coefficients.conj(), v)
    assert_allclose(rendered, h, atol=1e-8)


def test_design_com_rejects_mismatched_bank(capture_tf, geometry, small_hrtf, coarse_bsm):
    _, bsm = coarse_bsm
    short = BinauralFilterBank("BSM", bsm.freqs[:10], bsm.coefficients[:10])
    with pytest.raises(ValueError):
        design_com(capture_tf, geometry, [Direction.from_degrees(90.0, 40.0)], small_hrtf, short)


def test_design_dbsm_bank(capture_tf, geometry, small_hrtf, coarse_bsm):
    V, _ = coarse_bsm
    bank = design_dbsm(capture_tf, geometry, [Direction.from_degrees(90.0, 40.0)], small_hrtf, V,
                       snr_db=20.0, max_iter=10)
    assert bank.method == "DBSM"
    assert bank.coefficients.shape == (769, 6, 2)
    assert bank.metadata["sigma_n2"] > 0
    assert_allclose(bank.metadata["directions_deg"], [[90.0, 40.0]])


def test_design_dbsm_rejects_other_grid(capture_tf, geometry, small_hrtf):
    grid, _ = nearly_uniform_grid(20)
    V = steering_matrix(geometry, grid, [100.0, 200.0])
    with pytest.raises(ValueError):
        design_dbsm(capture_tf, geometry, [], small_hrtf, V)


TWO_SOURCES = [Direction.from_degrees(90.0, 40.0), Direction.from_degrees(90.0, 120.0)]


def test_design_com_with_two_sources(capture_tf, geometry, small_hrtf, coarse_bsm):
    _, bsm = coarse_bsm
    bank = design_com(capture_tf, geometry, TWO_SOURCES, small_hrtf, bsm)
    freqs = capture_tf.freqs
    V_d = steering_matrix(geometry, TWO_SOURCES, freqs).values
    h_d = sh_core.hrtf_response(small_hrtf, TWO_SOURCES, freqs)
    rendered = np.einsum("fme,fmd->fde", bank.coefficients.conj(), V_d)
    assert_allclose(rendered[1:], h_d[1:], atol=1e-8)
    # DC cannot tell the sources apart; they share one merged constraint
    assert_allclose(rendered[0], np.broadcast_to(h_d[0].mean(axis=0), (2, 2)), atol=1e-8)
    assert len(bank.metadata["directions_deg"]) == 2


def test_design_dbsm_with_two_sources(capture_tf, geometry, small_hrtf, coarse_bsm):
    V, _ = coarse_bsm
    bank = design_dbsm(capture_tf, geometry, TWO_SOURCES, small_hrtf, V, snr_db=20.0, max_iter=10)
    assert bank.coefficients.shape == (769, 6, 2)
    assert np.all(np.isfinite(bank.coefficients))
    assert_allclose(bank.metadata["directions_deg"], [[90.0, 40.0], [90.0, 120.0]])


def test_informed_designs_reject_duplicate_directions(capture_tf, geometry, small_hrtf, coarse_bsm):
    V, bsm = coarse_bsm
    twice = [TWO_SOURCES[0], TWO_SOURCES[0]]
    with pytest.raises(RankDeficientSteeringError):
        design_com(capture_tf, geometry, twice, small_hrtf, bsm)
    with pytest.raises(RankDeficientSteeringError):
        design_dbsm(capture_tf, geometry, twice, small_hrtf, V, max_iter=2)


@pytest.mark.parametrize("method", ["BSM", "COM", "DBSM"])
def test_rendered_output_scales_with_the_capture(method, geometry, small_hrtf, coarse_bsm, rng):
    V, bsm = coarse_bsm
    x = rng.standard_normal((9600, 6))
    alpha = 2.5
    directions = [Direction.from_degrees(90.0, 40.0)]

    def rendered(capture):
        if method == "BSM":
            bank = bsm
        elif method == "COM":
            bank = design_com(stft(capture, FS), geometry, directions, small_hrtf, bsm)
        else:
            bank = design_dbsm(stft(capture, FS), geometry, directions, small_hrtf, V, snr_db=20.0, max_iter=5)
        return render_binaural(bank, capture, FS)

    base = rendered(x)
    scaled = rendered(alpha * x)
    assert np.linalg.norm(scaled - alpha * base) < 1e-6 * np.linalg.norm(alpha * base)


def test_dbsm_filter_is_continuous_in_the_source_direction(geometry, small_hrtf):
    grid, _ = nearly_uniform_grid(100)
    f = 1000.0
    V_r = steering_matrix(geometry, grid, [f]).values[0]
    h_r = sh_core.hrtf_response(small_hrtf, grid, [f])[0]

    def design(azimuth):
        d = Direction.from_degrees(90.0, azimuth)
        v_d = steering_matrix(geometry, [d], [f]).values[0]
        h_d = sh_core.hrtf_response(small_hrtf, [d], [f])[0]
        return dbsm_filter(v_d, V_r, np.array([[1.0]]), 0.1, 0.01, h_d, h_r)

    c, moved = design(40.0), design(40.1)
    assert np.linalg.norm(moved - c) < 0.05 * np.linalg.norm(c)


def test_dbsm_magls_without_direct_power_is_mag_ls(crandn):
    V_d, V_r = crandn(6, 1), crandn(6, 40)
    h_d, h_r = crandn(1, 2), crandn(40, 2)
    sigma_r2, sigma_n2 = 0.4, 0.02
    sol = dbsm_magls(V_d, V_r, np.zeros((1, 1)), sigma_r2, sigma_n2, h_d, h_r, max_iter=15)
    expected = mag_ls(V_r, h_r, sigma_r2 / sigma_n2, max_iter=15)
    assert np.linalg.norm(sol.coefficients - expected) < 1e-10 * np.linalg.norm(expected)


# ================= BANK =================

def test_bank_validation(crandn):
    with pytest.raises(ValueError):
        BinauralFilterBank("MVDR", [0.0], crandn(1, 6, 2))
    with pytest.raises(ValueError):
        BinauralFilterBank("BSM", [0.0, 1.0], crandn(1, 6, 2))
    bad = crandn(2, 6, 2)
    bad[1, 0, 0] = np.nan
    with pytest.raises(ValueError):
        BinauralFilterBank("BSM", [0.0, 1.0], bad)


def test_apply_and_render(capture_tf, crandn, rng):
    bank = BinauralFilterBank("BSM", capture_tf.freqs, crandn(769, 6, 2))
    out = bank.apply(capture_tf)
    assert out.num_channels == 2
    assert_allclose(out.frames[3, 100], bank.coefficients[100].conj().T @ capture_tf.frames[3, 100])
    assert render_binaural(bank, rng.standard_normal((5000, 6)), FS).shape == (5000, 2)
    with pytest.raises(ValueError):
        bank.apply(stft(rng.standard_normal((5000, 4)), FS))


def test_filter_bank_file_round_trip(tmp_path, crandn):
    bank = BinauralFilterBank("DBSM", [0.0, 31.25, 62.5], crandn(3, 6, 2), 1500.0, {"sigma_n2": 0.25})
    path = save_filter_bank(bank, tmp_path / "banks" / "filters_dbsm.csv")
    assert path.with_suffix(".json").exists()
    loaded = load_filter_bank(path)
    assert loaded.method == "DBSM"
    assert loaded.metadata == {"sigma_n2": 0.25}
    assert_allclose(loaded.freqs, bank.freqs)
    np.testing.assert_array_equal(loaded.coefficients, bank.coefficients)


def test_filter_bank_file_rejects_truncation(tmp_path, crandn):
    path = save_filter_bank(BinauralFilterBank("BSM", [0.0, 1.0], crandn(2, 6, 2)), tmp_path / "f.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_filter_bank(path)
