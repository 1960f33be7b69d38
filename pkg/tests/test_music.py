import numpy as np
import pytest

from modisac import harness
from modisac.channel import build_responses
from modisac.geometry import PolarPoint, SceneObject, build_geometry
from modisac.music import (
    GridSpec,
    load_spectrum_grid,
    music_spectrum,
    noise_subspace,
    sample_covariance,
    save_spectrum_csv,
    save_spectrum_grid,
)


def test_sample_covariance_single_snapshot(rng):
    y = (rng.standard_normal(6) + 1j * rng.standard_normal(6))[:, None]
    cov = sample_covariance(y)
    assert np.allclose(cov, y @ y.conj().T)


def test_sample_covariance_concentrates(rng):
    n, length, sigma_sq = 6, 10_000, 2.0
    y = np.sqrt(sigma_sq / 2) * (
        rng.standard_normal((n, length)) + 1j * rng.standard_normal((n, length))
    )
    cov = sample_covariance(y)
    assert np.linalg.norm(cov - sigma_sq * np.eye(n)) < 0.05 * sigma_sq * n


def test_sample_covariance_rank_one(rng):
    g = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    s = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    cov = sample_covariance(np.outer(g, s))
    assert np.linalg.matrix_rank(cov, tol=1e-10) == 1


def test_noise_subspace_identity_covariance():
    basis = noise_subspace(np.eye(6), 2)
    assert basis.shape == (6, 4)
    assert np.allclose(basis.conj().T @ basis, np.eye(4), atol=1e-10)


def test_noise_subspace_orthogonal_to_signal(rng):
    g = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    cov = np.outer(g, g.conj()) + 1e-4 * np.eye(8)
    basis = noise_subspace(cov, 1)
    assert np.linalg.norm(basis.conj().T @ g) < 1e-6 * np.linalg.norm(g)


def test_noise_subspace_validates_order():
    with pytest.raises(ValueError):
        noise_subspace(np.eye(4), 4)


def test_music_exact_covariance_peaks_at_truth():
    cfg = harness.desk_config(seed=0)
    g = build_geometry(cfg)
    # put the object exactly on a grid node
    x0, y0 = 14.0, 14.0
    loc = PolarPoint(float(np.hypot(x0, y0)), float(np.arctan2(x0, y0)))
    resp = build_responses(g, (SceneObject(loc, 1.0),))
    cov = np.outer(resp[0].g_r, resp[0].g_r.conj()) + 1e-6 * np.eye(cfg.n_antennas)
    basis = noise_subspace(cov, 1)
    grid = GridSpec(x0 - 2, 0.5, x0 + 2, y0 - 2, 0.5, y0 + 2)
    result = music_spectrum(basis, g, grid)
    assert result.peak_location == (pytest.approx(x0), pytest.approx(y0))
    assert result.spectrum.max() == 1.0


def test_music_noise_basis_rotation_invariance(rng):
    cfg = harness.desk_config(seed=0)
    g = build_geometry(cfg)
    loc = PolarPoint(20.0, 0.6)
    resp = build_responses(g, (SceneObject(loc, 1.0),))
    cov = np.outer(resp[0].g_r, resp[0].g_r.conj()) + 1e-6 * np.eye(cfg.n_antennas)
    basis = noise_subspace(cov, 1)
    q, _ = np.linalg.qr(
        rng.standard_normal((basis.shape[1],) * 2)
        + 1j * rng.standard_normal((basis.shape[1],) * 2)
    )
    grid = GridSpec(10.0, 0.5, 14.0, 12.0, 0.5, 16.0)
    r1 = music_spectrum(basis, g, grid)
    r2 = music_spectrum(basis @ q, g, grid)
    assert np.allclose(r1.spectrum, r2.spectrum, atol=1e-10)


def test_music_tie_breaks_lowest_index():
    cfg = harness.desk_config(seed=0)
    g = build_geometry(cfg)
    empty = np.zeros((cfg.n_antennas, 0), dtype=complex)  # flat spectrum
    grid = GridSpec(5.0, 1.0, 7.0, 5.0, 1.0, 7.0)
    result = music_spectrum(empty, g, grid)
    assert result.peak_index == (0, 0)


def test_music_flags_antenna_cells():
    cfg = harness.desk_config(seed=0)
    g = build_geometry(cfg)
    rx_ref = g.reference_positions("rx")[0]
    loc = PolarPoint(25.0, 0.4)
    resp = build_responses(g, (SceneObject(loc, 1.0),))
    cov = np.outer(resp[0].g_r, resp[0].g_r.conj()) + 1e-6 * np.eye(cfg.n_antennas)
    basis = noise_subspace(cov, 1)
    grid = GridSpec(rx_ref[0], 25.0 * np.sin(0.4) - rx_ref[0], 25.0 * np.sin(0.4),
                    0.0, 25.0 * np.cos(0.4), 25.0 * np.cos(0.4))
    result = music_spectrum(basis, g, grid)
    assert (0, 0) in result.flagged_cells
    assert result.spectrum[0, 0] == 0.0


def test_grid_parse_and_axes():
    grid = GridSpec.parse("0:0.5:2,1:1:3")
    assert np.allclose(grid.x_axis, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert np.allclose(grid.y_axis, [1.0, 2.0, 3.0])
    same = GridSpec.parse("0:0.25:1")
    assert np.allclose(same.x_axis, same.y_axis)
    with pytest.raises(ValueError):
        GridSpec.parse("1:2")
    with pytest.raises(ValueError):
        GridSpec(0, -1.0, 1, 0, 1.0, 1)


def test_spectrum_exports(tmp_path):
    cfg = harness.desk_config(seed=0)
    g = build_geometry(cfg)
    loc = PolarPoint(18.0, 0.5)
    resp = build_responses(g, (SceneObject(loc, 1.0),))
    cov = np.outer(resp[0].g_r, resp[0].g_r.conj()) + 1e-6 * np.eye(cfg.n_antennas)
    basis = noise_subspace(cov, 1)
    grid = GridSpec(8.0, 0.5, 10.0, 14.0, 0.5, 17.0)
    result = music_spectrum(basis, g, grid)

    csv_path = str(tmp_path / "spec.csv")
    save_spectrum_csv(result, csv_path)
    lines = open(csv_path).read().splitlines()
    assert lines[0] == "x,y,value"
    assert len(lines) == 1 + result.spectrum.size

    bin_path = str(tmp_path / "spec.grid")
    save_spectrum_grid(result, bin_path)
    xs, ys, data = load_spectrum_grid(bin_path)
    assert np.allclose(xs, result.x_axis)
    assert np.allclose(ys, result.y_axis)
    assert np.allclose(data, result.spectrum)


def test_end_to_end_localization_single_seed():
    cfg = harness.desk_config(
        seed=3,
        target={"range_m": 20.0, "angle_deg": 45.0, "rcs": 0.15},
        interferers=[{"range_m": 30.0, "angle_deg": 40.0, "rcs": 0.3}],
        noise_sens_dbm=-10.0,
    )
    truth = cfg.target.location.xy
    grid = GridSpec(truth[0] - 2, 0.25, truth[0] + 2, truth[1] - 2, 0.25, truth[1] + 2)
    result, _, _ = harness.run_music(cfg, grid)
    err = np.hypot(result.peak_location[0] - truth[0], result.peak_location[1] - truth[1])
    assert err <= 0.25 * np.sqrt(2.0) + 1e-9
    assert 0.0 < result.mainlobe_width < 5.0


def test_run_music_accepts_music_config():
    from modisac.music import MusicConfig

    cfg = harness.desk_config(
        seed=3,
        target={"range_m": 20.0, "angle_deg": 45.0, "rcs": 0.15},
        interferers=[{"range_m": 30.0, "angle_deg": 40.0, "rcs": 0.3}],
        noise_sens_dbm=-10.0,
    )
    truth = cfg.target.location.xy
    grid = GridSpec(truth[0] - 1, 0.5, truth[0] + 1, truth[1] - 1, 0.5, truth[1] + 1)
    music_cfg = MusicConfig(grid=grid, snapshots=128, assumed_sources=2)
    result, data, f_tx = harness.run_music(cfg, music_cfg)
    assert result.spectrum.shape == (len(grid.y_axis), len(grid.x_axis))
    assert f_tx.shape == (cfg.n_antennas, data.n_streams)
