"""Cross-module invariant suite behind the `validate` CLI command.

Each check runs at desk scale on seeded data and reports pass/fail with a
one-line detail; the suite never raises. A finite-difference hook lets tests
inject a broken gradient and confirm the relevant check catches it.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import beamform, channel, harness, opt_manifold, opt_sdr
from .geometry import PolarPoint, build_geometry, inter_subarray_phase, steering_vector
from .music import GridSpec


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    wall_ms: float


@dataclass
class ValidationReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return all(r.ok for r in self.results)

    def to_text(self) -> str:
        lines = []
        for r in self.results:
            mark = "PASS" if r.ok else "FAIL"
            lines.append(f"[{mark}] {r.name} ({r.wall_ms:.0f} ms) {r.detail}")
        verdict = "ALL CHECKS PASSED" if self.all_ok else "CHECKS FAILED"
        lines.append(verdict)
        return "\n".join(lines)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["check", "ok", "detail", "wall_ms"])
            for r in self.results:
                writer.writerow([r.name, int(r.ok), r.detail, f"{r.wall_ms:.3f}"])


def _mini_data(seed: int = 0, **overrides) -> harness.ScenarioData:
    cfg = harness.desk_config(seed=seed, **overrides)
    return harness.prepare_scenario(cfg)


def _small_data(seed: int = 0, **overrides) -> harness.ScenarioData:
    over = {
        "subarrays": 3,
        "antennas_per_subarray": 4,
        "user_antennas": 3,
        "user": {"range_m": 12.0, "angle_deg": 15.0},
    }
    over.update(overrides)
    cfg = harness.desk_config(seed=seed, **over)
    return harness.prepare_scenario(cfg)


def _check_mirror_symmetry() -> tuple[bool, str]:
    cfg = harness.desk_config()
    g = build_geometry(cfg)
    ok = np.array_equal(g.rx_positions, -g.tx_positions)
    return ok, "rx == -tx elementwise"


def _check_steering_modulus() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        v = steering_vector(16, rng.uniform(-np.pi / 2, np.pi / 2), 0.004, 0.008)
        worst = max(worst, float(np.max(np.abs(np.abs(v) - 1.0))), abs(v[0] - 1.0))
    return worst < 1e-12, f"max modulus deviation {worst:.2e}"


def _check_interphase_oracle() -> tuple[bool, str]:
    cfg = harness.desk_config()
    g = build_geometry(cfg)
    loc = PolarPoint(17.0, 0.3)
    nu = inter_subarray_phase(g, "tx", loc)
    refs = g.reference_positions("tx")
    dists = np.linalg.norm(loc.xy[None, :] - refs, axis=1)
    oracle = np.exp(-2j * np.pi / g.wavelength * dists)
    err = float(np.max(np.abs(nu - oracle)))
    return err < 1e-12, f"max deviation from distance oracle {err:.2e}"


def _check_rank_bounds() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    for i in range(30):
        cfg = harness.desk_config(
            seed=int(rng.integers(1 << 30)),
            user={"range_m": float(rng.uniform(8, 60)), "angle_deg": float(rng.uniform(-50, 50))},
        )
        data = harness.prepare_scenario(cfg)
        lo, hi = channel.rank_bounds(
            cfg.n_paths, cfg.n_user_antennas, cfg.k_subarrays
        )
        r = channel.numerical_rank(data.comm.h)
        if not lo <= r <= hi:
            return False, f"instance {i}: rank {r} outside [{lo}, {hi}]"
    return True, "30 random instances inside the structural bounds"


def _check_response_modulus() -> tuple[bool, str]:
    data = _mini_data()
    worst = 0.0
    for resp in data.responses.objects:
        worst = max(
            worst,
            float(np.max(np.abs(np.abs(resp.g_t) - 1.0))),
            float(np.max(np.abs(np.abs(resp.g_r) - 1.0))),
        )
    return worst < 1e-12, f"max response modulus deviation {worst:.2e}"


def _check_block_locality() -> tuple[bool, str]:
    cfg = harness.desk_config()
    rng = np.random.default_rng(5)
    g0 = build_geometry(cfg)
    paths0 = channel.draw_paths(cfg, g0, np.random.default_rng(cfg.seed))
    h0 = channel.build_comm_channel(g0, paths0, cfg.user, cfg.n_user_antennas).h
    offsets = cfg.d0 + np.arange(cfg.k_subarrays) * cfg.d_s
    offsets[-1] += 0.01  # perturb only the last subarray
    g1 = build_geometry(cfg, offsets)
    paths1 = channel.draw_paths(cfg, g1, np.random.default_rng(cfg.seed))
    h1 = channel.build_comm_channel(g1, paths1, cfg.user, cfg.n_user_antennas).h
    m = cfg.m_antennas
    kept = np.array_equal(h0[:, : -m], h1[:, : -m])
    changed = not np.array_equal(h0[:, -m:], h1[:, -m:])
    return kept and changed, "untouched blocks bit-identical, perturbed block moved"


def _check_echo_linearity() -> tuple[bool, str]:
    data = _small_data()
    n = data.config.n_antennas
    rng = np.random.default_rng(7)
    x1 = rng.standard_normal((n, 6)) + 1j * rng.standard_normal((n, 6))
    x2 = rng.standard_normal((n, 6)) + 1j * rng.standard_normal((n, 6))
    objs = data.config.scene_objects

    def run(x):
        return channel.simulate_echoes(
            data.responses, objs, x, data.config.sigma_s_sq, np.random.default_rng(42)
        )

    lhs = run(x1 + x2)
    rhs = run(x1) + run(x2) - run(np.zeros_like(x1))
    err = float(np.max(np.abs(lhs - rhs)))
    return err < 1e-9, f"linearity residual {err:.2e}"


def _check_subspace_structure() -> tuple[bool, str]:
    data = _mini_data()
    b = data.basis
    if not np.array_equal(b.u[:, b.permutation], b.u_tilde):
        return False, "column permutation does not reproduce u_tilde"
    ok, mod_err = beamform.analog_feasibility(b.u_tilde, b.k_subarrays)
    return ok and mod_err < 1e-12, f"block support ok, modulus error {mod_err:.2e}"


def _check_subspace_contains() -> tuple[bool, str]:
    data = _mini_data()
    u = data.basis.u
    worst_g = 0.0
    for resp in data.responses.objects:
        res = np.linalg.lstsq(u, resp.g_t, rcond=None)[1]
        resid = float(np.sqrt(res[0])) if res.size else 0.0
        worst_g = max(worst_g, resid / np.linalg.norm(resp.g_t))
    _, s, vh = data.comm.svd()
    r = channel.numerical_rank(data.comm.h)
    worst_v = 0.0
    for i in range(r):
        v = vh[i].conj()
        res = np.linalg.lstsq(u, v, rcond=None)[1]
        resid = float(np.sqrt(res[0])) if res.size else 0.0
        worst_v = max(worst_v, resid)
    ok = worst_g < 1e-10 and worst_v < 1e-8
    return ok, f"g_t residual {worst_g:.2e}, row-space residual {worst_v:.2e}"


def _check_reduced_equals_full() -> tuple[bool, str]:
    data = _mini_data()
    cfg = data.config
    rng = np.random.default_rng(9)
    w_rf = beamform.optimal_analog(data.basis)
    worst_se = 0.0
    worst_scnr = 0.0
    for _ in range(5):
        w_bb = (
            rng.standard_normal((data.n_rf, data.n_streams))
            + 1j * rng.standard_normal((data.n_rf, data.n_streams))
        )
        w_bb *= np.sqrt(data.n_streams / cfg.m_antennas) / np.linalg.norm(w_bb)
        wrfbb = w_rf @ w_bb
        r_x = wrfbb @ wrfbb.conj().T
        se_full = beamform.se_from_covariance(data.comm.h, r_x, cfg.sigma_c_sq)
        se_red = beamform.spectral_efficiency(data.comm.h, w_rf, w_bb, cfg.sigma_c_sq)
        worst_se = max(worst_se, abs(se_full - se_red) / max(se_full, 1e-12))
        full = beamform.scnr(
            data.w_fixed.w, data.responses, data.alphas, r_x, cfg.sigma_s_sq
        )
        red = beamform.scnr_reduced(w_bb, data.phi_set, data.alphas)
        worst_scnr = max(worst_scnr, abs(full - red) / max(full, 1e-12))
    ok = worst_se < 1e-8 and worst_scnr < 1e-8
    return ok, f"SE gap {worst_se:.2e}, SCNR gap {worst_scnr:.2e}"


def _check_mvdr_argmax() -> tuple[bool, str]:
    data = _small_data()
    cfg = data.config
    n = cfg.n_antennas
    r_x = np.eye(n)
    w_star = beamform.mvdr_receive(data.responses, data.alphas, r_x, cfg.sigma_s_sq)
    best = beamform.scnr(w_star.w, data.responses, data.alphas, r_x, cfg.sigma_s_sq)
    rng = np.random.default_rng(13)
    for _ in range(2000):
        w = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        val = beamform.scnr(w, data.responses, data.alphas, r_x, cfg.sigma_s_sq)
        if val > best * (1 + 1e-9):
            return False, f"random filter beat MVDR: {val:.6g} > {best:.6g}"
    return True, f"MVDR SCNR {best:.4g} dominates 2000 random filters"


def _feasible_point(data: harness.ScenarioData, seed: int):
    eig = data.reduced_eig()
    cfg = opt_manifold.ManifoldConfig()
    rng = np.random.default_rng(seed)
    state = opt_manifold.phase1_feasible(eig, data.phi_set, cfg, rng)
    return eig, cfg, state


def probe_state(
    eig: opt_manifold.EigB,
    phi_set: beamform.PhiSet,
    rng: np.random.Generator,
) -> opt_manifold.ManifoldState:
    """Strictly feasible state suited to finite-difference gradient probes.

    Gains are power-capped per coordinate (small enough that a 1e-6 probe
    moves the barrier arguments by far less than their values) and the most
    sensing-effective coordinate gets just enough gain to clear the
    threshold with margin; the unitary factor carries a random rotation.
    """
    ns = eig.n_streams
    budget = eig.power_budget
    for _ in range(60):
        q1, _ = np.linalg.qr(
            np.eye(ns)
            + 0.3 * (rng.standard_normal((ns, ns)) + 1j * rng.standard_normal((ns, ns)))
        )
        v = np.concatenate([eig.u_b @ q1, eig.null_basis], axis=1)
        state = opt_manifold.ManifoldState(v, np.zeros(ns))
        diag_b, diag_phi = opt_manifold._quadratic_diagonals(state, eig)
        b = np.minimum(
            0.5, np.sqrt(0.1 * budget / (ns * np.maximum(diag_b, 1e-300)))
        ) * rng.uniform(0.6, 1.0, ns)
        active = phi_set.gamma0 > 0.0
        if active:
            j0 = int(np.argmax(diag_phi))
            if diag_phi[j0] <= 0.0:
                continue
            b_sens = np.sqrt(5.0 * phi_set.gamma0 / diag_phi[j0])
            for _ in range(30):
                trial = b.copy()
                trial[j0] = max(trial[j0], b_sens)
                state = opt_manifold.ManifoldState(v, trial)
                p_slack, s_slack, _ = opt_manifold._slacks(state, eig, phi_set)
                if p_slack > 0.3 * budget and s_slack > 2.0 * phi_set.gamma0:
                    return state
                b *= 0.5
        else:
            state = opt_manifold.ManifoldState(v, b)
            if opt_manifold._slacks(state, eig, phi_set)[0] > 0.3 * budget:
                return state
    raise RuntimeError("could not construct a well-conditioned probe state")


def _check_grad_fd(
    grad_v_fn: Optional[Callable] = None,
) -> tuple[bool, str]:
    data = _mini_data()
    eig = data.reduced_eig()
    cfg = opt_manifold.ManifoldConfig()
    gv_fn = grad_v_fn or opt_manifold.grad_v
    worst = 0.0
    for trial in range(3):
        state = probe_state(eig, data.phi_set, np.random.default_rng(21 + trial))
        gb = opt_manifold.grad_b(state, eig, data.phi_set, cfg)
        gv = gv_fn(state, eig, data.phi_set, cfg)
        fd_b = _fd_grad_b(state, eig, data.phi_set, cfg)
        err_b = np.linalg.norm(gb - fd_b) / max(np.linalg.norm(fd_b), 1e-12)
        probes = _fd_grad_v(state, eig, data.phi_set, cfg, n_probe=12, rng_seed=trial)
        analytic = np.array(
            [[gv[i, j].real, gv[i, j].imag] for (i, j, _, _) in probes]
        ).ravel()
        numeric = np.array([[dre, dim] for (_, _, dre, dim) in probes]).ravel()
        err_v = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(numeric), 1e-12
        )
        worst = max(worst, float(err_b), float(err_v))
    return worst < 1e-5, f"worst relative gradient error {worst:.2e}"


def _fd_grad_b(state, eig, phi_set, cfg, h: float = 1e-6) -> np.ndarray:
    out = np.zeros_like(state.b)
    for i in range(state.b.size):
        bp, bm = state.b.copy(), state.b.copy()
        bp[i] += h
        bm[i] -= h
        fp = opt_manifold.barrier_value(
            opt_manifold.ManifoldState(state.v_tilde, bp), eig, phi_set, cfg
        )
        fm = opt_manifold.barrier_value(
            opt_manifold.ManifoldState(state.v_tilde, bm), eig, phi_set, cfg
        )
        out[i] = (fp - fm) / (2 * h)
    return out


def _fd_grad_v(state, eig, phi_set, cfg, n_probe: int, rng_seed: int, h: float = 1e-6):
    rng = np.random.default_rng(rng_seed)
    n = state.v_tilde.shape[0]
    ns = eig.n_streams
    probes = []
    for _ in range(n_probe):
        i = int(rng.integers(n))
        j = int(rng.integers(ns))  # columns past n_streams have zero gradient
        dre = _fd_dir(state, eig, phi_set, cfg, i, j, 1.0, h)
        dim = _fd_dir(state, eig, phi_set, cfg, i, j, 1.0j, h)
        probes.append((i, j, dre, dim))
    return probes


def _fd_dir(state, eig, phi_set, cfg, i, j, unit, h):
    vp, vm = state.v_tilde.copy(), state.v_tilde.copy()
    vp[i, j] += h * unit
    vm[i, j] -= h * unit
    fp = opt_manifold.barrier_value(
        opt_manifold.ManifoldState(vp, state.b), eig, phi_set, cfg
    )
    fm = opt_manifold.barrier_value(
        opt_manifold.ManifoldState(vm, state.b), eig, phi_set, cfg
    )
    return (fp - fm) / (2 * h)


def _check_tangent_retract() -> tuple[bool, str]:
    rng = np.random.default_rng(23)
    n = 8
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    v = opt_manifold.stiefel_retract(z)
    unit_err = np.linalg.norm(v.conj().T @ v - np.eye(n))
    g = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    xi = opt_manifold.tangent_project(v, g)
    tang = np.linalg.norm(xi.conj().T @ v + v.conj().T @ xi)
    descent = float(np.real(np.sum(g.conj() * xi)))
    ok = unit_err < 1e-10 and tang < 1e-10 and descent <= 1e-12
    return ok, f"unitary {unit_err:.1e}, tangency {tang:.1e}, descent {descent:.1e}"


def _check_wbb_diagonalizes() -> tuple[bool, str]:
    data = _mini_data()
    eig, cfg, state = _feasible_point(data, 29)
    w = opt_manifold.assemble_wbb(eig, state)
    q = w.conj().T @ eig.b_mat @ w
    off = q - np.diag(np.diag(q))
    rel = np.linalg.norm(off) / max(np.linalg.norm(q), 1e-300)
    diag_err = float(np.max(np.abs(np.real(np.diag(q)) - state.b**2)))
    ok = rel < 1e-8 and diag_err < 1e-8 * max(1.0, float(np.max(state.b**2)))
    return ok, f"offdiag ratio {rel:.2e}, diagonal error {diag_err:.2e}"


def _check_rmjgd_descent() -> tuple[bool, str]:
    data = _mini_data()
    eig, cfg, state = _feasible_point(data, 31)
    result = opt_manifold.rm_jgd(eig, data.phi_set, cfg, state)
    diffs = np.diff(result.trace)
    total = result.trace[0] - result.trace[-1]
    tail = result.trace[-10] - result.trace[-1] if len(result.trace) > 10 else 0.0
    ok = (
        bool(np.all(diffs < 0))
        and result.iterations <= cfg.max_iterations
        and result.status in ("converged", "max_iter", "stalled")
        and (total <= 0 or tail < 0.05 * total)  # objective has plateaued
    )
    return ok, (
        f"{result.iterations} iterations, status {result.status}, "
        f"tail/total improvement {tail / total if total > 0 else 0.0:.2e}"
    )


def _check_sdp_invariants() -> tuple[bool, str]:
    data = _small_data()
    problem = data.sdr_problem()
    sol = opt_sdr.solve_maxdet(problem, tol=1e-10)
    if sol.status != "optimal":
        return False, f"solver status {sol.status}"
    r = sol.r_bb
    min_eig = float(np.linalg.eigvalsh(r)[0])
    tr_ok = float(np.real(np.trace(r))) <= problem.power_budget + 1e-8
    sens = float(np.real(np.sum(r * problem.psi.T)))
    sens_ok = sens >= problem.gamma0 - 1e-8
    rng = np.random.default_rng(37)
    w = opt_sdr.randomize_rank(sol, problem, rng)
    power = float(np.linalg.norm(w) ** 2)
    tight = abs(power - problem.power_budget) < 1e-9 * max(1.0, problem.power_budget)
    se_w = opt_sdr._candidate_se_bits(w, problem)
    bounded = se_w <= sol.objective_bits + 1e-9
    ok = min_eig >= -1e-8 * np.real(np.trace(r)) and tr_ok and sens_ok and tight and bounded
    return ok, (
        f"min_eig {min_eig:.1e}, power gap {power - problem.power_budget:.1e}, "
        f"SE(w)-SE(R) {se_w - sol.objective_bits:.2e}"
    )


def _check_fdb_bounds() -> tuple[bool, str]:
    cfg = harness.desk_config(seed=4)
    rows = {a: harness.run_scenario(cfg, a) for a in harness.ALGORITHMS}
    fdb = rows["fdb"].se_bits
    ok = (
        fdb + 1e-6 >= rows["sdr_rrs"].se_bits and fdb + 1e-6 >= rows["rm_jgd"].se_bits
    )
    detail = ", ".join(f"{a}={rows[a].se_bits:.3f}" for a in harness.ALGORITHMS)
    return ok, detail


def _check_music_peak() -> tuple[bool, str]:
    cfg = harness.desk_config(
        seed=2,
        target={"range_m": 20.0, "angle_deg": 45.0, "rcs": 1.0},
        interferers=[{"range_m": 30.0, "angle_deg": 40.0, "rcs": 0.3}],
    )
    truth = cfg.target.location.xy
    grid = GridSpec(
        x0=truth[0] - 3.0, dx=0.25, x1=truth[0] + 3.0,
        y0=truth[1] - 3.0, dy=0.25, y1=truth[1] + 3.0,
    )
    result, _, _ = harness.run_music(cfg, grid)
    err = np.hypot(result.peak_location[0] - truth[0], result.peak_location[1] - truth[1])
    ok = err <= 0.25 * np.sqrt(2.0) + 1e-9
    return ok, f"peak offset {err:.3f} m, lobe width {result.mainlobe_width:.2f} m"


def _check_covariance_subspace() -> tuple[bool, str]:
    # needs N > N_RF so that the basis has a nontrivial complement
    data = _small_data(paths=1)
    rng = np.random.default_rng(41)
    n_rf = data.n_rf
    a = rng.standard_normal((n_rf, n_rf)) + 1j * rng.standard_normal((n_rf, n_rf))
    lam = a @ a.conj().T
    r_in = data.basis.u_tilde @ lam @ data.basis.u_tilde.conj().T
    res_in = beamform.verify_covariance_subspace(r_in, data.basis)
    res_eye = beamform.verify_covariance_subspace(
        np.eye(data.config.n_antennas), data.basis
    )
    ok = res_in < 1e-10 and res_eye > 1e-3
    return ok, f"in-subspace residual {res_in:.1e}, identity residual {res_eye:.2f}"


def _check_power_accounting() -> tuple[bool, str]:
    data = _small_data()
    rng = np.random.default_rng(43)
    m = data.config.m_antennas
    k = data.config.k_subarrays
    cols = data.basis.cols_per_block
    # orthogonal-column analog blocks (DFT columns) make the proxy exact
    dft = np.exp(-2j * np.pi * np.outer(np.arange(m), np.arange(cols)) / m)
    w_rf = np.zeros((k * m, k * cols), dtype=complex)
    for i in range(k):
        w_rf[i * m : (i + 1) * m, i * cols : (i + 1) * cols] = dft
    w_bb = rng.standard_normal((k * cols, 2)) + 1j * rng.standard_normal((k * cols, 2))
    exact, proxy = beamform.transmit_power(w_rf, w_bb)
    gap_orth = abs(exact - proxy)
    exact2, proxy2 = beamform.transmit_power(
        beamform.optimal_analog(data.basis), w_bb
    )
    return gap_orth < 1e-9, (
        f"orthogonal-case gap {gap_orth:.1e}; steering-case exact {exact2:.3f} "
        f"vs proxy {proxy2:.3f}"
    )


_QUICK = {
    "mirror_symmetry",
    "steering_modulus",
    "interphase_oracle",
    "subspace_structure",
    "reduced_equals_full",
    "wbb_diagonalizes",
    "power_accounting",
}


def validate(
    quick: bool = False,
    grad_v_override: Optional[Callable] = None,
    only: Optional[set[str]] = None,
) -> ValidationReport:
    """Run the invariant suite; failures land in the report, never raise.

    `only` restricts the run to the named checks; `grad_v_override` swaps the
    analytic V-gradient used by the finite-difference check (test hook).
    """
    checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
        ("mirror_symmetry", _check_mirror_symmetry),
        ("steering_modulus", _check_steering_modulus),
        ("interphase_oracle", _check_interphase_oracle),
        ("rank_bounds", _check_rank_bounds),
        ("response_modulus", _check_response_modulus),
        ("block_locality", _check_block_locality),
        ("echo_linearity", _check_echo_linearity),
        ("subspace_structure", _check_subspace_structure),
        ("subspace_contains", _check_subspace_contains),
        ("reduced_equals_full", _check_reduced_equals_full),
        ("mvdr_argmax", _check_mvdr_argmax),
        ("gradient_fd", lambda: _check_grad_fd(grad_v_override)),
        ("tangent_retract", _check_tangent_retract),
        ("wbb_diagonalizes", _check_wbb_diagonalizes),
        ("rmjgd_descent", _check_rmjgd_descent),
        ("sdp_invariants", _check_sdp_invariants),
        ("fdb_bounds", _check_fdb_bounds),
        ("music_peak", _check_music_peak),
        ("covariance_subspace", _check_covariance_subspace),
        ("power_accounting", _check_power_accounting),
    ]
    report = ValidationReport()
    for name, fn in checks:
        if only is not None and name not in only:
            continue
        if quick and name not in _QUICK:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as err:
            ok, detail = False, f"raised {type(err).__name__}: {err}"
        wall = (time.perf_counter() - t0) * 1e3
        report.results.append(CheckResult(name, ok, detail, wall))
    return report
