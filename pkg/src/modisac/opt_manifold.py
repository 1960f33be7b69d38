"""Joint Riemannian-Euclidean gradient descent for the digital beamformer.

The digital stage factors as W_BB = U_B Sigma_B^{-1/2} U_B^H V~ Sigma~ with a
unitary V~ and a rectangular diagonal Sigma~ carrying a real vector b. The
rate objective, power budget and sensing constraint become functions of
(V~, b); inequality constraints enter through a logarithmic barrier and the
pair is descended jointly, with V~ restricted to the unitary manifold via
tangent-space projection and an SVD polar retraction.

Only the first n_streams columns of V~ matter: they must span the column
space of U_B for the factorization to diagonalize the rate form (the map to
W_BB annihilates anything outside that span). Feasible-point construction
respects this and the iteration preserves it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .beamform import PhiSet, SubspaceBasis


class RankDeficiencyError(ValueError):
    """Requested stream count exceeds the numerical rank of the rate form."""


class InfeasiblePointError(ValueError):
    """Barrier gradient requested at a point outside the strict interior."""


class InfeasibleProblemError(RuntimeError):
    """No strictly feasible digital beamformer exists; carries a certificate."""

    def __init__(self, message: str, bound: float = np.nan):
        super().__init__(message)
        self.bound = bound


class RetractionError(RuntimeError):
    """Polar retraction failed on a numerically rank-deficient step."""


@dataclass(frozen=True)
class EigB:
    """Truncated eigensystem of the reduced rate form plus problem data.

    b_mat is the noise-normalized Gram matrix of the effective channel,
    truncated to its top n_streams eigenpairs (u_b, sigma_b). b_tilde and
    inv_sqrt are U_B Sigma_B^{-1} U_B^H and U_B Sigma_B^{-1/2} U_B^H;
    phi_tilde is the sensing form mapped through inv_sqrt on both sides.
    null_basis spans the orthogonal complement of col(U_B).
    """

    b_mat: np.ndarray
    u_b: np.ndarray
    sigma_b: np.ndarray
    b_tilde: np.ndarray
    phi_tilde: np.ndarray
    inv_sqrt: np.ndarray
    null_basis: np.ndarray
    power_budget: float
    n_streams: int

    @property
    def n_rf(self) -> int:
        return self.b_mat.shape[0]


@dataclass
class ManifoldState:
    """Iterate of the joint descent: unitary v_tilde and real stream gains b."""

    v_tilde: np.ndarray
    b: np.ndarray

    def copy(self) -> "ManifoldState":
        return ManifoldState(self.v_tilde.copy(), self.b.copy())


@dataclass
class ManifoldConfig:
    """Algorithm knobs: barrier weight, tolerances, line-search parameters."""

    barrier_t: float = 100.0
    eps_v: float = 1e-6
    eps_b: float = 1e-6
    max_iterations: int = 500
    armijo_shrink: float = 0.5
    armijo_slope: float = 1e-4
    armijo_initial: float = 1.0
    min_step: float = 1e-12
    continuation: Optional[tuple[float, int]] = None  # (multiplier, extra rounds)

    def __post_init__(self) -> None:
        knobs = (
            self.barrier_t,
            self.eps_v,
            self.eps_b,
            self.max_iterations,
            self.armijo_shrink,
            self.armijo_slope,
            self.armijo_initial,
            self.min_step,
        )
        if any(v <= 0 for v in knobs):
            raise ValueError("all manifold configuration knobs must be positive")


@dataclass
class RmJgdResult:
    """Converged state, assembled digital beamformer and objective trace."""

    state: ManifoldState
    w_bb: np.ndarray
    trace: list[float]
    iterations: int
    status: str
    stage_traces: list[list[float]] = field(default_factory=list)


def rate_form_rank(
    basis: SubspaceBasis, h: np.ndarray, rel_cutoff: float = 1e-10
) -> int:
    """Usable stream count: eigenvalue rank of the reduced rate form.

    Stricter than the channel rank at its 1e-8 singular-value cutoff, because
    the rate form squares the singular values; stream counts above this rank
    would make the inverse square-root factors meaningless.
    """
    g = h @ basis.u_tilde
    b_mat = g.conj().T @ g
    vals = np.linalg.eigvalsh(0.5 * (b_mat + b_mat.conj().T))
    top = float(vals[-1])
    if top <= 0:
        return 0
    return int(np.count_nonzero(vals > rel_cutoff * top))


def reduce_b(
    basis: SubspaceBasis,
    h: np.ndarray,
    n_streams: int,
    m_antennas: int,
    sigma_c_sq: float = 1.0,
    psi: Optional[np.ndarray] = None,
    rel_cutoff: float = 1e-10,
) -> EigB:
    """Build the reduced problem data from the channel and subspace basis.

    The communication noise power is folded into the rate form so that the
    manifold objective equals the spectral efficiency in nats; without this
    the reduced objective and the reported SE would disagree whenever
    sigma_c_sq != 1.
    """
    u = basis.u_tilde
    g = h @ u
    b_mat = (g.conj().T @ g) / sigma_c_sq
    b_mat = 0.5 * (b_mat + b_mat.conj().T)
    vals, vecs = np.linalg.eigh(b_mat)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    vals = np.clip(vals, 0.0, None)
    rank = int(np.count_nonzero(vals > rel_cutoff * vals[0])) if vals[0] > 0 else 0
    if n_streams > rank:
        raise RankDeficiencyError(
            f"n_streams={n_streams} exceeds numerical rank {rank} of the rate form"
        )
    u_b = vecs[:, :n_streams]
    sigma_b = vals[:n_streams]
    null_basis = vecs[:, n_streams:]
    b_tilde = (u_b / sigma_b[None, :]) @ u_b.conj().T
    inv_sqrt = (u_b / np.sqrt(sigma_b)[None, :]) @ u_b.conj().T
    n_rf = b_mat.shape[0]
    if psi is None:
        phi_tilde = np.zeros((n_rf, n_rf), dtype=complex)
    else:
        phi_tilde = inv_sqrt @ psi @ inv_sqrt
        phi_tilde = 0.5 * (phi_tilde + phi_tilde.conj().T)
    return EigB(
        b_mat=b_mat,
        u_b=u_b,
        sigma_b=sigma_b,
        b_tilde=0.5 * (b_tilde + b_tilde.conj().T),
        phi_tilde=phi_tilde,
        inv_sqrt=inv_sqrt,
        null_basis=null_basis,
        power_budget=n_streams / m_antennas,
        n_streams=n_streams,
    )


def assemble_wbb(eig: EigB, state: ManifoldState) -> np.ndarray:
    """Digital beamformer U_B Sigma_B^{-1/2} U_B^H V~ Sigma~ for the state."""
    cols = state.v_tilde[:, : eig.n_streams]
    return eig.inv_sqrt @ (cols * state.b[None, :])


def _quadratic_diagonals(
    state: ManifoldState, eig: EigB
) -> tuple[np.ndarray, np.ndarray]:
    """Real diagonals of V^H B~ V and V^H Phi~ V over the active columns."""
    cols = state.v_tilde[:, : eig.n_streams]
    diag_b = np.real(np.sum(cols.conj() * (eig.b_tilde @ cols), axis=0))
    diag_phi = np.real(np.sum(cols.conj() * (eig.phi_tilde @ cols), axis=0))
    return diag_b, diag_phi


def _slacks(
    state: ManifoldState, eig: EigB, phi_set: PhiSet
) -> tuple[float, float, bool]:
    """(power slack, sensing slack, sensing_active)."""
    b2 = state.b**2
    diag_b, diag_phi = _quadratic_diagonals(state, eig)
    power_slack = eig.power_budget - float(b2 @ diag_b)
    active = phi_set.gamma0 > 0.0
    sens_slack = float(b2 @ diag_phi) - phi_set.gamma0 if active else np.inf
    return power_slack, sens_slack, active


def barrier_value(
    state: ManifoldState, eig: EigB, phi_set: PhiSet, config: ManifoldConfig
) -> float:
    """Barrier objective; +inf outside the strictly feasible region.

    f = -sum ln(1+b_i^2) + phi(power slack) + phi(sensing slack) with
    phi(u) = -ln(u)/t. Natural log throughout; conversion to bits happens
    only at the metric layer.
    """
    power_slack, sens_slack, active = _slacks(state, eig, phi_set)
    if power_slack <= 0.0 or (active and sens_slack <= 0.0):
        return np.inf
    t = config.barrier_t
    val = -float(np.sum(np.log1p(state.b**2))) - np.log(power_slack) / t
    if active:
        val -= np.log(sens_slack) / t
    return val


def grad_b(
    state: ManifoldState, eig: EigB, phi_set: PhiSet, config: ManifoldConfig
) -> np.ndarray:
    """Euclidean gradient of the barrier objective with respect to b."""
    power_slack, sens_slack, active = _slacks(state, eig, phi_set)
    if power_slack <= 0.0 or (active and sens_slack <= 0.0):
        raise InfeasiblePointError("gradient requested at an infeasible point")
    b = state.b
    diag_b, diag_phi = _quadratic_diagonals(state, eig)
    t = config.barrier_t
    grad = -2.0 * b / (1.0 + b**2) + (2.0 / t) * (diag_b / power_slack) * b
    if active:
        grad -= (2.0 / t) * (diag_phi / sens_slack) * b
    return grad


def grad_v(
    state: ManifoldState, eig: EigB, phi_set: PhiSet, config: ManifoldConfig
) -> np.ndarray:
    """Euclidean gradient with respect to V~; columns past n_streams are zero."""
    power_slack, sens_slack, active = _slacks(state, eig, phi_set)
    if power_slack <= 0.0 or (active and sens_slack <= 0.0):
        raise InfeasiblePointError("gradient requested at an infeasible point")
    ns = eig.n_streams
    cols = state.v_tilde[:, :ns]
    b2 = state.b**2
    t = config.barrier_t
    grad = np.zeros_like(state.v_tilde)
    grad[:, :ns] = (2.0 / t) * (eig.b_tilde @ cols) * b2[None, :] / power_slack
    if active:
        grad[:, :ns] -= (2.0 / t) * (eig.phi_tilde @ cols) * b2[None, :] / sens_slack
    return grad


def tangent_project(
    v_tilde: np.ndarray, grad: np.ndarray, drift_tol: float = 1e-6
) -> np.ndarray:
    """Project the negated gradient onto the unitary-group tangent space.

    Returns -V skew(V^H G); the result Z satisfies Z^H V + V^H Z = 0 and has
    nonpositive inner product with G.
    """
    drift = np.linalg.norm(v_tilde.conj().T @ v_tilde - np.eye(v_tilde.shape[1]))
    if drift > drift_tol:
        raise ValueError(f"v_tilde drifted off the manifold (||V^HV-I||={drift:.2e})")
    a = v_tilde.conj().T @ grad
    skew = 0.5 * (a - a.conj().T)
    return -v_tilde @ skew


def stiefel_retract(z: np.ndarray) -> np.ndarray:
    """SVD polar factor: the unitary matrix nearest to z in Frobenius norm."""
    u, s, vh = np.linalg.svd(z)
    if s[0] == 0.0 or s[-1] < 1e-12 * s[0]:
        scale = max(s[0], 1.0)
        u, s, vh = np.linalg.svd(z + 1e-10 * scale * np.eye(z.shape[0]))
        if s[0] == 0.0 or s[-1] < 1e-12 * s[0]:
            raise RetractionError("step matrix is numerically rank deficient")
    return u @ vh


def _complete_to_unitary(first_col: np.ndarray) -> np.ndarray:
    """Unitary matrix whose first column equals the given unit vector."""
    n = first_col.size
    drop = int(np.argmax(np.abs(first_col)))
    eye = np.eye(n, dtype=complex)
    cols = [first_col[:, None]] + [eye[:, j : j + 1] for j in range(n) if j != drop]
    q, _ = np.linalg.qr(np.concatenate(cols, axis=1))
    # qr pins the first column only up to a unit phase; fix it exactly
    q[:, 0] = first_col
    return q


def _state_from_direction(
    eig: EigB, direction: np.ndarray, b: np.ndarray
) -> ManifoldState:
    """State whose active columns span col(U_B) with `direction` first."""
    coeff = eig.u_b.conj().T @ direction
    coeff = coeff / np.linalg.norm(coeff)
    rot = _complete_to_unitary(coeff)
    v = np.concatenate([eig.u_b @ rot, eig.null_basis], axis=1)
    return ManifoldState(v_tilde=v, b=b.copy())


def _waterfill(gains: np.ndarray, budget: float) -> np.ndarray:
    """Power allocation maximizing sum log(1 + p_i g_i) under sum p_i <= budget."""
    gains = np.asarray(gains, dtype=float)
    powers = np.zeros_like(gains)
    active = gains > 0
    order = np.argsort(gains[active])[::-1]
    idx = np.nonzero(active)[0][order]
    for keep in range(idx.size, 0, -1):
        sel = idx[:keep]
        level = (budget + np.sum(1.0 / gains[sel])) / keep
        p = level - 1.0 / gains[sel]
        if p[-1] >= 0:
            powers[sel] = p
            break
    return powers


def phase1_feasible(
    eig: EigB,
    phi_set: PhiSet,
    config: ManifoldConfig,
    rng: np.random.Generator,
) -> ManifoldState:
    """Construct a strictly feasible starting state or certify infeasibility.

    With the sensing constraint inactive, the streams get a waterfilling
    split of 90% of the budget over the channel directions. Otherwise the
    first column carries the sensing load on the most power-efficient
    positive-curvature direction of the sensing form, the magnitude bisected
    toward full power until the sensing slack turns positive; a
    pencil-optimal direction is tried before giving up, and leftover power
    is rebalanced onto the remaining streams when feasibility allows. The
    infeasibility certificate is the analytic bound: the largest sensing
    value attainable at full power is budget * lambda_max of the sensing
    form compressed onto col(U_B) through the power metric.
    """
    ns, budget = eig.n_streams, eig.power_budget
    if phi_set.gamma0 <= 0.0:
        b = np.sqrt(_waterfill(eig.sigma_b, 0.9 * budget) * eig.sigma_b)
        v = np.concatenate([eig.u_b, eig.null_basis], axis=1)
        return ManifoldState(v_tilde=v, b=b)

    # Sensing form restricted to col(U_B), in power-normalized coordinates:
    # directions v = U_B Sigma_B^{1/2} u / |.| have unit power curvature.
    compressed = eig.u_b.conj().T @ eig.phi_tilde @ eig.u_b
    scale = np.sqrt(eig.sigma_b)
    pencil = (scale[:, None] * compressed) * scale[None, :]
    pencil = 0.5 * (pencil + pencil.conj().T)
    pvals, pvecs = np.linalg.eigh(pencil)
    bound = budget * float(pvals[-1])
    if bound <= phi_set.gamma0:
        raise InfeasibleProblemError(
            f"sensing threshold unattainable: max value at full power "
            f"{bound:.6g} <= required {phi_set.gamma0:.6g}",
            bound=bound,
        )

    candidates = []
    lam, vecs = np.linalg.eigh(compressed)
    lam, vecs = lam[::-1], vecs[:, ::-1]
    # power curvature of direction U_B vecs[:, i] is sum_j |vecs[j, i]|^2 / sigma_j
    beta = np.sum(np.abs(vecs) ** 2 / eig.sigma_b[:, None], axis=0)
    positive = lam > 0
    if np.any(positive):
        ratios = np.where(positive, lam / beta, -np.inf)
        best = int(np.argmax(ratios))
        candidates.append(eig.u_b @ vecs[:, best])
    top = eig.u_b @ (scale * pvecs[:, -1])
    candidates.append(top / np.linalg.norm(top))

    states = []
    # the unconstrained waterfilling split often clears the threshold for
    # free; offering it keeps the start continuous across threshold sweeps
    wf = ManifoldState(
        v_tilde=np.concatenate([eig.u_b, eig.null_basis], axis=1),
        b=np.sqrt(_waterfill(eig.sigma_b, 0.9 * budget) * eig.sigma_b),
    )
    p_slack, s_slack, _ = _slacks(wf, eig, phi_set)
    if p_slack > 0.0 and s_slack > 0.0:
        states.append(wf)
    for direction in candidates:
        b_curv, phi_curv = _direction_curvatures(eig, direction)
        if phi_curv <= 0.0 or b_curv <= 0.0:
            continue
        rho = 0.9
        for _ in range(50):
            b1_sq = rho * budget / b_curv
            if b1_sq * phi_curv > phi_set.gamma0 and rho < 1.0:
                b = np.zeros(ns)
                b[0] = np.sqrt(b1_sq)
                state = _state_from_direction(eig, direction, b)
                states.append(_rebalance(state, eig, phi_set, b_curv, phi_curv))
                break
            rho = 0.5 * (rho + 1.0)
    if not states:
        raise InfeasibleProblemError(
            "no strictly feasible point found after bisection", bound=bound
        )
    values = [barrier_value(s, eig, phi_set, config) for s in states]
    return states[int(np.argmin(values))]


def _direction_curvatures(eig: EigB, direction: np.ndarray) -> tuple[float, float]:
    """Power and sensing quadratic forms along a unit direction."""
    b_curv = float(np.real(direction.conj() @ eig.b_tilde @ direction))
    phi_curv = float(np.real(direction.conj() @ eig.phi_tilde @ direction))
    return b_curv, phi_curv


def _rebalance(
    state: ManifoldState, eig: EigB, phi_set: PhiSet, b_curv: float, phi_curv: float
) -> ManifoldState:
    """Shrink the sensing column to a margin and waterfill the rest.

    A single-coordinate b leaves the other stream gradients at exactly zero
    and parks all power on the sensing direction, both of which the descent
    escapes only slowly; starting near the constrained waterfilling split
    costs nothing and keeps strict feasibility (verified, with fallback).
    """
    ns = eig.n_streams
    if ns == 1:
        return state
    budget = eig.power_budget
    b0_sq_min = phi_set.gamma0 / phi_curv
    diag_b, _ = _quadratic_diagonals(state, eig)
    variants = [state]
    for margin in (2.0, 1.5, 1.1):
        b0_sq = margin * b0_sq_min
        used = b0_sq * b_curv
        if used >= 0.9 * budget:
            continue
        gains = 1.0 / diag_b[1:]
        powers = _waterfill(gains, 0.9 * budget - used)
        rate_b = np.sqrt(powers * gains)
        for _ in range(40):
            trial = state.copy()
            trial.b[0] = np.sqrt(b0_sq)
            trial.b[1:] = rate_b
            power_slack, sens_slack, active = _slacks(trial, eig, phi_set)
            if power_slack > 0.0 and (not active or sens_slack > 0.0):
                variants.append(trial)
                break
            rate_b *= 0.5
    # prefer the variant with the most rate already in place
    scores = [-float(np.sum(np.log1p(v.b**2))) for v in variants]
    return variants[int(np.argmin(scores))]


def _orthonormality_drift(v: np.ndarray) -> float:
    return float(np.linalg.norm(v.conj().T @ v - np.eye(v.shape[1])))


def rm_jgd(
    eig: EigB,
    phi_set: PhiSet,
    config: ManifoldConfig,
    init: ManifoldState,
    trace_path: Optional[str] = None,
) -> RmJgdResult:
    """Joint gradient descent over (V~, b) with backtracking line search.

    Each iteration projects the V-gradient to the tangent space, takes the
    steepest-descent pair direction, backtracks a common step until the
    barrier strictly decreases (Armijo), and retracts V back onto the
    manifold. Terminates when both squared gradient norms fall below the
    tolerances, the iteration cap is reached, or no decreasing step exists.
    """
    if not np.isfinite(barrier_value(init, eig, phi_set, config)):
        raise ValueError("initial state is infeasible for the barrier")
    stage_traces: list[list[float]] = []
    state = init.copy()
    total_iters = 0
    status = "converged"
    cfg = config
    rounds = 1
    t = config.barrier_t
    if config.continuation is not None:
        rounds += config.continuation[1]
    rows: list[tuple] = []
    for stage in range(rounds):
        if stage > 0:
            t *= config.continuation[0]
        cfg = ManifoldConfig(
            barrier_t=t,
            eps_v=config.eps_v,
            eps_b=config.eps_b,
            max_iterations=config.max_iterations,
            armijo_shrink=config.armijo_shrink,
            armijo_slope=config.armijo_slope,
            armijo_initial=config.armijo_initial,
            min_step=config.min_step,
        )
        state, trace, iters, status, stage_rows = _descend(state, eig, phi_set, cfg)
        stage_traces.append(trace)
        total_iters += iters
        rows.extend(stage_rows)
    if trace_path is not None:
        with open(trace_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["iter", "f", "grad_norm_v", "grad_norm_b", "step_v", "step_b"]
            )
            writer.writerows(rows)
    return RmJgdResult(
        state=state,
        w_bb=assemble_wbb(eig, state),
        trace=stage_traces[-1],
        iterations=total_iters,
        status=status,
        stage_traces=stage_traces,
    )


def _backtrack(
    f_cur: float,
    trial: float,
    slope: float,
    evaluate,
    cfg: ManifoldConfig,
) -> tuple[Optional[float], float]:
    """Armijo backtracking from a growing trial step; (step, f_new) or (None, f)."""
    step = trial
    while step >= cfg.min_step:
        f_new = evaluate(step)
        if f_new < f_cur + cfg.armijo_slope * step * slope:
            return step, f_new
        step *= cfg.armijo_shrink
    return None, f_cur


def _descend(
    state: ManifoldState, eig: EigB, phi_set: PhiSet, cfg: ManifoldConfig
) -> tuple[ManifoldState, list[float], int, str, list[tuple]]:
    f_cur = barrier_value(state, eig, phi_set, cfg)
    trace = [f_cur]
    rows: list[tuple] = []
    status = "max_iter"
    iters = 0
    # Per-block trial steps grow between iterations: the landscape is nearly
    # flat in b far from the budget while the barrier makes V steep, so a
    # shared unit step would stall one block or the other.
    trial_v = cfg.armijo_initial
    trial_b = cfg.armijo_initial
    for n in range(cfg.max_iterations):
        gv = grad_v(state, eig, phi_set, cfg)
        gb = grad_b(state, eig, phi_set, cfg)
        xi_v = tangent_project(state.v_tilde, gv)
        xi_b = -gb
        norm_v_sq = float(np.linalg.norm(xi_v) ** 2)
        norm_b_sq = float(xi_b @ xi_b)
        if norm_v_sq < cfg.eps_v and norm_b_sq < cfg.eps_b:
            status = "converged"
            break

        step_v, f_mid = _backtrack(
            f_cur,
            trial_v,
            -norm_v_sq,
            lambda s: barrier_value(
                ManifoldState(stiefel_retract(state.v_tilde + s * xi_v), state.b),
                eig, phi_set, cfg,
            ),
            cfg,
        ) if norm_v_sq >= cfg.eps_v else (None, f_cur)
        v_new = (
            stiefel_retract(state.v_tilde + step_v * xi_v)
            if step_v is not None
            else state.v_tilde
        )

        step_b, f_new = _backtrack(
            f_mid,
            trial_b,
            -norm_b_sq,
            lambda s: barrier_value(
                ManifoldState(v_new, state.b + s * xi_b), eig, phi_set, cfg
            ),
            cfg,
        ) if norm_b_sq >= cfg.eps_b else (None, f_mid)
        b_new = state.b + step_b * xi_b if step_b is not None else state.b

        if step_v is None and step_b is None:
            status = "stalled"
            break
        state = ManifoldState(v_tilde=v_new, b=b_new)
        f_cur = f_new
        if _orthonormality_drift(state.v_tilde) > 1e-8:
            state.v_tilde = stiefel_retract(state.v_tilde)
        trial_v = 4.0 * step_v if step_v is not None else cfg.armijo_initial
        trial_b = 4.0 * step_b if step_b is not None else cfg.armijo_initial
        trial_v = min(max(trial_v, cfg.armijo_initial), 1e12)
        trial_b = min(max(trial_b, cfg.armijo_initial), 1e12)
        trace.append(f_cur)
        iters = n + 1
        rows.append(
            (
                iters,
                f_cur,
                np.sqrt(norm_v_sq),
                np.sqrt(norm_b_sq),
                step_v if step_v is not None else 0.0,
                step_b if step_b is not None else 0.0,
            )
        )
    return state, trace, iters, status, rows
