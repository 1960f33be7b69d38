"""Beamformer types, performance metrics and the subarray-response subspace.

The joint basis U collects zero-padded intra-subarray steering vectors of all
sensing objects and communication paths. A column permutation groups the
columns of each subarray together, yielding the block-diagonal U_tilde whose
k-th block stacks that subarray's steering vectors side by side. U_tilde is
simultaneously the optimal analog beamformer: every entry of a block is unit
modulus, so the group-connected phase-shifter constraint is met for free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import CommChannel, SensingResponses


@dataclass(frozen=True)
class SubspaceBasis:
    """Joint communication/sensing subspace of the transmit array.

    u has shape (N, K*(Q+Np)) with sensing blocks first; u_tilde = u[:, perm]
    is exactly block diagonal with blocks a_blocks[k] of shape (M, Q+Np).
    """

    u: np.ndarray
    u_tilde: np.ndarray
    a_blocks: np.ndarray
    permutation: np.ndarray
    k_subarrays: int
    m_antennas: int
    n_objects: int
    n_paths: int

    @property
    def n_rf(self) -> int:
        return self.u_tilde.shape[1]

    @property
    def cols_per_block(self) -> int:
        return self.n_objects + self.n_paths


@dataclass(frozen=True)
class ReceiveBeamformer:
    """Sensing receive filter over the N-element receive array."""

    w: np.ndarray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.w.view(float))):
            raise ValueError("receive beamformer has non-finite entries")
        if np.linalg.norm(self.w) == 0.0:
            raise ValueError("receive beamformer is zero")


@dataclass(frozen=True)
class PhiSet:
    """Reduced-space sensing quadratic forms and the SCNR constraint level.

    phi[q] = c_q * v_q v_q^H with v_q = U_tilde^H g_tq and c_q = |w^H g_rq|^2;
    gamma0 = scnr_min * sigma_s_sq * ||w||^2. noise_term = sigma_s_sq*||w||^2
    is kept separately so the reduced SCNR value can be reported.
    """

    phi: tuple[np.ndarray, ...]
    gamma0: float
    noise_term: float


@dataclass(frozen=True)
class HybridBeamformer:
    """Block-diagonal analog stage W_RF cascaded with digital W_BB."""

    w_rf: np.ndarray
    w_bb: np.ndarray
    k_subarrays: int
    m_antennas: int

    @property
    def m_rf(self) -> int:
        return self.w_rf.shape[1] // self.k_subarrays

    @property
    def n_rf(self) -> int:
        return self.w_rf.shape[1]

    @property
    def n_streams(self) -> int:
        return self.w_bb.shape[1]

    def covariance(self) -> np.ndarray:
        """Transmit covariance W_RF W_BB W_BB^H W_RF^H."""
        ww = self.w_rf @ self.w_bb
        return ww @ ww.conj().T

    def check(self) -> None:
        """Enforce the structural invariants; raises on violation.

        Off-block analog entries must be exactly zero, in-block entries unit
        modulus, and the per-subarray power proxy within the stream budget.
        """
        ok, mod_err = analog_feasibility(self.w_rf, self.k_subarrays)
        if not ok:
            raise ValueError("analog beamformer has support outside its blocks")
        if mod_err > 1e-9:
            raise ValueError(f"analog entries deviate from unit modulus by {mod_err:.2e}")
        proxy = self.m_antennas * float(np.linalg.norm(self.w_bb) ** 2)
        if proxy > self.n_streams + 1e-9:
            raise ValueError(
                f"proxy transmit power {proxy:.12g} exceeds the stream budget "
                f"{self.n_streams}"
            )


def build_subspace(
    comm: CommChannel, responses: SensingResponses, n_objects: int, n_paths: int
) -> SubspaceBasis:
    """Assemble U, its column permutation and the block-diagonal U_tilde.

    U's first n_objects*K columns are the zero-padded sensing steering
    vectors (grouped by object, subarray-major within a group); the remaining
    n_paths*K columns are the communication AoD steering vectors (grouped by
    path). The permutation makes all columns of subarray k contiguous in the
    order [objects..., paths...].
    """
    if len(responses) != n_objects:
        raise ValueError(f"expected {n_objects} object responses, got {len(responses)}")
    if len(comm.paths) != n_paths:
        raise ValueError(f"expected {n_paths} paths, got {len(comm.paths)}")
    k, m = comm.k_subarrays, comm.m_antennas
    from .geometry import steering_vector  # local import avoids cycle at module load

    cols = n_objects + n_paths
    a_blocks = np.zeros((k, m, cols), dtype=complex)
    for q, resp in enumerate(responses.objects):
        a_blocks[:, :, q] = resp.a_t_blocks
    for p, path in enumerate(comm.paths):
        for i in range(k):
            a_blocks[i, :, n_objects + p] = steering_vector(
                m, path.aod[i], comm.d, comm.wavelength
            )

    n = k * m
    u = np.zeros((n, k * cols), dtype=complex)
    for q in range(n_objects):
        for i in range(k):
            u[i * m : (i + 1) * m, q * k + i] = a_blocks[i, :, q]
    for p in range(n_paths):
        for i in range(k):
            u[i * m : (i + 1) * m, n_objects * k + p * k + i] = a_blocks[
                i, :, n_objects + p
            ]

    perm = np.empty(k * cols, dtype=int)
    for i in range(k):
        for c in range(cols):
            if c < n_objects:
                perm[i * cols + c] = c * k + i
            else:
                perm[i * cols + c] = n_objects * k + (c - n_objects) * k + i
    u_tilde = u[:, perm]
    return SubspaceBasis(
        u=u,
        u_tilde=u_tilde,
        a_blocks=a_blocks,
        permutation=perm,
        k_subarrays=k,
        m_antennas=m,
        n_objects=n_objects,
        n_paths=n_paths,
    )


def optimal_analog(basis: SubspaceBasis) -> np.ndarray:
    """Closed-form analog beamformer: the block-diagonal basis itself."""
    return basis.u_tilde.copy()


def analog_support(n: int, k_subarrays: int, m_rf: int) -> np.ndarray:
    """Boolean mask of the allowed nonzero pattern of a block-diagonal W_RF."""
    m = n // k_subarrays
    mask = np.zeros((n, k_subarrays * m_rf), dtype=bool)
    for i in range(k_subarrays):
        mask[i * m : (i + 1) * m, i * m_rf : (i + 1) * m_rf] = True
    return mask


def analog_feasibility(
    w_rf: np.ndarray, k_subarrays: int
) -> tuple[bool, float]:
    """Check group-connected membership: exact off-block zeros, unit modulus.

    Returns (support_ok, max in-block modulus deviation from 1).
    """
    n, n_rf = w_rf.shape
    if n % k_subarrays or n_rf % k_subarrays:
        return False, np.inf
    mask = analog_support(n, k_subarrays, n_rf // k_subarrays)
    support_ok = bool(np.all(w_rf[~mask] == 0.0))
    mod_err = float(np.max(np.abs(np.abs(w_rf[mask]) - 1.0))) if mask.any() else 0.0
    return support_ok, mod_err


def spectral_efficiency(
    h: np.ndarray, w_rf: np.ndarray, w_bb: np.ndarray, sigma_c_sq: float
) -> float:
    """Achievable rate log2 det(I + H W W^H H^H / sigma_c^2) in bits/s/Hz.

    Evaluated through the singular values of H W_RF W_BB, which keeps the
    determinant symmetric and nonnegative by construction.
    """
    if sigma_c_sq <= 0:
        raise ValueError("sigma_c_sq must be positive")
    g = h @ w_rf @ w_bb
    if not np.all(np.isfinite(g.view(float))):
        raise ValueError("non-finite effective channel")
    s = np.linalg.svd(g, compute_uv=False)
    return float(np.sum(np.log2(1.0 + s**2 / sigma_c_sq)))


def se_from_covariance(h_eff: np.ndarray, r: np.ndarray, sigma_c_sq: float) -> float:
    """log2 det(I + H_eff R H_eff^H / sigma_c^2) for a PSD covariance R."""
    vals, vecs = np.linalg.eigh(0.5 * (r + r.conj().T))
    vals = np.clip(vals, 0.0, None)
    factor = vecs * np.sqrt(vals)[None, :]
    s = np.linalg.svd(h_eff @ factor, compute_uv=False)
    return float(np.sum(np.log2(1.0 + s**2 / sigma_c_sq)))


def _object_gains(
    responses: SensingResponses, alphas: np.ndarray, r_x: np.ndarray, w: np.ndarray
) -> np.ndarray:
    """Per-object received echo powers alpha_q^2 |w^H g_rq|^2 g_tq^H R g_tq."""
    out = np.empty(len(responses))
    for q, resp in enumerate(responses.objects):
        forward = np.real(resp.g_t.conj() @ r_x @ resp.g_t)
        out[q] = alphas[q] ** 2 * np.abs(w.conj() @ resp.g_r) ** 2 * forward
    return out


def scnr(
    w: np.ndarray,
    responses: SensingResponses,
    alphas: np.ndarray,
    r_x: np.ndarray,
    sigma_s_sq: float,
) -> float:
    """Output SCNR of receive filter w for transmit covariance R_X.

    Object 0 is the target; the rest are clutter. alphas holds the
    reflection amplitudes alpha_q.
    """
    if np.linalg.norm(w) == 0.0:
        raise ValueError("receive filter must be nonzero")
    gains = _object_gains(responses, np.asarray(alphas, dtype=float), r_x, w)
    noise = sigma_s_sq * float(np.real(w.conj() @ w))
    denom = float(np.sum(gains[1:])) + noise
    if denom <= 0.0:
        raise ZeroDivisionError("zero clutter-plus-noise power (sigma_s_sq=0, no clutter)")
    return float(gains[0] / denom)


def mvdr_receive(
    responses: SensingResponses,
    alphas: np.ndarray,
    r_x: np.ndarray,
    sigma_s_sq: float,
) -> ReceiveBeamformer:
    """Closed-form SCNR-optimal receive filter.

    w* = (Sigma + sigma_s^2 I)^{-1} g_r0 / (g_r0^H (Sigma + sigma_s^2 I)^{-1} g_r0)
    with Sigma the clutter covariance sum_q alpha_q^2 (g_tq^H R g_tq) g_rq g_rq^H.
    """
    if sigma_s_sq <= 0:
        raise ValueError("sigma_s_sq must be positive")
    alphas = np.asarray(alphas, dtype=float)
    n = responses[0].g_r.size
    cov = sigma_s_sq * np.eye(n, dtype=complex)
    for q in range(1, len(responses)):
        resp = responses[q]
        forward = np.real(resp.g_t.conj() @ r_x @ resp.g_t)
        cov += alphas[q] ** 2 * forward * np.outer(resp.g_r, resp.g_r.conj())
    g0 = responses[0].g_r
    sol = np.linalg.solve(cov, g0)
    return ReceiveBeamformer(w=sol / np.real(g0.conj() @ sol))


def phi_matrices(
    basis: SubspaceBasis,
    responses: SensingResponses,
    w: np.ndarray,
    scnr_min: float,
    sigma_s_sq: float,
) -> PhiSet:
    """Rank-1 reduced sensing forms Phi_q = |w^H g_rq|^2 (U~^H g_tq)(U~^H g_tq)^H."""
    phis = []
    for resp in responses.objects:
        v = basis.u_tilde.conj().T @ resp.g_t
        c = float(np.abs(w.conj() @ resp.g_r) ** 2)
        phis.append(c * np.outer(v, v.conj()))
    w_norm_sq = float(np.real(w.conj() @ w))
    return PhiSet(
        phi=tuple(phis),
        gamma0=scnr_min * sigma_s_sq * w_norm_sq,
        noise_term=sigma_s_sq * w_norm_sq,
    )


def sensing_form(phi_set: PhiSet, alphas: np.ndarray, scnr_min: float) -> np.ndarray:
    """Constraint matrix Psi = alpha_0^2 Phi_0 - scnr_min * sum_q alpha_q^2 Phi_q."""
    alphas = np.asarray(alphas, dtype=float)
    psi = alphas[0] ** 2 * phi_set.phi[0].copy()
    for q in range(1, len(phi_set.phi)):
        psi -= scnr_min * alphas[q] ** 2 * phi_set.phi[q]
    return 0.5 * (psi + psi.conj().T)


def scnr_reduced(w_bb: np.ndarray, phi_set: PhiSet, alphas: np.ndarray) -> float:
    """Reduced-space SCNR of a digital beamformer under the fixed filter.

    alpha_0^2 tr(W^H Phi_0 W) / (sum_{q>=1} alpha_q^2 tr(W^H Phi_q W) + noise).
    """
    alphas = np.asarray(alphas, dtype=float)
    traces = np.array(
        [float(np.real(np.sum(w_bb.conj() * (p @ w_bb)))) for p in phi_set.phi]
    )
    denom = float(np.sum(alphas[1:] ** 2 * traces[1:])) + phi_set.noise_term
    return float(alphas[0] ** 2 * traces[0] / denom)


def transmit_power(w_rf: np.ndarray, w_bb: np.ndarray) -> tuple[float, float]:
    """(exact, proxy) transmit powers.

    exact = ||W_RF W_BB||_F^2; proxy = M ||W_BB||_F^2 with M the squared
    column norm of the analog stage (the per-subarray antenna count for
    unit-modulus blocks). The proxy is exact only when each analog block has
    orthogonal columns, so both are returned and the gap is the caller's to
    report.
    """
    exact = float(np.linalg.norm(w_rf @ w_bb) ** 2)
    m = float(np.round(np.linalg.norm(w_rf[:, 0]) ** 2))
    proxy = float(m * np.linalg.norm(w_bb) ** 2)
    return exact, proxy


def verify_covariance_subspace(
    r_x: np.ndarray, basis: SubspaceBasis, rel_cutoff: float = 1e-10
) -> float:
    """Relative residual of R_X outside the span of U_tilde.

    Returns ||P_perp R_X P_perp||_F / ||R_X||_F with P_perp the orthogonal
    projector onto the complement of col(U_tilde); zero exactly when R_X is
    supported on the subspace.
    """
    norm = float(np.linalg.norm(r_x))
    if norm == 0.0:
        return 0.0
    u = basis.u_tilde
    gram = u.conj().T @ u
    vals, vecs = np.linalg.eigh(gram)
    keep = vals > rel_cutoff * vals.max()
    inv = (vecs[:, keep] / vals[keep][None, :]) @ vecs[:, keep].conj().T
    proj = u @ inv @ u.conj().T
    p_perp = np.eye(u.shape[0]) - proj
    return float(np.linalg.norm(p_perp @ r_x @ p_perp) / norm)
