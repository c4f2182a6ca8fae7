"""Null control of coupled parabolic systems with a non-diagonalizable
diffusion matrix, by transmutation of controlled waves.

    y_t = D Δy + A(x) y + 1_ω B u   on (0, ℓ), Dirichlet ends.

Pipeline: triangularize D = P^{-1} Τ P; control the wave system
z_ss = (ΤΔ + Ã) z + 1_ω v to rest one component per stage; extend z, v evenly
to (-S, S); build a heat kernel k(t, s) on (-S, S) with k(0) = δ_0, boundary
value w(t) on both ends and k(T) = 0 (method of moments); set
y(t) = ∫ k(t, s) z̄(s) ds and u(t) = ∫ k(t, s) v̄(s) ds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .discretization import Grid1D, dirichlet_laplacian, interval_mask
from .lti_core import LtiSystem, min_norm_control, simpson_weights, simulate_lti, ControlSignal
from .wave_lab import gcc_time_1d

STAGE_MARGIN = 1.5
WAVE_PENALTY = 1e-14
MOMENT_TOL = 1e-6


class NotRealSpectrum(ValueError):
    """D has eigenvalues off the real axis."""


class IncreaseModes(RuntimeError):
    """The truncated moment problem was not solved to tolerance."""

    def __init__(self, message, table):
        super().__init__(message)
        self.table = table


class StageFailure(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class DiffusionMatrix:
    """Constant diffusion matrix with D ξ·ξ >= α |ξ|² and real spectrum."""

    D: np.ndarray
    alpha: float | None = None

    def __post_init__(self):
        D = np.array(self.D, dtype=float, ndmin=2)
        if D.shape[0] != D.shape[1]:
            raise ValueError("D must be square")
        sym_min = float(linalg.eigvalsh(0.5 * (D + D.T))[0])
        alpha = sym_min if self.alpha is None else float(self.alpha)
        if alpha <= 0 or sym_min < alpha - 1e-12:
            raise ValueError(f"D is not uniformly elliptic: λ_min(sym D) = {sym_min:.3e}, α = {alpha}")
        ev = linalg.eigvals(D)
        if np.max(np.abs(ev.imag)) > 1e-8 * max(1.0, np.abs(ev).max()):
            raise NotRealSpectrum(f"D has complex eigenvalues {ev}")
        D.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "alpha", alpha)

    @property
    def n(self) -> int:
        return self.D.shape[0]


def triangularize_diffusion(D: DiffusionMatrix):
    """Orthogonal P and lower-triangular Τ with P D P^{-1} = Τ.

    Uses the real Schur form of D^T: D^T = Z U Z^T with U upper triangular, so
    Z^T D Z = U^T.  A 2x2 block in U means a complex pair.
    """
    U, Z = linalg.schur(D.D.T, output="real")
    if np.any(np.abs(np.diag(U, -1)) > 1e-12 * max(1.0, np.abs(U).max())):
        raise NotRealSpectrum("real Schur form has a 2x2 block")
    Tau = np.tril(U.T)
    P = Z.T
    return P, Tau


# ---------------------------------------------------------------------------
# staged wave control


@dataclass
class WaveStages:
    """Controlled wave trajectory on [0, S], stage by stage.

    ``s[i]``, ``z[i]`` (samples, 2 n m) and ``v[i]`` (samples, n m) hold the
    uniform node grid of stage i; consecutive stages share their boundary
    time but keep their own one-sided control values.
    """

    s: list
    z: list
    v: list
    lengths: list
    residuals: list
    S: float
    n: int
    m: int

    @property
    def final(self) -> np.ndarray:
        return self.z[-1][-1]


def wave_operator(Tau: np.ndarray, coupling: np.ndarray, grid: Grid1D) -> np.ndarray:
    """Block operator ΤΔ_h + Ã(x) on n m values; coupling has shape (n, n, m)."""
    n = Tau.shape[0]
    m = grid.N - 1
    K = np.kron(Tau, dirichlet_laplacian(grid))
    for i in range(n):
        for j in range(n):
            K[i * m:(i + 1) * m, j * m:(j + 1) * m] += np.diag(coupling[i, j])
    return K


def sequential_wave_control(Tau: np.ndarray, coupling: np.ndarray, grid: Grid1D, omega,
                            z0: np.ndarray, S_star: float | None = None, n_quad: int = 400,
                            penalty: float = WAVE_PENALTY, tol: float = 1e-2) -> WaveStages:
    """Drive z_ss = (ΤΔ + Ã) z + 1_ω v from (z0, 0) to rest, one component per stage.

    Stage i lasts STAGE_MARGIN·S*/√τ_ii and acts on component i only; by lower
    triangularity it sees components j < i as sources, which are already at
    rest.  The stage control is the penalized HUM control of the scalar wave
    with speed √τ_ii aimed at cancelling the free response of the full
    system over the stage.  ``tol`` bounds the relative energy left in the
    controlled component after its stage.
    """
    n = Tau.shape[0]
    m = grid.N - 1
    if np.any(np.triu(Tau, 1)) or np.any(np.triu(np.moveaxis(coupling, 2, 0), 1)):
        raise ValueError("Τ and Ã must be lower triangular")
    if np.any(np.diag(Tau) <= 0):
        raise ValueError("Τ must have a positive diagonal")
    S_star = gcc_time_1d(grid.L, omega) if S_star is None else S_star
    mask = interval_mask(grid.interior_nodes, omega).astype(float)
    K = wave_operator(Tau, coupling, grid)
    Znm = np.zeros((n * m, n * m))
    M = np.block([[Znm, np.eye(n * m)], [K, Znm]])
    Bfull = np.vstack([Znm, np.eye(n * m)])
    lap = dirichlet_laplacian(grid)
    chi_cols = np.diag(mask)[:, mask > 0]

    Z = np.concatenate([np.asarray(z0, float).ravel(), np.zeros(n * m)])
    energy0 = max(np.linalg.norm(Z), np.finfo(float).tiny)
    out = WaveStages([], [], [], [], [], 0.0, n, m)
    s0 = 0.0
    n_quad += n_quad % 2
    for i in range(n):
        length = STAGE_MARGIN * S_star / np.sqrt(Tau[i, i])
        Zfree = linalg.expm(length * M) @ Z
        target = -np.concatenate([Zfree[i * m:(i + 1) * m], Zfree[n * m + i * m:n * m + (i + 1) * m]])
        scalar = LtiSystem(np.block([[np.zeros((m, m)), np.eye(m)],
                                     [Tau[i, i] * lap + np.diag(coupling[i, i]), np.zeros((m, m))]]),
                           np.vstack([np.zeros((m, chi_cols.shape[1])), chi_cols]))
        u, _ = min_norm_control(scalar, length, np.zeros(2 * m), target, n_quad=n_quad, penalty=penalty)
        v = np.zeros((u.t_grid.size, n * m))
        v[:, i * m:(i + 1) * m] = (chi_cols @ u.values).T
        traj = simulate_lti(LtiSystem(M, Bfull), ControlSignal(u.t_grid, v.T), Z, length)
        Z = traj[-1]
        comp = np.concatenate([Z[i * m:(i + 1) * m], Z[n * m + i * m:n * m + (i + 1) * m]])
        res = float(np.linalg.norm(comp) / energy0)
        out.s.append(s0 + u.t_grid)
        out.z.append(traj)
        out.v.append(v)
        out.lengths.append(length)
        out.residuals.append(res)
        if res > tol:
            raise StageFailure(i + 1, f"component left with relative size {res:.2e} > {tol:.0e}")
        s0 += length
    out.S = s0
    return out


def extend_by_symmetry(s: np.ndarray, z: np.ndarray, v: np.ndarray, tol: float = 1e-2):
    """Even reflection onto (-S, S): z̄(s) = z(|s|), v̄(s) = v(|s|).

    ``z`` holds displacements (samples, points).  The last sample must be at
    rest up to ``tol`` relative to the largest sample, else ValueError.
    """
    s = np.asarray(s, float)
    z = np.asarray(z, float)
    v = np.asarray(v, float)
    if abs(s[0]) > 1e-14:
        raise ValueError("sample grid must start at s = 0")
    scale = max(np.abs(z).max(), np.finfo(float).tiny)
    if np.abs(z[-1]).max() > tol * scale:
        raise ValueError("terminal state is not at rest; the reflection would not vanish at ±S")
    sbar = np.concatenate([-s[:0:-1], s])
    zbar = np.concatenate([z[:0:-1], z])
    vbar = np.concatenate([v[:0:-1], v])
    return sbar, zbar, vbar


# ---------------------------------------------------------------------------
# heat kernel with Dirac initial datum


@dataclass
class HeatKernelControl:
    """Boundary control w(t) = Σ_q a_q sin(qπt/T) for the heat equation on
    (-S, S) with k(0) = δ_0 and k(±S, t) = w(t).

    Modes φ_j(s) = sin(jπ(s + S)/(2S))/√S, μ_j = (jπ/(2S))².  The modal
    coefficients c_j = ⟨k, φ_j⟩ obey c_j' = -μ_j c_j + g_j w with
    g_j = jπ/S^{3/2} for odd j and 0 for even j.
    """

    S: float
    T: float
    n_modes: int
    coef: np.ndarray
    moment_residuals: np.ndarray
    residual_table: list = field(default_factory=list)

    @property
    def js(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1)

    @property
    def mu(self) -> np.ndarray:
        return (self.js * np.pi / (2 * self.S)) ** 2

    @property
    def omegas(self) -> np.ndarray:
        return np.arange(1, self.coef.size + 1) * np.pi / self.T

    def w(self, t) -> np.ndarray:
        return np.sin(np.outer(np.atleast_1d(t), self.omegas)) @ self.coef

    def modal(self, t, js=None) -> np.ndarray:
        """c_j(t) for the requested modes (default 1..n_modes): (len(t), J)."""
        js = self.js if js is None else np.asarray(js)
        return modal_coefficients(self.coef, self.S, self.T, np.atleast_1d(t), js)

    def lifted_modal(self, t, js=None) -> np.ndarray:
        """Coefficients of k - w(t), which vanishes at ±S."""
        js = self.js if js is None else np.asarray(js)
        t = np.atleast_1d(t)
        return self.modal(t, js) - self.w(t)[:, None] * mode_mass(js, self.S)[None, :]

    def kernel(self, t, s) -> np.ndarray:
        """k(t, s) = w(t) + Σ_j (c_j(t) - w(t)⟨φ_j, 1⟩) φ_j(s) on a (t, s) grid."""
        phis = dirac_modes(np.asarray(s), self.js, self.S)
        return self.w(t)[:, None] + self.lifted_modal(t) @ phis.T


def dirac_modes(s, js, S) -> np.ndarray:
    """φ_j(s) = sin(jπ(s + S)/(2S))/√S sampled as (len(s), len(js))."""
    return np.sin(np.outer(np.asarray(s) + S, js) * np.pi / (2 * S)) / np.sqrt(S)


def mode_mass(js, S) -> np.ndarray:
    """⟨φ_j, 1⟩ = 4√S/(jπ) for odd j, 0 for even j."""
    js = np.asarray(js)
    return np.where(js % 2 == 1, 4 * np.sqrt(S) / (js * np.pi), 0.0)


def modal_coefficients(coef, S, T, t, js) -> np.ndarray:
    """Closed-form c_j(t) = e^{-μ_j t} φ_j(0) + g_j ∫_0^t e^{-μ_j(t-τ)} w(τ) dτ.

    For w = sin(ω τ): ∫_0^t e^{-μ(t-τ)} sin(ωτ) dτ = Im[(e^{iωt} - e^{-μt})/(μ + iω)].
    """
    js = np.asarray(js)
    mu = (js * np.pi / (2 * S)) ** 2
    phi0 = np.sin(js * np.pi / 2) / np.sqrt(S)
    g = np.where(js % 2 == 1, js * np.pi / S**1.5, 0.0)
    om = np.arange(1, np.size(coef) + 1) * np.pi / T
    t = np.asarray(t, float)
    free = np.exp(-np.outer(t, mu)) * phi0[None, :]
    if np.size(coef) == 0:
        return free
    num = np.exp(1j * om[None, None, :] * t[:, None, None]) - np.exp(-mu[None, :, None] * t[:, None, None])
    I = np.imag(num / (mu[None, :, None] + 1j * om[None, None, :]))
    return free + g[None, :] * (I @ coef)


def dirac_heat_control(S: float, T: float, n_modes: int = 16, n_basis: int | None = None,
                       ridge: float = 1e-14, tol: float = MOMENT_TOL) -> HeatKernelControl:
    """Minimal-norm (ridge) boundary control with c_j(T) = 0 for j <= n_modes.

    Even modes never move (φ_j(0) = 0 and g_j = 0 for even j), so only odd
    moments enter the least-squares system.  The time basis for w is
    sin(qπt/T), q = 1..n_basis (default 2 n_modes), so w(0) = w(T) = 0.
    """
    if n_modes < 4:
        raise ValueError("n_modes must be at least 4")
    if T <= 0 or S <= 0:
        raise ValueError("S and T must be positive")
    n_basis = 2 * n_modes if n_basis is None else n_basis
    js = np.arange(1, n_modes + 1)
    odd = js[js % 2 == 1]
    free_T = modal_coefficients(np.zeros(0), S, T, [T], odd)[0]
    # column q: response of the odd moments at T to w = sin(ω_q t)
    Mo = np.stack([modal_coefficients(np.eye(n_basis)[q], S, T, [T], odd)[0] - free_T
                   for q in range(n_basis)], axis=1)
    U, s, Vt = linalg.svd(Mo, full_matrices=False)
    coef = Vt.T @ ((s / (s**2 + ridge * s[0] ** 2)) * (U.T @ (-free_T)))
    resid = np.abs(modal_coefficients(coef, S, T, [T], js)[0])
    table = [(n_modes, n_basis, float(resid.max()))]
    out = HeatKernelControl(S, T, n_modes, coef, resid, table)
    if resid.max() > tol:
        raise IncreaseModes(f"moment residual {resid.max():.2e} > {tol:.0e} with {n_basis} basis functions",
                            table)
    return out


def transmutation_transform(k: np.ndarray, s: np.ndarray, zbar: np.ndarray, vbar: np.ndarray):
    """y(t) = ∫ k(t, s) z̄(s) ds and u(t) = ∫ k(t, s) v̄(s) ds by the trapezoid rule.

    ``k`` is (times, s-samples); ``zbar``, ``vbar`` are (s-samples, points).
    """
    s = np.asarray(s, float)
    w = np.zeros_like(s)
    ds = np.diff(s)
    w[1:] += 0.5 * ds
    w[:-1] += 0.5 * ds
    kw = np.asarray(k) * w[None, :]
    return kw @ zbar, kw @ vbar


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineReport:
    stages: list  # (name, dict of numbers)
    final_relative: float
    moment_residual: float
    reconstruction_error: float
    transmuted_final: float
    control_norm: float
    S: float
    S_star: float

    def text(self) -> str:
        lines = []
        for name, info in self.stages:
            lines.append(f"[{name}]")
            lines += [f"  {k} = {v:.6e}" if isinstance(v, float) else f"  {k} = {v}" for k, v in info.items()]
        return "\n".join(lines) + "\n"


@dataclass
class ParabolicControl:
    t: np.ndarray
    u: np.ndarray  # (times, n m), original variables, column block per component
    trajectory_end: np.ndarray
    report: PipelineReport
    transmuted: np.ndarray | None = None  # y(t) in triangular variables on a coarse time grid


def _coupling_array(A, n: int, m: int) -> np.ndarray:
    if A is None:
        return np.zeros((n, n, m))
    A = np.asarray(A, float)
    if A.ndim == 2:
        return np.repeat(A[:, :, None], m, axis=2)
    return A


def heat_operator(D, A, grid: Grid1D) -> np.ndarray:
    """D ⊗ Δ_h + A(x) on n (N-1) values."""
    n = D.shape[0]
    return wave_operator(np.asarray(D, float), _coupling_array(A, n, grid.N - 1), grid)


def implicit_euler(Ah: np.ndarray, Bh: np.ndarray, y0, u_samples, dt: float) -> np.ndarray:
    """y_{k+1} = (I - dt A)^{-1} (y_k + dt B u_{k+1}); returns the final state."""
    lu = linalg.lu_factor(np.eye(Ah.shape[0]) - dt * Ah)
    y = np.asarray(y0, float).ravel().copy()
    for uk in u_samples[1:]:
        y = linalg.lu_solve(lu, y + dt * (Bh @ uk))
    return y


def control_operator(B, grid: Grid1D, omega) -> np.ndarray:
    """Matrix mapping stacked grid controls (m_c blocks) to n (N-1) forcing."""
    mask = interval_mask(grid.interior_nodes, omega).astype(float)
    return np.kron(np.asarray(B, float), np.diag(mask))


def parabolic_null_control(D: DiffusionMatrix, A, B, grid: Grid1D, omega, T: float, y0,
                           n_modes: int = 16, n_basis: int | None = None, wave_quad: int = 400,
                           dt: float | None = None, ridge: float = 1e-14) -> ParabolicControl:
    """Null control of y_t = DΔy + A y + 1_ω B u through the transmutation pipeline.

    The kernel transform is evaluated mode by mode.  With the boundary lift
    k = w + k̃ (k̃ = 0 at ±S) the heat trajectory is

        y_N(t) = w(t) Z_0 + Σ_j c̃_j(t) Z_j,   u_N(t) = w(t) V_0 + Σ_j c̃_j(t) V_j,

    where V_j = ⟨φ_j, v̄⟩ is computed by Simpson's rule stage by stage and
    Z_j = ⟨φ_j, z̄⟩ by Green's identity (ΤΔ + Ã + μ_j) Z_j = -1_ω V_j + [boundary
    terms at ±S].  This keeps the transform consistent with the discrete
    wave operator, so the heat equation holds for y_N up to the mode tail
    and the wave residual at s = S.  Verification: implicit Euler with
    dt = h² from the true y0.
    """
    t_start = time.perf_counter()
    n, m = D.n, grid.N - 1
    B = np.asarray(B, float).reshape(n, -1)
    if np.linalg.matrix_rank(B) < n:
        raise ValueError("B must have rank n")
    C = np.linalg.pinv(B)  # right inverse: B C = I
    coupling = _coupling_array(A, n, m)
    y0 = np.asarray(y0, float).reshape(n, m)
    dt = grid.h**2 if dt is None else dt
    steps = int(round(T / dt))
    dt = T / steps
    tt = np.linspace(0.0, T, steps + 1)
    Ah = heat_operator(D.D, coupling, grid)
    Bh = control_operator(B, grid, omega)
    S_star = gcc_time_1d(grid.L, omega)
    stages = []

    if not np.any(y0):
        u = np.zeros((steps + 1, B.shape[1] * m))
        rep = PipelineReport([("trivial", {"note": "y0 = 0, every stage is zero"})], 0.0, 0.0, 0.0, 0.0, 0.0,
                             0.0, S_star)
        return ParabolicControl(tt, u, np.zeros(n * m), rep)

    P, Tau = triangularize_diffusion(D)
    tri_err = float(np.linalg.norm(P @ D.D @ P.T - Tau) / np.linalg.norm(D.D))
    Atil = np.einsum("ik,klx,jl->ijx", P, coupling, P)
    stages.append(("triangularize", {"residual": tri_err, "diag": str(np.round(np.diag(Tau), 12).tolist())}))

    w0 = (P @ y0).ravel()
    t0 = time.perf_counter()
    waves = sequential_wave_control(Tau, Atil, grid, omega, w0, S_star, wave_quad)
    S = waves.S
    stages.append(("wave", {"S": S, "stage_residuals": str([f"{r:.2e}" for r in waves.residuals]),
                            "final_relative": float(np.linalg.norm(waves.final) / np.linalg.norm(w0)),
                            "seconds": time.perf_counter() - t0}))

    t0 = time.perf_counter()
    heat = dirac_heat_control(S, T, n_modes, n_basis, ridge)
    stages.append(("moments", {"n_modes": n_modes, "max_residual": float(heat.moment_residuals.max()),
                               "w_coefficient_norm": float(np.linalg.norm(heat.coef)),
                               "seconds": time.perf_counter() - t0}))

    js = heat.js
    odd = js % 2 == 1
    mu = heat.mu
    mask = interval_mask(grid.interior_nodes, omega).astype(float)
    chin = np.tile(mask, n)
    # V_j and V_0 = ∫ v̄ over (-S, S): twice the integral over (0, S)
    Vj = np.zeros((js.size, n * m))
    V0 = np.zeros(n * m)
    for s_i, v_i in zip(waves.s, waves.v):
        nq = s_i.size - 1
        wq = simpson_weights(nq, (s_i[-1] - s_i[0]) / nq)
        phis = dirac_modes(s_i, js, S)
        Vj += 2 * np.einsum("s,sj,sx->jx", wq, phis, v_i)
        V0 += 2 * wq @ v_i
    Vj[~odd] = 0.0
    K = wave_operator(Tau, Atil, grid)
    zS = waves.final[:n * m]
    zsS = waves.final[n * m:]
    # [φ_j z̄_s - φ_j' z̄] from -S to S with z̄(-S) = z(S), z̄_s(-S) = -z_s(S)
    dphi = (js * np.pi / (2 * S)) / np.sqrt(S)
    bd = ((1.0 - (-1.0) ** js) * dphi)[:, None] * zS[None, :]
    Zj = np.zeros_like(Vj)
    for j in np.nonzero(odd)[0]:
        Zj[j] = linalg.solve(K + mu[j] * np.eye(n * m), -chin * Vj[j] + bd[j])
    Z0 = linalg.solve(K, 2 * zsS - chin * V0)

    Ct = heat.lifted_modal(tt)
    wt = heat.w(tt)
    ut = Ct @ Vj + wt[:, None] * V0[None, :]  # triangular variables, (times, n m)
    recon = float(np.linalg.norm(heat.lifted_modal([0.0])[0] @ Zj + heat.w([0.0])[0] * Z0 - w0)
                  / np.linalg.norm(w0))
    yNT = heat.lifted_modal([T])[0] @ Zj + heat.w([T])[0] * Z0
    stages.append(("transform", {"y0_reconstruction": recon,
                                 "transmuted_final": float(np.linalg.norm(yNT) / np.linalg.norm(w0))}))

    # back to the original variables: u = C P^{-1} ũ (P orthogonal)
    PinvU = np.einsum("ij,kjx->kix", P.T, ut.reshape(-1, n, m))
    u = np.einsum("ci,kix->kcx", C, PinvU).reshape(steps + 1, -1)
    t0 = time.perf_counter()
    yT = implicit_euler(Ah, Bh, y0.ravel(), u, dt)
    final = float(np.linalg.norm(yT) / np.linalg.norm(y0))
    cnorm = float(np.sqrt(grid.h * np.trapezoid(np.sum(u**2, axis=1), tt)))
    stages.append(("verify", {"final_relative": final, "control_norm": cnorm, "dt": dt,
                              "seconds": time.perf_counter() - t0}))
    stages.append(("total", {"seconds": time.perf_counter() - t_start}))
    coarse = np.linspace(0, steps, 11).astype(int)
    transmuted = heat.lifted_modal(tt[coarse]) @ Zj + heat.w(tt[coarse])[:, None] * Z0[None, :]
    rep = PipelineReport(stages, final, float(heat.moment_residuals.max()), recon,
                         float(np.linalg.norm(yNT) / np.linalg.norm(w0)), cnorm, S, S_star)
    return ParabolicControl(tt, u, yT, rep, transmuted)


# ---------------------------------------------------------------------------
# independent oracle: penalized minimal-norm control of the time-discrete system


def penalized_parabolic_control(D, A, B, grid: Grid1D, omega, T: float, y0,
                                dt: float | None = None, penalty: float = 1e-10):
    """Penalized HUM control for the implicit-Euler discretization itself.

    With E = (I - dt A_h)^{-1} and F = dt E B_h the scheme is
    y_{k+1} = E y_k + F u_{k+1}.  The gramian G = Σ_{j<K} E^j F F^T E^{jT}
    solves G - E G E^T = F F^T - E^K F F^T E^{KT}; the control is
    u_k = F^T E^{(K-k)T} λ with (G + penalty·λ_max I) λ = -E^K y0.
    Returns (t, u samples (K+1, channels), final relative norm).
    """
    D = np.asarray(getattr(D, "D", D), float)
    n, m = D.shape[0], grid.N - 1
    Ah = heat_operator(D, A, grid)
    Bh = control_operator(B, grid, omega)
    dt = grid.h**2 if dt is None else dt
    steps = int(round(T / dt))
    dt = T / steps
    E = linalg.solve(np.eye(n * m) - dt * Ah, np.eye(n * m))
    F = dt * (E @ Bh)
    EK = np.linalg.matrix_power(E, steps)
    FF = F @ F.T
    G = linalg.solve_discrete_lyapunov(E, FF - EK @ FF @ EK.T)
    G = 0.5 * (G + G.T)
    lam_max = linalg.eigvalsh(G)[-1]
    y0 = np.asarray(y0, float).ravel()
    lam = linalg.solve(G + penalty * lam_max * np.eye(n * m), -EK @ y0, assume_a="pos")
    u = np.zeros((steps + 1, Bh.shape[1]))
    q = lam.copy()  # E^{(K-k)T} λ for k = K down to 1
    for k in range(steps, 0, -1):
        u[k] = F.T @ q
        q = E.T @ q
    yT = implicit_euler(Ah, Bh, y0, u, dt)
    t = np.linspace(0.0, T, steps + 1)
    return t, u, float(np.linalg.norm(yT) / np.linalg.norm(y0))


def dump_kernel_csv(path, heat: HeatKernelControl, t, s) -> None:
    """Write k(t, s) with one row per time and one column per s sample."""
    k = heat.kernel(t, s)
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"{v:.10g}" for v in s) + "\n")
        for ti, row in zip(t, k):
            fh.write(f"{ti:.10g}," + ",".join(f"{v:.10g}" for v in row) + "\n")
