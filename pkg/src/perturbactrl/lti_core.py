"""Finite-dimensional controllability engine.

Every semi-discretized PDE in the labs is reduced to a pair (A, B) and driven
through the functions below: Kalman rank, the Hautus/Fattorini eigenvector
test, the controllability gramian, minimal-norm (HUM) control synthesis and a
simulator for the controlled system y' = Ay + Bu.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg


class NotControllable(ValueError):
    """The pair (A, B) fails the Kalman rank condition."""


class NotControllableAtTolerance(ValueError):
    """The gramian is numerically singular; carries its spectrum."""

    def __init__(self, message, eigenvalues):
        super().__init__(message)
        self.eigenvalues = np.asarray(eigenvalues)


class GramianOverflow(FloatingPointError):
    """e^{tA} overflowed while assembling the gramian."""


@dataclass(frozen=True)
class LtiSystem:
    """Linear time-invariant pair: y' = A y + B u."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float, ndmin=2)
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, A has {A.shape[0]}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("A and B must be finite")
        A.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def similar(self, P: np.ndarray) -> "LtiSystem":
        """The system in coordinates z = P y."""
        Pinv = np.linalg.inv(P)
        return LtiSystem(P @ self.A @ Pinv, P @ self.B)


@dataclass(frozen=True)
class ControlSignal:
    """Time-sampled control: ``values[c, k]`` is channel c at ``t_grid[k]``."""

    t_grid: np.ndarray
    values: np.ndarray
    support_window: tuple[float, float] | None = None

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        v = np.array(self.values, dtype=float, ndmin=2)
        if v.shape[1] != t.size:
            raise ValueError(f"values has {v.shape[1]} samples, t_grid has {t.size}")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("t_grid must be strictly increasing")
        if self.support_window is not None:
            lo, hi = self.support_window
            outside = (t < lo) | (t > hi)
            if np.any(v[:, outside] != 0.0):
                raise ValueError("control is nonzero outside its support window")
        object.__setattr__(self, "t_grid", t)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def l2_norm(self) -> float:
        """L² norm in time of the Euclidean channel norm (trapezoid rule)."""
        sq = np.sum(self.values**2, axis=0)
        return float(np.sqrt(np.trapezoid(sq, self.t_grid)))

    @classmethod
    def zeros(cls, channels: int, t_grid) -> "ControlSignal":
        t_grid = np.asarray(t_grid, dtype=float)
        return cls(t_grid, np.zeros((channels, t_grid.size)))


@dataclass(frozen=True)
class GramianReport:
    T: float
    eigenvalues: np.ndarray
    control_norm: float = 0.0
    final_residual: float = 0.0
    penalty: float = 0.0

    @property
    def observability_constant(self) -> float:
        return float(self.eigenvalues[-1])

    @property
    def condition(self) -> float:
        lo = self.eigenvalues[-1]
        return float(self.eigenvalues[0] / lo) if lo > 0 else np.inf


@dataclass(frozen=True)
class FattoriniVerdict:
    """Outcome of the Hautus/Fattorini scan.

    ``tag`` is one of "Holds", "FailsAt", "Inconclusive".  ``margin`` is the
    smallest sigma_min of [lambda I - A*; B*] over the scanned eigenvalues.
    """

    tag: str
    margin: float
    witness: tuple[complex, np.ndarray] | None = None
    margins: list = field(default_factory=list)
    diagnostic: str = ""

    @property
    def holds(self) -> bool:
        return self.tag == "Holds"


# ---------------------------------------------------------------------------
# rank tests


def kalman_matrix(sys: LtiSystem) -> np.ndarray:
    """The block matrix (B | AB | ... | A^{n-1} B)."""
    blocks = [sys.B]
    for _ in range(sys.n - 1):
        blocks.append(sys.A @ blocks[-1])
    return np.hstack(blocks)


def numerical_rank(M: np.ndarray, tol: float = 1e-8) -> int:
    """Number of singular values above ``tol * sigma_max``."""
    s = linalg.svdvals(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def kalman_rank(sys: LtiSystem, tol: float = 1e-8) -> int:
    return numerical_rank(kalman_matrix(sys), tol)


def fattorini_test(sys: LtiSystem, tol: float = 1e-8, relative: bool = True) -> FattoriniVerdict:
    """Hautus test: ker(lambda - A*) ∩ ker B* = {0} at every eigenvalue of A*.

    Only eigenvalues of A* need scanning, since lambda - A* is injective
    elsewhere.  With ``relative`` the threshold is ``tol`` times the scale
    max(1, ||[A; B*]||); otherwise ``tol`` is absolute.
    """
    A_star = sys.A.conj().T
    B_star = sys.B.conj().T
    n = sys.n
    scale = 1.0
    if relative:
        scale = max(1.0, float(np.linalg.norm(np.vstack([sys.A, sys.B.T]), 2)))
    try:
        lams = linalg.eigvals(A_star)
    except (linalg.LinAlgError, ValueError) as exc:
        return FattoriniVerdict("Inconclusive", np.nan, diagnostic=str(exc))
    if not np.all(np.isfinite(lams)):
        return FattoriniVerdict("Inconclusive", np.nan, diagnostic="non-finite eigenvalues")

    margins = []
    worst = (np.inf, None, None)
    for lam in lams:
        M = np.vstack([lam * np.eye(n) - A_star, B_star.astype(complex)])
        _, s, Vh = linalg.svd(M)
        sigma = float(s[-1])
        margins.append((complex(lam), sigma))
        if sigma < worst[0]:
            worst = (sigma, complex(lam), Vh[-1].conj())
    sigma, lam, phi = worst
    if sigma <= tol * scale:
        phi = phi / np.linalg.norm(phi)
        return FattoriniVerdict("FailsAt", sigma, witness=(lam, phi), margins=margins)
    return FattoriniVerdict("Holds", sigma, margins=margins)


# ---------------------------------------------------------------------------
# gramian and HUM


def simpson_weights(n_intervals: int, dt: float) -> np.ndarray:
    if n_intervals < 2 or n_intervals % 2:
        raise ValueError("composite Simpson needs an even number of intervals >= 2")
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * dt / 3.0


def _even(n_quad: int) -> int:
    n_quad = max(int(n_quad), 2)
    return n_quad + (n_quad % 2)


def _propagated_inputs(sys: LtiSystem, T: float, n_quad: int):
    """X_j = e^{t_j A} B at t_j = j T / n_quad, j = 0..n_quad."""
    dt = T / n_quad
    E = linalg.expm(dt * sys.A)
    X = np.empty((n_quad + 1, sys.n, sys.m))
    X[0] = sys.B
    with np.errstate(over="raise", invalid="raise"):
        try:
            for j in range(n_quad):
                X[j + 1] = E @ X[j]
        except FloatingPointError as exc:
            raise GramianOverflow(
                "e^{tA} overflowed; rescale time (shorter T or smaller ||A||)"
            ) from exc
    if not np.all(np.isfinite(X)):
        raise GramianOverflow("e^{tA} overflowed; rescale time (shorter T or smaller ||A||)")
    return X, E


def controllability_gramian(sys: LtiSystem, T: float, n_quad: int = 200,
                            return_asymmetry: bool = False):
    """G_T = ∫_0^T e^{tA} B B* e^{tA*} dt by composite Simpson.

    Returned symmetrized.  With ``return_asymmetry`` the relative asymmetry of
    the raw sum is also returned.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    n_quad = _even(n_quad)
    X, _ = _propagated_inputs(sys, T, n_quad)
    w = simpson_weights(n_quad, T / n_quad)
    G = np.einsum("j,jik,jlk->il", w, X, X)
    asym = np.linalg.norm(G - G.T) / max(np.linalg.norm(G), np.finfo(float).tiny)
    G = 0.5 * (G + G.T)
    if return_asymmetry:
        return G, float(asym)
    return G


def gramian_spectrum(G: np.ndarray) -> np.ndarray:
    """Eigenvalues in nonincreasing order."""
    return linalg.eigh(G, eigvals_only=True)[::-1]


def observability_constant(sys: LtiSystem, T: float, n_quad: int = 200) -> float:
    """Smallest eigenvalue of G_T (the inverse of the observability constant C)."""
    return float(gramian_spectrum(controllability_gramian(sys, T, n_quad))[-1])


def min_norm_control(sys: LtiSystem, T: float, y0, y1, n_quad: int = 200,
                     tol: float = 1e-12, penalty: float = 0.0):
    """HUM control u(t) = B* e^{(T-t)A*} G_T^{-1} (y1 - e^{TA} y0).

    ``penalty`` > 0 replaces G_T^{-1} by (G_T + penalty·λ_max I)^{-1}, the
    penalized HUM used when G_T is numerically singular.  With ``penalty`` = 0
    a gramian whose smallest eigenvalue is below ``tol·λ_max`` raises
    NotControllableAtTolerance.

    The control is sampled on the quadrature grid and the report carries the
    final residual measured by re-simulation with :func:`simulate_lti`.
    """
    n_quad = _even(n_quad)
    y0 = np.asarray(y0, dtype=float).ravel()
    y1 = np.asarray(y1, dtype=float).ravel()
    X, E = _propagated_inputs(sys, T, n_quad)
    w = simpson_weights(n_quad, T / n_quad)
    G = np.einsum("j,jik,jlk->il", w, X, X)
    G = 0.5 * (G + G.T)
    ev = gramian_spectrum(G)
    lam_max = max(ev[0], 0.0)
    if penalty == 0.0 and (lam_max == 0.0 or ev[-1] <= tol * lam_max):
        raise NotControllableAtTolerance(
            f"gramian smallest eigenvalue {ev[-1]:.3e} <= {tol:.1e} * {lam_max:.3e}", ev)

    ET = np.linalg.matrix_power(E, n_quad)
    d = y1 - ET @ y0
    t_grid = np.linspace(0.0, T, n_quad + 1)
    if not np.any(d):
        u = ControlSignal.zeros(sys.m, t_grid)
        return u, GramianReport(T, ev, 0.0, 0.0, penalty)
    Gp = G + penalty * lam_max * np.eye(sys.n)
    lam = linalg.solve(Gp, d, assume_a="pos")
    # u(t_j) = B* e^{(T - t_j) A*} lam = X_{n_quad - j}^T lam
    values = np.einsum("jik,i->kj", X[::-1], lam)
    u = ControlSignal(t_grid, values)
    traj = simulate_lti(sys, u, y0, T)
    scale = max(np.linalg.norm(y1), np.linalg.norm(y0), np.finfo(float).tiny)
    residual = float(np.linalg.norm(traj[-1] - y1) / scale)
    return u, GramianReport(T, ev, u.l2_norm(), residual, penalty)


# ---------------------------------------------------------------------------
# simulation


def simulate_lti(sys: LtiSystem, u: ControlSignal, y0, T: float | None = None) -> np.ndarray:
    """Trajectory of y' = Ay + Bu on ``u.t_grid``; returns (samples, n).

    Each step is exact for the free part (matrix exponential) and integrates
    the Duhamel term with the fourth-order weights 1/6, 4/6, 1/6.  On a
    uniform grid with an even number of intervals the steps span interval
    pairs, so the middle weight falls on a true control sample; otherwise the
    midpoint control is the average of its neighbours.
    """
    if u.channels != sys.m:
        raise ValueError(f"control has {u.channels} channels, system expects {sys.m}")
    t = u.t_grid
    if T is not None and (t[0] > 1e-12 * max(1.0, T) or t[-1] < T * (1 - 1e-12)):
        raise ValueError("control grid does not cover [0, T]")
    y = np.asarray(y0, dtype=float).ravel().copy()
    out = np.empty((t.size, sys.n))
    out[0] = y
    steps = np.diff(t)
    if steps.size == 0:
        return out
    V = sys.B @ u.values  # forcing samples, n x samples
    uniform = np.allclose(steps, steps[0], rtol=1e-10)
    if uniform:
        dt = steps[0]
        Eh = linalg.expm(0.5 * dt * sys.A)
        E1 = Eh @ Eh
        if not np.any(V):
            for k in range(steps.size):
                out[k + 1] = E1 @ out[k]
            return out
        E2 = E1 @ E1
        paired = steps.size - steps.size % 2
        for k in range(0, paired, 2):
            out[k + 1] = _one_step(E1, Eh, dt, out[k], V[:, k], V[:, k + 1])
            out[k + 2] = E2 @ out[k] + (dt / 3.0) * (E2 @ V[:, k] + 4.0 * (E1 @ V[:, k + 1]) + V[:, k + 2])
        if paired < steps.size:
            k = paired
            out[k + 1] = _one_step(E1, Eh, dt, out[k], V[:, k], V[:, k + 1])
        return out
    for k, dt in enumerate(steps):
        Eh = linalg.expm(0.5 * dt * sys.A)
        out[k + 1] = _one_step(Eh @ Eh, Eh, dt, out[k], V[:, k], V[:, k + 1])
    return out


def _one_step(E1, Eh, dt, y, v0, v1):
    vm = 0.5 * (v0 + v1)
    return E1 @ y + (dt / 6.0) * (E1 @ v0 + 4.0 * (Eh @ vm) + v1)


# ---------------------------------------------------------------------------
# cascade (companion) form


def cascade_transform(sys: LtiSystem, tol: float = 1e-8):
    """Change of basis K bringing (A, B) to cascade form.

    Returns (K, A_tilde, B_tilde) with A_tilde = K^{-1} A K and
    B_tilde = K^{-1} B.  For a single input K = (B | AB | ... | A^{n-1} B),
    A_tilde has ones on the subdiagonal and the characteristic coefficients
    in its last column, and B_tilde = e_1.  For several inputs the columns of
    the Kalman matrix are scanned left to right, each kept when it raises the
    rank; the kept columns are then grouped by input channel, giving a
    block-cascade A_tilde.
    """
    n, m = sys.n, sys.m
    if kalman_rank(sys, tol) < n:
        raise NotControllable("Kalman rank deficient: no cascade basis exists")
    Kal = kalman_matrix(sys)
    chosen = []  # (channel, power)
    basis = np.zeros((n, 0))
    for col in range(Kal.shape[1]):
        power, channel = divmod(col, m)
        trial = np.hstack([basis, Kal[:, col:col + 1]])
        if numerical_rank(trial, tol) > basis.shape[1]:
            basis = trial
            chosen.append((channel, power))
        if basis.shape[1] == n:
            break
    order = sorted(range(n), key=lambda i: chosen[i])
    K = basis[:, order]
    At = linalg.solve(K, sys.A @ K)
    Bt = linalg.solve(K, sys.B)
    return K, At, Bt


# ---------------------------------------------------------------------------
# plain-text matrix format


def format_matrix(M) -> str:
    M = np.array(M, dtype=float, ndmin=2)
    lines = [f"{M.shape[0]} {M.shape[1]}"]
    lines += [" ".join(f"{v:.16e}" for v in row) for row in M]
    return "\n".join(lines) + "\n"


def write_matrix(path, M) -> None:
    Path(path).write_text(format_matrix(M))


def parse_matrices(text: str) -> list[np.ndarray]:
    """Parse one or more consecutive matrices from the plain-text format."""
    rows = [ln.split() for ln in io.StringIO(text) if ln.strip() and not ln.lstrip().startswith("#")]
    out = []
    i = 0
    while i < len(rows):
        header = rows[i]
        if len(header) != 2:
            raise ValueError(f"expected 'rows cols' header, got {' '.join(header)!r}")
        r, c = int(header[0]), int(header[1])
        block = rows[i + 1:i + 1 + r]
        if len(block) != r or any(len(row) != c for row in block):
            raise ValueError(f"matrix block does not match header {r} x {c}")
        M = np.array([[float(v) for v in row] for row in block], dtype=float).reshape(r, c)
        if not np.all(np.isfinite(M)):
            raise ValueError("matrix entries must be finite")
        out.append(M)
        i += 1 + r
    return out


def read_matrix(path) -> np.ndarray:
    mats = parse_matrices(Path(path).read_text())
    if len(mats) != 1:
        raise ValueError(f"expected one matrix, found {len(mats)}")
    return mats[0]


def read_system(path) -> LtiSystem:
    """A system file holds A followed by B in the matrix format."""
    mats = parse_matrices(Path(path).read_text())
    if len(mats) != 2:
        raise ValueError(f"system file needs two matrices (A then B), found {len(mats)}")
    return LtiSystem(*mats)
