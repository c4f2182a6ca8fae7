"""Coupled 1D wave systems with interior control.

    y_tt = Δy + A(x) y + 1_ω B u   on (0, ℓ), Dirichlet ends,

with A in cascade form (a_ij = 0 for j < i-1, a_{i,i-1} ≠ 0 on ω).  The lab
builds n-control smooth compactly supported controls by least squares over a
B-spline ansatz, eliminates all but the first control by the algebraic
recursion on the cascade, and offers the constant-matrix route through the
Kalman (companion) change of variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .discretization import Grid1D, SemiDiscreteSystem, dirichlet_laplacian, interval_mask, sine_modes
from .lti_core import (
    ControlSignal,
    LtiSystem,
    NotControllable,
    cascade_transform,
    kalman_rank,
    numerical_rank,
)

DIVISION_MARGIN = 1e-6


class DivisionMarginError(ValueError):
    """A subdiagonal coupling entry is too small on ω to divide by."""


class AnsatzTooPoor(ValueError):
    """The ansatz cannot meet the final-state constraint."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class SynthesisFailed(RuntimeError):
    def __init__(self, message, fictitious_residual, final_residual):
        super().__init__(message)
        self.fictitious_residual = fictitious_residual
        self.final_residual = final_residual


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class CascadeCoupling:
    """Coupling entries a_ij sampled on the interior nodes: shape (n, n, N-1)."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 3 or a.shape[0] != a.shape[1]:
            raise ValueError("coupling entries must have shape (n, n, points)")
        if not np.all(np.isfinite(a)):
            raise ValueError("coupling entries must be finite")
        n = a.shape[0]
        for i in range(n):
            for j in range(i - 1):
                if np.any(a[i, j] != 0.0):
                    raise ValueError(f"cascade mask violated: a[{i + 1},{j + 1}] must vanish")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def constant(cls, grid: Grid1D, A) -> "CascadeCoupling":
        A = np.asarray(A, dtype=float)
        return cls(np.repeat(A[:, :, None], grid.N - 1, axis=2))

    @classmethod
    def from_functions(cls, grid: Grid1D, table) -> "CascadeCoupling":
        """``table[i][j]`` is None (zero) or a callable of x."""
        x = grid.interior_nodes
        n = len(table)
        a = np.zeros((n, n, x.size))
        for i in range(n):
            for j in range(n):
                if table[i][j] is not None:
                    a[i, j] = np.broadcast_to(table[i][j](x), x.shape)
        return cls(a)

    def check_subdiagonal(self, mask: np.ndarray, margin: float = DIVISION_MARGIN) -> None:
        """Raise DivisionMarginError if some |a_{i,i-1}| is small on the mask."""
        scale = max(np.abs(self.entries).max(), np.finfo(float).tiny)
        for i in range(1, self.n):
            low = np.abs(self.entries[i, i - 1][mask]).min() if mask.any() else 0.0
            if low <= margin * scale:
                raise DivisionMarginError(
                    f"|a[{i + 1},{i}]| = {low:.3e} on ω is below {margin:.0e} * max|a|")


@dataclass(frozen=True)
class WaveState:
    """Displacement and velocity, each of shape (n, N-1)."""

    y: np.ndarray
    ydot: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float, ndmin=2)
        v = np.array(self.ydot, dtype=float, ndmin=2)
        if y.shape != v.shape:
            raise ValueError("displacement and velocity shapes differ")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ydot", v)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.y.ravel(), self.ydot.ravel()])

    @classmethod
    def from_vector(cls, Y, n: int) -> "WaveState":
        Y = np.asarray(Y)
        half = Y.size // 2
        return cls(Y[:half].reshape(n, -1), Y[half:].reshape(n, -1))

    @classmethod
    def zeros(cls, n: int, grid: Grid1D) -> "WaveState":
        return cls(np.zeros((n, grid.N - 1)), np.zeros((n, grid.N - 1)))


def low_mode_state(grid: Grid1D, n: int, rng: np.random.Generator,
                   modes: int | None = None, decay: float = 4.0) -> WaveState:
    """Random state built from the first ``modes`` Dirichlet modes (default N/4),
    amplitudes decaying like k^{-decay}."""
    modes = modes or grid.N // 4
    Phi = sine_modes(grid, modes)
    k = np.arange(1, modes + 1)

    def draw():
        return np.stack([Phi @ (rng.standard_normal(modes) / k**decay) for _ in range(n)])

    return WaveState(draw(), draw())


# ---------------------------------------------------------------------------
# system assembly and time stepping


def gcc_time_1d(ell: float, omega: tuple[float, float]) -> float:
    """Sharp time for every reflected unit-speed ray to meet ω = (a, b)."""
    a, b = omega
    if not (0.0 <= a < b <= ell):
        raise ValueError(f"ω = {omega} is empty or not inside (0, {ell})")
    return 2.0 * max(a, ell - b)


def _check_omega(grid: Grid1D, omega) -> None:
    a, b = omega
    if not (0.0 < a < b < grid.L):
        raise ValueError(f"ω = {omega} must satisfy 0 < a < b < {grid.L}")


def build_wave_system(grid: Grid1D, coupling: CascadeCoupling, omega, channels: int) -> SemiDiscreteSystem:
    """First-order form Y = (y, y_t), M = [[0, I], [Δ_h ⊗ I_n + A(x), 0]].

    The state has 2 n (N-1) entries, ordered component by component.  The
    control of channel c is a grid function injected into the velocity of
    component c through the indicator of ω.
    """
    _check_omega(grid, omega)
    n = coupling.n
    if channels not in (1, n):
        raise ValueError(f"channels must be 1 or {n}")
    m = grid.N - 1
    mask = interval_mask(grid.interior_nodes, omega)
    if channels == 1:
        coupling.check_subdiagonal(mask)
    lap = dirichlet_laplacian(grid)
    K = np.kron(np.eye(n), lap)
    for i in range(n):
        for j in range(n):
            K[i * m:(i + 1) * m, j * m:(j + 1) * m] += np.diag(coupling.entries[i, j])
    Z = np.zeros((n * m, n * m))
    M = np.block([[Z, np.eye(n * m)], [K, Z]])
    B = np.zeros((2 * n * m, channels * m))
    for c in range(channels):
        B[n * m + c * m:n * m + (c + 1) * m, c * m:(c + 1) * m] = np.diag(mask.astype(float))
    return SemiDiscreteSystem(LtiSystem(M, B), grid, "wave", mask,
                              {"coupling": coupling, "omega": tuple(omega), "laplacian": lap,
                               "channels": channels})


class MidpointStepper:
    """Implicit midpoint rule Y+ = Φ Y + dt (I - dt/2 M)^{-1} R F(t_{k+1/2})."""

    def __init__(self, M: np.ndarray, dt: float):
        I = np.eye(M.shape[0])
        self.dt = dt
        self.lu = linalg.lu_factor(I - 0.5 * dt * M)
        self.Phi = linalg.lu_solve(self.lu, I + 0.5 * dt * M)

    def forcing(self, F):
        return self.dt * linalg.lu_solve(self.lu, F)

    def run(self, Y0, steps: int, forcing=None, record_every: int = 0):
        """Advance ``steps`` steps; ``forcing(k)`` gives the midpoint forcing of
        step k (full state vector) or None.  Returns final state and the
        recorded states (every ``record_every`` steps, including step 0)."""
        Y = np.asarray(Y0, dtype=float).copy()
        rec = [Y.copy()] if record_every else []
        for k in range(steps):
            Y = self.Phi @ Y
            if forcing is not None:
                F = forcing(k)
                if F is not None:
                    Y += self.forcing(F)
            if record_every and (k + 1) % record_every == 0:
                rec.append(Y.copy())
        return Y, rec


def wave_energy(grid: Grid1D, Y, n: int) -> float:
    """½ h Σ (|y_t|² + y·(-Δ_h) y) summed over components."""
    st = WaveState.from_vector(Y, n)
    lap = dirichlet_laplacian(grid)
    pot = sum(float(yc @ (-lap @ yc)) for yc in st.y)
    return 0.5 * grid.h * (float(np.sum(st.ydot**2)) + pot)


# ---------------------------------------------------------------------------
# smooth ansatz


class TimeBasis:
    """Uniform B-splines of a given degree whose supports tile (t_lo, t_hi)."""

    def __init__(self, t_lo: float, t_hi: float, count: int, degree: int):
        self.t_lo, self.t_hi, self.count, self.degree = t_lo, t_hi, count, degree
        self.knots = np.linspace(t_lo, t_hi, count + degree + 1)
        self.spacing = (t_hi - t_lo) / (count + degree)
        self._splines = [BSpline.basis_element(self.knots[p:p + degree + 2], extrapolate=False)
                         for p in range(count)]

    def values(self, t, order: int = 0) -> np.ndarray:
        """Matrix (len(t), count) of the order-th derivative."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((t.size, self.count))
        for p, sp in enumerate(self._splines):
            f = sp if order == 0 else sp.derivative(order)
            inside = (t >= self.knots[p]) & (t <= self.knots[p + self.degree + 1])
            if inside.any():
                out[inside, p] = np.nan_to_num(f(t[inside]))
        return out


def space_basis(grid: Grid1D, window: tuple[float, float], count: int, degree: int) -> np.ndarray:
    """Uniform B-splines inside ``window`` sampled on interior nodes: (N-1, count)."""
    a, b = window
    knots = np.linspace(a, b, count + degree + 1)
    x = grid.interior_nodes
    cols = []
    for s in range(count):
        sp = BSpline.basis_element(knots[s:s + degree + 2], extrapolate=False)
        cols.append(np.nan_to_num(sp(x)))
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class SmoothAnsatz:
    """Tensor B-spline ansatz for the fictitious controls.

    Time: ``n_time`` uniform splines of degree ``time_degree`` (default
    2n + 1, continuity 2n) tiling (δ, T - δ) with δ = ``margin_knots``
    knot spacings.  Space: ``n_space`` cubic-or-higher splines inside ω
    shrunk by n grid cells on each side, so the n - 1 applications of Δ_h
    in the reduction keep every field inside ω.  ``steps_per_knot`` fixes
    the integrator step dt = spacing / steps_per_knot.
    """

    n_time: int = 40
    n_space: int = 12
    time_degree: int | None = None
    space_degree: int = 3
    margin_knots: int = 0
    steps_per_knot: int = 320

    def degree_for(self, n: int) -> int:
        d = self.time_degree if self.time_degree is not None else 2 * n + 1
        if d < 2 * n - 1:
            raise ValueError(f"time degree {d} gives less than C^{2 * n - 2} continuity")
        return d

    def time_basis(self, T: float, n: int) -> TimeBasis:
        d = self.degree_for(n)
        spacing = T / (self.n_time + d + 2 * self.margin_knots)
        delta = self.margin_knots * spacing
        return TimeBasis(delta, T - delta, self.n_time, d)

    def space_window(self, grid: Grid1D, omega, n: int) -> tuple[float, float]:
        a, b = omega
        lo, hi = a + n * grid.h, b - n * grid.h
        if hi <= lo:
            raise ValueError("ω is too narrow for the ansatz at this mesh")
        return lo, hi

    def time_grid(self, T: float, n: int) -> tuple[int, float]:
        d = self.degree_for(n)
        steps = (self.n_time + d + 2 * self.margin_knots) * self.steps_per_knot
        return steps, T / steps


class SpaceTimeField:
    """g(t, x) = Σ_r Σ_p b_p^{(r)}(t) C_r[p, :] over a fixed TimeBasis.

    Time derivatives act analytically by shifting r; space operators act on
    the coefficient rows.
    """

    def __init__(self, basis: TimeBasis, coeffs: dict[int, np.ndarray]):
        self.basis = basis
        self.coeffs = {r: np.asarray(c, dtype=float) for r, c in coeffs.items()}

    @classmethod
    def zeros(cls, basis: TimeBasis, points: int) -> "SpaceTimeField":
        return cls(basis, {0: np.zeros((basis.count, points))})

    @property
    def points(self) -> int:
        return next(iter(self.coeffs.values())).shape[1]

    def dt2(self) -> "SpaceTimeField":
        return SpaceTimeField(self.basis, {r + 2: c for r, c in self.coeffs.items()})

    def apply(self, Mx: np.ndarray) -> "SpaceTimeField":
        return SpaceTimeField(self.basis, {r: c @ Mx.T for r, c in self.coeffs.items()})

    def times(self, w: np.ndarray) -> "SpaceTimeField":
        return SpaceTimeField(self.basis, {r: c * w[None, :] for r, c in self.coeffs.items()})

    def __add__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        out = {r: c.copy() for r, c in self.coeffs.items()}
        for r, c in other.coeffs.items():
            out[r] = out[r] + c if r in out else c.copy()
        return SpaceTimeField(self.basis, out)

    def __neg__(self) -> "SpaceTimeField":
        return SpaceTimeField(self.basis, {r: -c for r, c in self.coeffs.items()})

    def __sub__(self, other: "SpaceTimeField") -> "SpaceTimeField":
        return self + (-other)

    def __call__(self, t) -> np.ndarray:
        """Samples (len(t), points)."""
        t = np.atleast_1d(t)
        out = np.zeros((t.size, self.points))
        for r, c in self.coeffs.items():
            out += self.basis.values(t, r) @ c
        return out

    def max_order(self) -> int:
        return max(self.coeffs)

    def support_mask(self) -> np.ndarray:
        """Grid points where some coefficient is nonzero."""
        return np.any(np.stack([np.any(c != 0.0, axis=0) for c in self.coeffs.values()]), axis=0)


# ---------------------------------------------------------------------------
# n-control synthesis


@dataclass
class FictitiousControl:
    fields: list  # one SpaceTimeField per channel
    coefficients: np.ndarray  # (n, n_time, n_space)
    residual: float
    singular_values: np.ndarray
    steps: int
    dt: float

    def signal(self, t_grid) -> ControlSignal:
        vals = np.concatenate([f(t_grid).T for f in self.fields], axis=0)
        return ControlSignal(t_grid, vals)


def _relative(err, *refs) -> float:
    scale = max([np.linalg.norm(r) for r in refs] + [np.finfo(float).tiny])
    return float(np.linalg.norm(err) / scale)


def smooth_fictitious_control(sysd: SemiDiscreteSystem, T: float, y0: WaveState, y1: WaveState,
                              ansatz: SmoothAnsatz = SmoothAnsatz(), rcond: float = 1e-10,
                              fit_tol: float = 1e-6) -> FictitiousControl:
    """Minimal-coefficient n-channel control meeting the final state exactly.

    Each tensor basis function's final-state response is assembled by
    simulating the last time spline only and translating: uniform knots and
    an integer number of steps per knot make the discrete response of spline
    p equal Φ^{r (P-1-p)} times that of spline P-1.
    """
    grid = sysd.grid
    coupling: CascadeCoupling = sysd.physics["coupling"]
    n, m = coupling.n, grid.N - 1
    omega = sysd.physics["omega"]
    if sysd.physics["channels"] != n:
        raise ValueError("smooth_fictitious_control needs the n-channel system")
    tb = ansatz.time_basis(T, n)
    Sx = space_basis(grid, ansatz.space_window(grid, omega, n), ansatz.n_space, ansatz.space_degree)
    S = Sx.shape[1]
    steps, dt = ansatz.time_grid(T, n)
    r = ansatz.steps_per_knot
    M = sysd.lti.A
    stepper = MidpointStepper(M, dt)
    dim = M.shape[0]

    Y0, Y1 = y0.vector(), y1.vector()
    free, _ = stepper.run(Y0, steps)
    d = Y1 - free
    coef_shape = (n, tb.count, S)
    if not np.any(d):
        zero = np.zeros(coef_shape)
        return FictitiousControl(_fields(tb, Sx, zero), zero, 0.0, np.zeros(0), steps, dt)

    # response of the last time spline, all (channel, space) pairs at once
    R = np.zeros((dim, n * S))
    for c in range(n):
        R[n * m + c * m:n * m + (c + 1) * m, c * S:(c + 1) * S] = Sx
    start = steps - (tb.degree + 1 + ansatz.margin_knots) * r
    t_mid = (np.arange(start, steps) + 0.5) * dt
    b_last = tb.values(t_mid)[:, -1]
    forced = stepper.forcing(R)
    X = np.zeros((dim, n * S))
    for k in range(steps - start):
        X = stepper.Phi @ X + b_last[k] * forced
    shift = np.linalg.matrix_power(stepper.Phi, r)
    cols = np.empty((tb.count, dim, n * S))
    cols[-1] = X
    for p in range(tb.count - 2, -1, -1):
        cols[p] = shift @ cols[p + 1]
    # column order (channel, time, space)
    Mmat = cols.reshape(tb.count, dim, n, S).transpose(1, 2, 0, 3).reshape(dim, -1)

    U, s, Vt = linalg.svd(Mmat, full_matrices=False)
    keep = s > rcond * s[0]
    c = Vt[keep].T @ ((U[:, keep].T @ d) / s[keep])
    residual = _relative(Mmat @ c - d, Y1, Y0)
    if residual > fit_tol:
        raise AnsatzTooPoor(f"fictitious control residual {residual:.2e} exceeds {fit_tol:.0e}", residual)
    coeffs = c.reshape(coef_shape)
    return FictitiousControl(_fields(tb, Sx, coeffs), coeffs, residual, s, steps, dt)


def _fields(tb: TimeBasis, Sx: np.ndarray, coeffs: np.ndarray) -> list:
    return [SpaceTimeField(tb, {0: coeffs[c] @ Sx.T}) for c in range(coeffs.shape[0])]


# ---------------------------------------------------------------------------
# algebraic reduction


@dataclass
class Reduction:
    ybar: list  # SpaceTimeField per component
    ubar: SpaceTimeField
    residual: float  # relative to the largest term of the identity
    source_residual: float  # relative to max |f|


def algebraic_reduce(f: list, coupling: CascadeCoupling, grid: Grid1D, omega,
                     sample_times=None) -> Reduction:
    """Solve ȳ_tt = Δ_h ȳ + A ȳ + e_1 ū + f with ȳ, ū built from f.

    The recursion is ȳ_n = 0, ȳ_{n-1} = -f_n / a_{n,n-1} and

        ȳ_i = (∂_tt ȳ_{i+1} - Δ_h ȳ_{i+1} - Σ_{j>=i+1} a_{i+1,j} ȳ_j - f_{i+1}) / a_{i+1,i},
        ū   = ∂_tt ȳ_1 - Δ_h ȳ_1 - Σ_j a_{1j} ȳ_j - f_1.

    Division by a_{i+1,i} happens on ω only; outside ω the numerators vanish
    when f is supported far enough inside ω.  The residual is measured on
    ``sample_times`` (default 401 points of the time basis window), see
    :func:`reduction_residual` for the two normalizations.
    """
    n = coupling.n
    if len(f) != n:
        raise ValueError(f"source has {len(f)} components, coupling has {n}")
    lap = dirichlet_laplacian(grid)
    mask = interval_mask(grid.interior_nodes, omega)
    coupling.check_subdiagonal(mask)
    a = coupling.entries
    basis = f[0].basis
    m = grid.N - 1

    def inv_on_omega(vals):
        out = np.zeros_like(vals)
        out[mask] = 1.0 / vals[mask]
        return out

    ybar = [None] * n
    ybar[n - 1] = SpaceTimeField.zeros(basis, m)
    if n >= 2:
        ybar[n - 2] = (-f[n - 1]).times(inv_on_omega(a[n - 1, n - 2]))
    for i in range(n - 3, -1, -1):
        k = i + 1  # equation index (0-based) providing ȳ_i
        num = ybar[k].dt2() - ybar[k].apply(lap) - f[k]
        for j in range(k, n):
            num = num - ybar[j].times(a[k, j])
        ybar[i] = num.times(inv_on_omega(a[k, i]))
    ubar = ybar[0].dt2() - ybar[0].apply(lap) - f[0]
    for j in range(n):
        ubar = ubar - ybar[j].times(a[0, j])

    if sample_times is None:
        sample_times = np.linspace(basis.t_lo, basis.t_hi, 401)
    residual = reduction_residual(ybar, ubar, f, coupling, grid, sample_times)
    source = reduction_residual(ybar, ubar, f, coupling, grid, sample_times, scale="source")
    return Reduction(ybar, ubar, residual, source)


def reduction_residual(ybar, ubar, f, coupling, grid, t, scale: str = "terms") -> float:
    """Residual of ∂_tt ȳ - Δ_h ȳ - A ȳ - e_1 ū - f, maximized over t.

    With ``scale`` = "terms" it is divided by the largest magnitude of any
    single term (∂_tt ȳ_i, Δ_h ȳ_i, (A ȳ)_i, ū, f_i), the backward-error
    normalization of an identity between large terms.  With "source" it is
    divided by max |f|; for n >= 3 the terms exceed |f| by many orders of
    magnitude, so this version is floored by round-off well above 1e-11.
    """
    lap = dirichlet_laplacian(grid)
    a = coupling.entries
    n = coupling.n
    Y = [yb(t) for yb in ybar]
    Ytt = [yb.dt2()(t) for yb in ybar]
    F = [fi(t) for fi in f]
    U = ubar(t)
    worst, big = 0.0, 0.0
    for i in range(n):
        lap_y = Y[i] @ lap.T
        coup = sum(Y[j] * a[i, j][None, :] for j in range(n))
        r = Ytt[i] - lap_y - coup - F[i]
        terms = [Ytt[i], lap_y, coup, F[i]]
        if i == 0:
            r = r - U
            terms.append(U)
        worst = max(worst, float(np.abs(r).max()))
        big = max([big] + [float(np.abs(x).max()) for x in terms])
    if scale == "source":
        big = max(float(np.abs(Fi).max()) for Fi in F)
    elif scale != "terms":
        raise ValueError(f"unknown scale {scale!r}")
    return worst / max(big, np.finfo(float).tiny)


# ---------------------------------------------------------------------------
# one-control pipeline


@dataclass
class OneControlResult:
    control: ControlSignal
    ubar: SpaceTimeField
    fictitious_residual: float
    reduction_residual: float
    final_residual: float
    decomposition_error: float
    control_norm: float
    final_state: np.ndarray
    trajectory: np.ndarray  # recorded states of the one-control run
    record_times: np.ndarray


def _field_forcing(fields, rows, dim, dt, steps):
    """Midpoint forcing closure for a stepper from per-channel fields."""
    t_mid = (np.arange(steps) + 0.5) * dt
    samples = [fld(t_mid) for fld in fields]

    def build(k):
        F = np.zeros(dim)
        for smp, sl in zip(samples, rows):
            F[sl] += smp[k]
        return F
    return build


def one_control_synthesis(sysd: SemiDiscreteSystem, T: float, y0: WaveState, y1: WaveState,
                          ansatz: SmoothAnsatz = SmoothAnsatz(), tol: float = 1e-3,
                          records: int = 10, raise_on_failure: bool = False) -> OneControlResult:
    """Steer (y0, ẏ0) to (y1, ẏ1) with the single control u_1 = ū on ω.

    Steps: n-channel smooth control û; reduction with f = -û; simulation of
    the one-control system with ū; check that y = ŷ + ȳ along the way.
    """
    grid = sysd.grid
    coupling: CascadeCoupling = sysd.physics["coupling"]
    omega = sysd.physics["omega"]
    n, m = coupling.n, grid.N - 1
    full = build_wave_system(grid, coupling, omega, n)
    single = build_wave_system(grid, coupling, omega, 1)
    T_star = gcc_time_1d(grid.L, omega)
    if T <= T_star:
        raise ValueError(f"T = {T} does not exceed the GCC time {T_star}")
    fict = smooth_fictitious_control(full, T, y0, y1, ansatz)
    red = algebraic_reduce([-fl for fl in fict.fields], coupling, grid, omega)
    dim = 2 * n * m
    vel = [slice(n * m + c * m, n * m + (c + 1) * m) for c in range(n)]
    mask = interval_mask(grid.interior_nodes, omega)
    if np.any(red.ubar.support_mask() & ~mask):
        raise DivisionMarginError("reduced control leaks outside ω")

    steps, dt = fict.steps, fict.dt
    every = max(steps // records, 1)
    stepper = MidpointStepper(single.lti.A, dt)
    Yend, rec = stepper.run(y0.vector(), steps, _field_forcing([red.ubar], vel[:1], dim, dt, steps), every)
    hat_end, hat_rec = stepper.run(y0.vector(), steps, _field_forcing(fict.fields, vel, dim, dt, steps), every)
    times = np.arange(len(rec)) * every * dt
    # y = ŷ + ȳ at the recorded times
    dec = 0.0
    for Yk, Hk, tk in zip(rec, hat_rec, times):
        ybar_pos = np.concatenate([yb(tk)[0] for yb in red.ybar])
        ybar_vel = np.concatenate([_dt1(yb, tk) for yb in red.ybar])
        dec = max(dec, _relative(Yk - Hk - np.concatenate([ybar_pos, ybar_vel]), y0.vector(), y1.vector()))
    final = _relative(Yend - y1.vector(), y1.vector(), y0.vector())
    t_nodes = np.linspace(0.0, T, steps + 1)
    ctrl = ControlSignal(t_nodes, red.ubar(t_nodes).T)
    norm = float(np.sqrt(grid.h) * ctrl.l2_norm())
    out = OneControlResult(ctrl, red.ubar, fict.residual, red.residual, final, dec, norm, Yend,
                           np.array(rec), times)
    if raise_on_failure and final > tol:
        raise SynthesisFailed(f"final residual {final:.2e} above {tol:.0e}", fict.residual, final)
    return out


def _dt1(field: SpaceTimeField, t) -> np.ndarray:
    """First time derivative of a field at a single time."""
    out = np.zeros(field.points)
    for r, c in field.coeffs.items():
        out += (field.basis.values([t], r + 1) @ c)[0]
    return out


# ---------------------------------------------------------------------------
# constant-coefficient route


@dataclass
class ConstantRouteResult:
    K: np.ndarray
    A_tilde: np.ndarray
    B_tilde: np.ndarray
    channel: int | None
    result: OneControlResult
    final_state: WaveState  # in the original variables
    final_residual: float


def constant_matrix_route(A, B, grid: Grid1D, omega, T: float, y0: WaveState, y1: WaveState,
                          ansatz: SmoothAnsatz = SmoothAnsatz()) -> ConstantRouteResult:
    """One-control synthesis for y_tt = Δy + A y + 1_ω B u with constant A, B.

    With z = K^{-1} y the system becomes the cascade z_tt = Δz + Ã z + 1_ω B̃ u
    with B̃ = e_1.  When B has several columns, the first column that alone
    satisfies the Kalman condition is used and the other inputs are set to
    zero.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    if kalman_rank(LtiSystem(A, B)) < A.shape[0]:
        raise NotControllable("Kalman rank condition fails for (A, B)")
    channel = next((j for j in range(B.shape[1])
                    if kalman_rank(LtiSystem(A, B[:, j:j + 1])) == A.shape[0]), None)
    if channel is None:
        raise NotControllable("no single input column satisfies the Kalman condition; "
                              "the block-cascade reduction is not available")
    K, At, Bt = cascade_transform(LtiSystem(A, B[:, channel:channel + 1]))
    n = A.shape[0]
    coupling = CascadeCoupling.constant(grid, np.where(np.abs(At) < 1e-13 * max(1.0, np.abs(At).max()), 0.0, At))
    sysd = build_wave_system(grid, coupling, omega, 1)
    Kinv = np.linalg.inv(K)
    z0 = WaveState(Kinv @ y0.y, Kinv @ y0.ydot)
    z1 = WaveState(Kinv @ y1.y, Kinv @ y1.ydot)
    res = one_control_synthesis(sysd, T, z0, z1, ansatz)
    zT = WaveState.from_vector(res.final_state, n)
    yT = WaveState(K @ zT.y, K @ zT.ydot)
    final = _relative(yT.vector() - y1.vector(), y1.vector(), y0.vector())
    return ConstantRouteResult(K, At, Bt, channel, res, yT, final)


# ---------------------------------------------------------------------------
# coupling file format: header "coupling n N [ell]" then n*n rows of N-1 samples


def format_coupling(coupling: CascadeCoupling, grid: Grid1D) -> str:
    lines = [f"coupling {coupling.n} {grid.N} {grid.L:.16e}"]
    for i in range(coupling.n):
        for j in range(coupling.n):
            lines.append(" ".join(f"{v:.16e}" for v in coupling.entries[i, j]))
    return "\n".join(lines) + "\n"


def parse_coupling(text: str) -> tuple[CascadeCoupling, Grid1D]:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][0] != "coupling" or len(rows[0]) not in (3, 4):
        raise ValueError("coupling file must start with 'coupling n N [ell]'")
    n, N = int(rows[0][1]), int(rows[0][2])
    ell = float(rows[0][3]) if len(rows[0]) == 4 else 1.0
    grid = Grid1D(ell, N)
    body = rows[1:]
    if len(body) != n * n or any(len(r) != N - 1 for r in body):
        raise ValueError(f"expected {n * n} rows of {N - 1} samples")
    a = np.array([[float(v) for v in r] for r in body]).reshape(n, n, N - 1)
    return CascadeCoupling(a), grid


def read_coupling(path) -> tuple[CascadeCoupling, Grid1D]:
    return parse_coupling(Path(path).read_text())


def write_coupling(path, coupling: CascadeCoupling, grid: Grid1D) -> None:
    Path(path).write_text(format_coupling(coupling, grid))
