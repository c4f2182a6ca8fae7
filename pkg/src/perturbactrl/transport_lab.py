"""Transport equation with an integral kernel and boundary control.

    y_t - y_x = ∫_0^L k(x, ξ) y(t, ξ) dξ  on (0, L),   y(t, L) = u(t).

Information travels toward x = 0, so the control enters through the inflow
end x = L.  The semi-discretization is first-order upwind on N cells, with
the kernel applied by the midpoint rule on cell centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre
from scipy import integrate, linalg

from .discretization import Grid1D, SemiDiscreteSystem
from .lti_core import (
    ControlSignal,
    FattoriniVerdict,
    GramianReport,
    LtiSystem,
    controllability_gramian,
    fattorini_test,
    gramian_spectrum,
    min_norm_control,
    simulate_lti,
)

ZERO, FIRST, FULL = "zero", "first", "full"

# Penalty (relative to λ_max) used by the transport HUM: the discrete upwind
# gramian is singular to round-off in its high modes, so plain inversion is
# meaningless there.
DEFAULT_PENALTY = 1e-10
CFL = 0.9


@dataclass(frozen=True)
class KernelSpec:
    """Grid samples of k: none, k(x_i) only, or k(x_i, ξ_j)."""

    variant: str
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in (ZERO, FIRST, FULL):
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if self.variant == ZERO:
            object.__setattr__(self, "samples", None)
            return
        s = np.array(self.samples, dtype=float)
        want = 1 if self.variant == FIRST else 2
        if s.ndim != want or (want == 2 and s.shape[0] != s.shape[1]):
            raise ValueError(f"{self.variant} kernel needs a {'vector' if want == 1 else 'square matrix'}")
        if not np.all(np.isfinite(s)):
            raise ValueError("kernel samples must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def size(self) -> int | None:
        return None if self.samples is None else self.samples.shape[0]

    def matrix(self, N: int) -> np.ndarray:
        """Samples k(x_i, ξ_j) as an N x N array."""
        if self.variant == ZERO:
            return np.zeros((N, N))
        if self.size != N:
            raise ValueError(f"kernel has {self.size} samples, grid has {N} cells")
        if self.variant == FIRST:
            return np.repeat(self.samples[:, None], N, axis=1)
        return np.asarray(self.samples)

    @classmethod
    def zero(cls) -> "KernelSpec":
        return cls(ZERO)

    @classmethod
    def first_variable(cls, grid: Grid1D, fn) -> "KernelSpec":
        return cls(FIRST, fn(grid.centers))

    @classmethod
    def full(cls, grid: Grid1D, fn) -> "KernelSpec":
        x = grid.centers
        return cls(FULL, fn(x[:, None], x[None, :]))


def build_transport_system(grid: Grid1D, kernel: KernelSpec) -> SemiDiscreteSystem:
    """Upwind system in nodal values y_i ≈ y(x_i).

    A0 = (-I + superdiagonal) / h, K = h k(x_i, ξ_j), B = e_N / h.  The split
    (A0, K) is kept in ``physics``.
    """
    N, h = grid.N, grid.h
    A0 = (-np.eye(N) + np.eye(N, k=1)) / h
    K = h * kernel.matrix(N)
    B = np.zeros((N, 1))
    B[-1, 0] = 1.0 / h
    lti = LtiSystem(A0 + K, B)
    return SemiDiscreteSystem(lti, grid, "transport", "boundary",
                              {"kernel": kernel, "A0": A0, "K": K})


def l2_coordinates(sysd: SemiDiscreteSystem) -> LtiSystem:
    """The same system in z = √h y, where Euclidean norms are L² norms."""
    return LtiSystem(sysd.lti.A, np.sqrt(sysd.grid.h) * sysd.lti.B)


def unperturbed(sysd: SemiDiscreteSystem) -> SemiDiscreteSystem:
    """The kernel-free system sharing B (the A0 part of the split)."""
    return SemiDiscreteSystem(LtiSystem(sysd.physics["A0"], sysd.lti.B), sysd.grid,
                              "transport", "boundary",
                              {"kernel": KernelSpec.zero(), "A0": sysd.physics["A0"],
                               "K": np.zeros_like(sysd.physics["K"])})


def cfl_steps(grid: Grid1D, T: float, cfl: float = CFL) -> int:
    """Even number of uniform steps on (0, T) with dt <= cfl h."""
    n = int(np.ceil(T / (cfl * grid.h)))
    return n + (n % 2)


def simulate_transport(sysd: SemiDiscreteSystem, u: ControlSignal, y0) -> np.ndarray:
    return simulate_lti(sysd.lti, u, y0, u.t_grid[-1])


def transport_hum_control(sysd: SemiDiscreteSystem, T: float, y0, y1,
                          penalty: float = DEFAULT_PENALTY):
    """Penalized minimal-norm boundary control steering y0 to y1 in time T.

    The gramian is formed in L² coordinates; the control grid uses the CFL
    step.  Returns (ControlSignal, GramianReport).
    """
    iso = l2_coordinates(sysd)
    s = np.sqrt(sysd.grid.h)
    u, rep = min_norm_control(iso, T, s * np.asarray(y0, float), s * np.asarray(y1, float),
                              n_quad=cfl_steps(sysd.grid, T), penalty=penalty)
    return u, rep


def gramian_report(sysd: SemiDiscreteSystem, T: float) -> GramianReport:
    """Spectrum of the L²-coordinate gramian on the CFL quadrature grid."""
    G = controllability_gramian(l2_coordinates(sysd), T, cfl_steps(sysd.grid, T))
    return GramianReport(T, gramian_spectrum(G))


def legendre_subspace(grid: Grid1D, modes: int) -> np.ndarray:
    """Euclidean-orthonormal columns spanning the first Legendre polynomials
    sampled on cell centers (L²-orthonormal after the √h scaling)."""
    x = 2.0 * grid.centers / grid.L - 1.0
    P = np.stack([legendre.legval(x, np.eye(modes)[k]) for k in range(modes)], axis=1)
    Q, _ = np.linalg.qr(P)
    return Q


def filtered_observability_constant(sysd: SemiDiscreteSystem, T: float, modes: int = 4) -> float:
    """Smallest eigenvalue of the L² gramian restricted to smooth data.

    The upwind scheme damps grid-scale modes, so the raw smallest eigenvalue
    sits at round-off for every T.  Restricting the quadratic form to the
    span of the first ``modes`` Legendre polynomials measures the
    well-resolved part, which is where the time threshold T = L shows up.
    """
    G = controllability_gramian(l2_coordinates(sysd), T, cfl_steps(sysd.grid, T))
    Q = legendre_subspace(sysd.grid, modes)
    return float(linalg.eigh(Q.T @ G @ Q, eigvals_only=True)[0])


# ---------------------------------------------------------------------------
# Fattorini checks for the continuum kernel


def kernel_l2_norm(kernel: KernelSpec, grid: Grid1D) -> float:
    """Midpoint-rule L² norm of k on (0, L)^2."""
    if kernel.variant == ZERO:
        return 0.0
    return float(grid.h * np.linalg.norm(kernel.matrix(grid.N)))


def kernel_sufficient_tests(kernel: KernelSpec, grid: Grid1D) -> dict:
    """The two sufficient conditions for the Fattorini criterion.

    ``norm_test``: ||k|| < √2 / L, with ``norm_margin`` = √2/L - ||k||.
    ``support_test``: k vanishes where x > ξ (side "T-") or where x < ξ
    (side "T+").
    """
    bound = np.sqrt(2.0) / grid.L
    if kernel.variant == ZERO:
        return {"norm_test": True, "norm_margin": bound, "support_test": True, "side": "both"}
    norm = kernel_l2_norm(kernel, grid)
    K = kernel.matrix(grid.N)
    lower = np.tril(K, -1)  # x_i > ξ_j
    upper = np.triu(K, 1)   # x_i < ξ_j
    side = None
    if not np.any(lower):
        side = "T-"
    elif not np.any(upper):
        side = "T+"
    return {"norm_test": bool(norm < bound), "norm_margin": float(bound - norm),
            "support_test": side is not None, "side": side}


def eigen_condition_values(k_samples: np.ndarray, L: float, ns) -> tuple[complex, np.ndarray]:
    """value_n = 1 + (λ_n - λ0)^{-1} ∫ k e^{-λ_n x} dx with λ_n = 2 i n π / L.

    Integrals use the midpoint rule on the cells that carry the samples.
    Returns (λ0, values).
    """
    k = np.asarray(k_samples, dtype=float)
    N = k.size
    h = L / N
    x = (np.arange(N) + 0.5) * h
    lam0 = h * k.sum()
    ns = np.asarray(ns)
    lam = 2j * np.pi * ns / L
    integrals = h * np.exp(-np.outer(lam, x)) @ k
    with np.errstate(divide="ignore", invalid="ignore"):
        values = 1.0 + integrals / (lam - lam0)
    return complex(lam0), values


def fattorini_eigen_condition(kernel: KernelSpec, L: float, n_max: int = 20, tol: float = 1e-6):
    """Spectral Fattorini check for a kernel depending only on x.

    Returns (rows, verdict) where rows lists (n, value_n) for 0 < |n| <= n_max
    and verdict is "Holds", "FailsAt" or "Inconclusive".  Holds needs every
    |value_n| > tol plus the tail certificate
    1 - ||k||_{L¹} / (|λ_n| - |λ0|) > tol for |n| > n_max.
    """
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    if kernel.variant == ZERO:
        ns = [n for n in range(-n_max, n_max + 1) if n]
        return [(n, 1.0 + 0j) for n in ns], "Holds"
    if kernel.variant != FIRST:
        raise ValueError("the eigen-condition applies to kernels depending on x only")
    k = kernel.samples
    ns = np.array([n for n in range(-n_max, n_max + 1) if n])
    lam0, values = eigen_condition_values(k, L, ns)
    lam = 2j * np.pi * ns / L
    rows = list(zip(ns.tolist(), values.tolist()))
    if np.any(np.isclose(lam, lam0, rtol=0, atol=1e-14)):
        return rows, "FailsAt"
    if np.min(np.abs(values)) <= tol:
        return rows, "FailsAt"
    k_l1 = (L / k.size) * np.abs(k).sum()
    gap = 2 * np.pi * (n_max + 1) / L - abs(lam0)
    if gap <= 0 or 1.0 - k_l1 / gap <= tol:
        return rows, "Inconclusive"
    return rows, "Holds"


def discrete_eigen_scan(sysd: SemiDiscreteSystem, tol: float | None = None) -> FattoriniVerdict:
    """Hautus scan of the discretized pair in L² coordinates.

    The default threshold 20 h is absolute and shrinks with the mesh: a
    continuum failure shows up as a margin O(h), a continuum success as a
    margin that stays O(1).
    """
    if tol is None:
        tol = 20.0 * sysd.grid.h
    return fattorini_test(l2_coordinates(sysd), tol=tol, relative=False)


def continuum_verdict(kernel: KernelSpec, grid: Grid1D, n_max: int = 20, tol: float = 1e-6) -> str:
    """Fattorini verdict for the continuum kernel from the available checks."""
    if kernel.variant == ZERO:
        return "Holds"
    if kernel.variant == FIRST:
        return fattorini_eigen_condition(kernel, grid.L, n_max, tol)[1]
    tests = kernel_sufficient_tests(kernel, grid)
    if tests["norm_test"] or tests["support_test"]:
        return "Holds"
    return "Inconclusive"


# ---------------------------------------------------------------------------
# bundled kernels


def resonant_kernel(x, L: float = 1.0, offset: float = 0.5, scale: float | None = None):
    """k(x) = c (a + cos(2πx/L) + sin(2πx/L)) with value_1 = 0 at a = 1/2, c = 4π/L².

    With λ0 = c a L the condition 1 + (λ1 - λ0)^{-1} ∫ k e^{-λ1 x} = 0 reads
    λ0 - λ1 = c L (1 - i)/2, which holds exactly for a = 1/2, c = 4π / L².
    """
    c = 4 * np.pi / L**2 if scale is None else scale
    w = 2 * np.pi * np.asarray(x) / L
    return c * (offset + np.cos(w) + np.sin(w))


def bundled_kernels(grid: Grid1D) -> dict[str, KernelSpec]:
    L = grid.L
    return {
        "zero": KernelSpec.zero(),
        "const_small": KernelSpec.first_variable(grid, lambda x: 0.5 + 0 * x),
        "exp_small": KernelSpec.first_variable(grid, lambda x: 0.5 * np.exp(x / L)),
        "const_large": KernelSpec.first_variable(grid, lambda x: 5.0 + 0 * x),
        "resonant": KernelSpec.first_variable(grid, lambda x: resonant_kernel(x, L)),
        "near_resonant": KernelSpec.first_variable(grid, lambda x: 0.8 * resonant_kernel(x, L)),
        "upper_cos": KernelSpec.full(grid, lambda x, s: np.where(x < s, 3.0 * np.cos(x - s), 0.0)),
    }


# ---------------------------------------------------------------------------
# kernel file format: header "kernel <variant> N [L]" then samples


def format_kernel(kernel: KernelSpec, grid: Grid1D) -> str:
    head = f"kernel {kernel.variant} {grid.N} {grid.L:.16e}"
    if kernel.variant == ZERO:
        return head + "\n"
    s = np.atleast_2d(kernel.samples)
    return head + "\n" + "\n".join(" ".join(f"{v:.16e}" for v in row) for row in s) + "\n"


def parse_kernel(text: str) -> tuple[KernelSpec, Grid1D]:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0][0] != "kernel" or len(lines[0]) not in (3, 4):
        raise ValueError("kernel file must start with 'kernel <variant> N [L]'")
    variant, N = lines[0][1], int(lines[0][2])
    L = float(lines[0][3]) if len(lines[0]) == 4 else 1.0
    grid = Grid1D(L, N)
    values = np.array([float(v) for row in lines[1:] for v in row])
    if variant == ZERO:
        if values.size:
            raise ValueError("zero kernel takes no samples")
        return KernelSpec.zero(), grid
    if variant == FIRST:
        if values.size != N:
            raise ValueError(f"first-variable kernel needs {N} samples, got {values.size}")
        return KernelSpec(FIRST, values), grid
    if variant == FULL:
        if values.size != N * N:
            raise ValueError(f"full kernel needs {N * N} samples, got {values.size}")
        return KernelSpec(FULL, values.reshape(N, N)), grid
    raise ValueError(f"unknown kernel variant {variant!r}")


def read_kernel(path) -> tuple[KernelSpec, Grid1D]:
    return parse_kernel(Path(path).read_text())


def write_kernel(path, kernel: KernelSpec, grid: Grid1D) -> None:
    Path(path).write_text(format_kernel(kernel, grid))


def characteristics_solution(x, t, y0_fn, boundary_fn=None, L: float = 1.0):
    """Exact kernel-free solution y(t, x) = y0(x + t) or u(t - (L - x))."""
    x = np.asarray(x, dtype=float)
    s = x + t
    inside = s <= L
    out = np.where(inside, y0_fn(np.minimum(s, L)), 0.0)
    if boundary_fn is not None:
        out = np.where(inside, out, boundary_fn(t - (L - x)))
    return out


def quad_eigen_condition(k_fn, L: float, n: int) -> complex:
    """value_n with adaptive quadrature (an independent check of the midpoint version)."""
    lam = 2j * np.pi * n / L
    lam0 = integrate.quad(k_fn, 0, L, limit=200)[0]
    re = integrate.quad(lambda x: k_fn(x) * np.cos(lam.imag * x), 0, L, limit=200)[0]
    im = integrate.quad(lambda x: -k_fn(x) * np.sin(lam.imag * x), 0, L, limit=200)[0]
    return 1.0 + (re + 1j * im) / (lam - lam0)
