"""Random system generators with known controllability, shared by the tests."""

import numpy as np

from perturbactrl.lti_core import LtiSystem


def random_orthogonal(rng, n):
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def random_system(rng):
    """Return (system, controllable) with n <= 6 and m <= 3.

    Three families, each hidden behind a random orthogonal similarity:
    generic draws (controllable with probability one), block-triangular
    systems whose input reaches only a proper invariant subspace, and
    systems with an eigenvalue repeated more often than there are inputs.
    """
    n = int(rng.integers(1, 7))
    m = int(rng.integers(1, 4))
    kind = rng.choice(["generic", "decomposed", "repeated"])
    if kind == "generic" or n == 1:
        A = rng.standard_normal((n, n))
        B = rng.standard_normal((n, m))
        return LtiSystem(A, B), True
    Q = random_orthogonal(rng, n)
    if kind == "decomposed":
        r = int(rng.integers(0, n))
        A = rng.standard_normal((n, n))
        A[r:, :r] = 0.0
        B = np.zeros((n, m))
        B[:r] = rng.standard_normal((r, m))
        return LtiSystem(Q @ A @ Q.T, Q @ B), False
    k = int(rng.integers(1, n + 1))
    lam = rng.standard_normal()
    diag = np.concatenate([np.full(k, lam), rng.standard_normal(n - k) + 3.0])
    A = Q @ np.diag(diag) @ Q.T
    B = rng.standard_normal((n, m))
    return LtiSystem(A, B), k <= m and _distinct(diag[k:], lam)


def _distinct(others, lam):
    # the remaining eigenvalues are simple and away from lam with probability one
    return bool(np.all(np.abs(others - lam) > 1e-6)) and np.unique(np.round(others, 9)).size == others.size


def seeded_systems(count=200, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_system(rng) for _ in range(count)]


def random_cascade(grid, n, rng):
    """Smooth cascade coupling: a_{i,i-1} in [0.5, 1.5] on the whole interval,
    random smooth entries on and above the diagonal, zero below."""
    from perturbactrl.wave_lab import CascadeCoupling

    x = grid.interior_nodes / grid.L
    a = np.zeros((n, n, x.size))
    for i in range(n):
        for j in range(max(i - 1, 0), n):
            c = rng.uniform(-1, 1, 3)
            a[i, j] = c[0] + c[1] * np.cos(np.pi * x) + c[2] * np.sin(2 * np.pi * x)
            if j == i - 1:
                a[i, j] = 1.0 + 0.5 * np.tanh(a[i, j])
    return CascadeCoupling(a)


def random_source(grid, omega, n, T, rng, ansatz):
    """Random smooth source in the span of the tensor spline ansatz."""
    from perturbactrl.wave_lab import SpaceTimeField, space_basis

    tb = ansatz.time_basis(T, n)
    Sx = space_basis(grid, ansatz.space_window(grid, omega, n), ansatz.n_space, ansatz.space_degree)
    return [SpaceTimeField(tb, {0: rng.standard_normal((tb.count, Sx.shape[1])) @ Sx.T}) for _ in range(n)]


def ray_entry_time(ell, omega, x0, direction, dt=1e-4, t_max=10.0):
    """Time for a unit-speed ray bouncing in [0, ell] to enter the open set omega."""
    a, b = omega
    x, d, t = x0, direction, 0.0
    while t < t_max:
        if a < x < b:
            return t
        x += d * dt
        if x < 0:
            x, d = -x, -d
        elif x > ell:
            x, d = 2 * ell - x, -d
        t += dt
    return np.inf
