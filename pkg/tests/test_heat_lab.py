import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from helpers import random_orthogonal
from perturbactrl.discretization import Grid1D
from perturbactrl.heat_lab import (
    STAGE_MARGIN,
    DiffusionMatrix,
    IncreaseModes,
    NotRealSpectrum,
    dirac_heat_control,
    dirac_modes,
    extend_by_symmetry,
    mode_mass,
    modal_coefficients,
    parabolic_null_control,
    penalized_parabolic_control,
    sequential_wave_control,
    transmutation_transform,
    triangularize_diffusion,
)
from perturbactrl.wave_lab import gcc_time_1d

OMEGA = (0.3, 0.7)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_triangularization_is_orthogonal_and_lower(seed, n):
    rng = np.random.default_rng(seed)
    # orthogonally similar to a lower-triangular matrix with a dominant positive
    # diagonal, so D is elliptic with a known real spectrum
    L = np.tril(rng.uniform(-0.3, 0.3, (n, n)))
    np.fill_diagonal(L, rng.uniform(1.5, 3.0, n))
    Q = random_orthogonal(rng, n)
    D = Q @ L @ Q.T
    P, Tau = triangularize_diffusion(DiffusionMatrix(D))
    np.testing.assert_allclose(P @ P.T, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(P @ D @ P.T, Tau, atol=1e-9 * max(1.0, np.abs(D).max()))
    assert not np.any(np.triu(Tau, 1))
    np.testing.assert_allclose(np.sort(np.diag(Tau)), np.sort(np.diag(L)), rtol=1e-6)


def test_jordan_diffusion_triangularizes():
    P, Tau = triangularize_diffusion(DiffusionMatrix([[1.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(np.diag(Tau), [1.0, 1.0], atol=1e-12)
    assert abs(Tau[1, 0]) == pytest.approx(1.0)


def test_complex_spectrum_is_rejected():
    with pytest.raises((NotRealSpectrum, ValueError)):
        triangularize_diffusion(DiffusionMatrix([[1.0, -2.0], [2.0, 1.0]]))


def test_modes_are_orthonormal_with_known_mass():
    S = 1.3
    js = np.arange(1, 9)
    s = np.linspace(-S, S, 4001)
    phis = dirac_modes(s, js, S)
    gram = integrate.simpson(phis[:, :, None] * phis[:, None, :], x=s, axis=0)
    np.testing.assert_allclose(gram, np.eye(8), atol=1e-10)
    np.testing.assert_allclose(integrate.simpson(phis, x=s, axis=0), mode_mass(js, S), atol=1e-10)


def test_closed_form_modal_coefficients_match_an_ode_solve():
    # c_j' = -μ_j c_j + g_j w(t), c_j(0) = φ_j(0)
    S, T = 1.2, 0.5
    coef = np.array([0.3, -1.1, 0.4])
    js = np.array([1, 2, 3, 5])
    mu = (js * np.pi / (2 * S)) ** 2
    g = np.where(js % 2 == 1, js * np.pi / S**1.5, 0.0)
    w = lambda t: np.sin(np.arange(1, 4) * np.pi * t / T) @ coef  # noqa: E731
    sol = integrate.solve_ivp(lambda t, c: -mu * c + g * w(t), (0, T), dirac_modes([0.0], js, S)[0],
                              rtol=1e-11, atol=1e-13, dense_output=True)
    t = np.linspace(0, T, 7)
    np.testing.assert_allclose(modal_coefficients(coef, S, T, t, js), sol.sol(t).T, atol=1e-8)


def test_dirac_control_meets_the_moments_and_vanishes_at_the_ends():
    heat = dirac_heat_control(1.2, 0.5, n_modes=16)
    assert heat.moment_residuals.max() <= 1e-6
    assert abs(heat.w([0.0])[0]) < 1e-12 and abs(heat.w([0.5])[0]) < 1e-10
    # the lifted coefficients describe k - w, which vanishes at s = ±S
    k = heat.kernel(np.array([0.2, 0.4]), np.array([-1.2, 1.2]))
    np.testing.assert_allclose(k, heat.w(np.array([0.2, 0.4]))[:, None] * np.ones((1, 2)), atol=1e-9)


def test_too_few_basis_functions_ask_for_more():
    with pytest.raises(IncreaseModes) as err:
        dirac_heat_control(1.2, 0.5, n_modes=16, n_basis=3)
    assert err.value.table


def test_symmetric_extension():
    s = np.linspace(0, 1, 5)
    z = np.stack([1 - s, 2 * (1 - s)], axis=1)
    sbar, zbar, vbar = extend_by_symmetry(s, z, z)
    np.testing.assert_allclose(sbar, np.linspace(-1, 1, 9))
    np.testing.assert_allclose(zbar, zbar[::-1])
    with pytest.raises(ValueError):
        extend_by_symmetry(s, z + 1.0, z)


def test_transform_integrates_against_the_kernel():
    s = np.linspace(-1, 1, 2001)
    k = np.stack([np.ones_like(s), s**2])
    z = np.stack([s**2, np.cos(s)], axis=1)
    y, _ = transmutation_transform(k, s, z, z)
    np.testing.assert_allclose(y, [[2 / 3, 2 * np.sin(1)], [2 / 5, integrate.quad(lambda x: x**2 * np.cos(x), -1, 1)[0]]],
                               atol=1e-6)


@pytest.mark.parametrize("Tau, bound", [([[1.0, 0.0], [0.0, 1.0]], 1e-6), ([[1.0, 0.0], [0.7, 2.0]], 1e-4)])
def test_staged_wave_control_brings_each_component_to_rest(Tau, bound):
    grid = Grid1D(1.0, 40)
    Tau = np.array(Tau)
    x = grid.interior_nodes
    z0 = np.concatenate([np.sin(np.pi * x), x * (1 - x)])
    stages = sequential_wave_control(Tau, np.zeros((2, 2, x.size)), grid, OMEGA, z0)
    assert len(stages.residuals) == 2 and max(stages.residuals) <= bound
    S_star = gcc_time_1d(1.0, OMEGA)
    assert stages.S == pytest.approx(STAGE_MARGIN * S_star * np.sum(1 / np.sqrt(np.diag(Tau))))
    assert np.linalg.norm(stages.final) <= bound * np.linalg.norm(z0)


def test_zero_datum_gives_zero_control():
    grid = Grid1D(1.0, 20)
    out = parabolic_null_control(DiffusionMatrix(np.eye(2)), None, np.eye(2), grid, OMEGA, 0.2,
                                 np.zeros((2, grid.N - 1)))
    assert not np.any(out.u)


def test_rank_deficient_input_is_rejected():
    grid = Grid1D(1.0, 20)
    with pytest.raises(ValueError):
        parabolic_null_control(DiffusionMatrix(np.eye(2)), None, [[1.0], [0.0]], grid, OMEGA, 0.2,
                               np.ones((2, grid.N - 1)))


def test_pipeline_and_oracle_null_control_a_diagonal_system():
    grid = Grid1D(1.0, 50)
    x = grid.interior_nodes
    y0 = np.stack([np.sin(np.pi * x), np.sin(2 * np.pi * x)])
    D = np.diag([1.0, 1.5])
    out = parabolic_null_control(DiffusionMatrix(D), None, np.eye(2), grid, OMEGA, 0.5, y0)
    assert out.report.final_relative <= 1e-2
    assert out.report.moment_residual <= 1e-6
    assert penalized_parabolic_control(D, None, np.eye(2), grid, OMEGA, 0.5, y0)[2] <= 1e-2
