import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from helpers import random_orthogonal, random_system, seeded_systems
from perturbactrl.lti_core import (
    ControlSignal,
    LtiSystem,
    NotControllable,
    NotControllableAtTolerance,
    cascade_transform,
    controllability_gramian,
    fattorini_test,
    format_matrix,
    gramian_spectrum,
    kalman_rank,
    min_norm_control,
    observability_constant,
    parse_matrices,
    read_system,
    simpson_weights,
    simulate_lti,
)

DOUBLE_INTEGRATOR = LtiSystem([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def controllable_system(seed, n_max=4):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, 3))
    return LtiSystem(rng.standard_normal((n, n)) * 0.7, rng.standard_normal((n, m))), rng


# ---------------------------------------------------------------------------
# frozen oracles


def test_double_integrator_gramian_matches_closed_form():
    # ∫_0^T (T-t, 1)^T (T-t, 1) dt
    T = 2.0
    G = controllability_gramian(DOUBLE_INTEGRATOR, T, n_quad=40)
    expected = np.array([[T**3 / 3, T**2 / 2], [T**2 / 2, T]])
    np.testing.assert_allclose(G, expected, rtol=1e-13, atol=1e-13)


def test_scalar_gramian_matches_closed_form():
    sys = LtiSystem([[-1.0]], [[1.0]])
    for T in (0.5, 1.0, 3.0):
        G = controllability_gramian(sys, T, n_quad=400)
        assert G[0, 0] == pytest.approx((1 - np.exp(-2 * T)) / 2, rel=1e-8)


def test_double_integrator_min_norm_control_is_the_textbook_line():
    # steering (0, 0) to (1, 0) in time T with least energy: u = 6/T² - 12 t/T³
    T = 1.5
    u, rep = min_norm_control(DOUBLE_INTEGRATOR, T, [0.0, 0.0], [1.0, 0.0], n_quad=200)
    t = u.t_grid
    np.testing.assert_allclose(u.values[0], 6 / T**2 - 12 * t / T**3, atol=1e-10)
    assert rep.final_residual < 1e-12
    assert rep.control_norm == pytest.approx(np.sqrt(12 / T**3), rel=1e-4)


def test_double_integrator_cascade_form():
    K, At, Bt = cascade_transform(DOUBLE_INTEGRATOR)
    np.testing.assert_allclose(K, [[0, 1], [1, 0]])
    np.testing.assert_allclose(At, [[0, 0], [1, 0]], atol=1e-15)
    np.testing.assert_allclose(Bt, [[1], [0]], atol=1e-15)
    # multiplication oracle
    np.testing.assert_allclose(K @ At, DOUBLE_INTEGRATOR.A @ K, atol=1e-15)


def test_simulation_with_constant_control_matches_augmented_exponential():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3))
    B = rng.standard_normal((3, 2))
    ubar = np.array([0.7, -1.2])
    y0 = rng.standard_normal(3)
    T = 1.3
    # Van Loan: exp of [[A, B ubar], [0, 0]] propagates (y, 1)
    aug = np.zeros((4, 4))
    aug[:3, :3] = A
    aug[:3, 3] = B @ ubar
    exact = linalg.expm(T * aug) @ np.append(y0, 1.0)
    # the Duhamel rule is fourth order: 400 steps leave about dt⁴ ~ 1e-10
    t = np.linspace(0, T, 401)
    traj = simulate_lti(LtiSystem(A, B), ControlSignal(t, np.repeat(ubar[:, None], t.size, axis=1)), y0)
    np.testing.assert_allclose(traj[-1], exact[:3], rtol=1e-9)


def test_simulation_is_fourth_order_in_the_control_sampling():
    sys = LtiSystem([[0.0, 1.0], [-4.0, 0.0]], [[0.0], [1.0]])
    # forced oscillator y'' + 4y = sin 3t from rest: y = (sin 3t)/(-5) + (3/10) sin 2t
    T = 2.0
    errs = []
    for k in (10, 20, 40):
        t = np.linspace(0, T, k + 1)
        traj = simulate_lti(sys, ControlSignal(t, np.sin(3 * t)[None, :]), [0.0, 0.0])
        exact = -np.sin(3 * T) / 5 + 0.3 * np.sin(2 * T)
        errs.append(abs(traj[-1, 0] - exact))
    orders = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(orders > 3.7)


def test_simpson_weights_integrate_cubics_exactly():
    w = simpson_weights(8, 0.25)
    t = np.linspace(0, 2, 9)
    assert w @ t**3 == pytest.approx(4.0, rel=1e-14)


def test_witness_is_an_unreachable_eigendirection():
    sys = LtiSystem(np.diag([-1.0, -2.0, 0.5]), [[1.0], [1.0], [0.0]])
    v = fattorini_test(sys)
    assert v.tag == "FailsAt"
    lam, phi = v.witness
    assert lam == pytest.approx(0.5)
    np.testing.assert_allclose(sys.B.T @ phi, 0, atol=1e-14)
    np.testing.assert_allclose(sys.A.T @ phi, lam * phi, atol=1e-14)


def test_min_norm_control_refuses_uncontrollable_pair_without_penalty():
    sys = LtiSystem(np.diag([-1.0, -2.0]), [[1.0], [0.0]])
    with pytest.raises(NotControllableAtTolerance):
        min_norm_control(sys, 1.0, [1.0, 1.0], [0.0, 0.0])


def test_cascade_transform_refuses_uncontrollable_pair():
    with pytest.raises(NotControllable):
        cascade_transform(LtiSystem(np.eye(2), [[1.0], [0.0]]))


def test_hautus_agrees_with_kalman_and_with_construction():
    for sys, controllable in seeded_systems(200, seed=11):
        holds = fattorini_test(sys).holds
        full = kalman_rank(sys) == sys.n
        assert holds == full
        assert holds == controllable


def test_system_file_round_trip(tmp_path):
    path = tmp_path / "sys.txt"
    path.write_text("# A then B\n" + format_matrix(DOUBLE_INTEGRATOR.A) + format_matrix(DOUBLE_INTEGRATOR.B))
    sys = read_system(path)
    np.testing.assert_array_equal(sys.A, DOUBLE_INTEGRATOR.A)
    np.testing.assert_array_equal(sys.B, DOUBLE_INTEGRATOR.B)


def test_malformed_matrix_file_is_rejected():
    with pytest.raises(ValueError):
        parse_matrices("2 2\n1 0\n0\n")


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.2, 2.0), st.floats(0.05, 1.0))
def test_gramian_is_psd_and_monotone_in_time(seed, T, extra):
    sys, _ = controllable_system(seed)
    G1 = controllability_gramian(sys, T, n_quad=200)
    G2 = controllability_gramian(sys, T + extra, n_quad=200)
    scale = max(np.abs(G2).max(), 1e-300)
    assert gramian_spectrum(G1)[-1] >= -1e-10 * scale
    assert gramian_spectrum(G2 - G1)[-1] >= -1e-8 * scale


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_rank_tests_and_gramian_spectrum_are_similarity_invariant(seed):
    rng = np.random.default_rng(seed)
    sys, _ = random_system(rng)
    Q = random_orthogonal(rng, sys.n)
    other = sys.similar(Q)
    assert kalman_rank(other) == kalman_rank(sys)
    assert fattorini_test(other).tag == fattorini_test(sys).tag
    e1 = gramian_spectrum(controllability_gramian(sys, 0.7, 100))
    e2 = gramian_spectrum(controllability_gramian(other, 0.7, 100))
    np.testing.assert_allclose(e1, e2, atol=1e-9 * max(1.0, e1[0]))


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_min_norm_control_beats_every_other_steering_control(seed):
    sys, rng = controllable_system(seed, n_max=3)
    T = 1.0
    y0, y1 = rng.standard_normal(sys.n), rng.standard_normal(sys.n)
    if observability_constant(sys, T) < 1e-6 * gramian_spectrum(controllability_gramian(sys, T))[0]:
        return  # nearly uncontrollable draw, not a meaningful comparison
    u, rep = min_norm_control(sys, T, y0, y1, n_quad=200)
    # a second control: arbitrary smooth v plus the HUM correction of its effect
    t = u.t_grid
    v = ControlSignal(t, np.vstack([np.cos((k + 1) * t + rng.standard_normal()) for k in range(sys.m)]))
    yv = simulate_lti(sys, v, np.zeros(sys.n))[-1]
    corr, _ = min_norm_control(sys, T, np.zeros(sys.n), -yv, n_quad=200)
    other = ControlSignal(t, u.values + v.values + corr.values)
    reached = simulate_lti(sys, other, y0)[-1]
    assert np.linalg.norm(reached - y1) < 1e-6 * max(1.0, np.linalg.norm(y1))
    assert other.l2_norm() >= u.l2_norm() * (1 - 1e-6)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_duality_pairing_with_the_adjoint_flow(seed):
    # <y(T), phi_T> = ∫ <u(t), B* e^{(T-t)A*} phi_T> dt for y(0) = 0
    sys, rng = controllable_system(seed)
    T, k = 1.0, 400
    t = np.linspace(0, T, k + 1)
    u = ControlSignal(t, np.vstack([np.sin((j + 2) * t) + t**2 for j in range(sys.m)]))
    yT = simulate_lti(sys, u, np.zeros(sys.n))[-1]
    phiT = rng.standard_normal(sys.n)
    adj = np.stack([sys.B.T @ linalg.expm((T - s) * sys.A.T) @ phiT for s in t])
    rhs = simpson_weights(k, T / k) @ np.sum(adj * u.values.T, axis=1)
    assert yT @ phiT == pytest.approx(rhs, rel=1e-8, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_cascade_transform_conjugates_the_pair(seed):
    sys, _ = controllable_system(seed)
    K, At, Bt = cascade_transform(sys)
    np.testing.assert_allclose(K @ At, sys.A @ K, atol=1e-9 * max(1.0, np.abs(sys.A @ K).max()))
    np.testing.assert_allclose(K @ Bt, sys.B, atol=1e-9)
    if sys.m == 1:
        np.testing.assert_allclose(Bt.ravel(), np.eye(sys.n)[0], atol=1e-9)
        np.testing.assert_allclose(np.diag(At, -1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=6, max_size=6))
def test_matrix_text_format_round_trips_exactly(vals):
    M = np.array(vals).reshape(2, 3)
    (back,) = parse_matrices(format_matrix(M))
    np.testing.assert_array_equal(back, M)
