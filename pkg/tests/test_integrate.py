import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from aedesdyn import _kernels
from aedesdyn.integrate import (IntegrationError, TimeGrid, fundamental_matrix, integrate_ll,
                                integrate_reference, ll_step, matrix_exponential,
                                read_trajectory_csv, write_trajectory_csv)
from aedesdyn.model import TABLE1, X0_TABLE1, jacobian

LINEAR = TABLE1.with_values(gamma1=0.0, gamma2=0.0, epsilon0=0.0)


def taylor_expm(M, terms=50):
    out = np.eye(M.shape[0])
    term = np.eye(M.shape[0])
    for k in range(1, terms):
        term = term @ M / k
        out = out + term
    return out


def random_matrix(rng, n, norm1):
    M = rng.normal(size=(n, n))
    return M * (norm1 / np.abs(M).sum(axis=0).max())


def test_grid_invariants():
    g = TimeGrid.from_horizon(151, 0.1)
    assert g.n_steps == 1510 and g.times[-1] == 151.0 and g.times[0] == 0.0
    with pytest.raises(ValueError):
        TimeGrid.from_horizon(151, 0.07)
    with pytest.raises(ValueError):
        TimeGrid(dt=0.1, n_steps=10, T=2.0)
    c = TimeGrid.covering(37.0, 0.01)
    assert c.dt <= 0.01 and c.times[-1] == 37.0


def test_expm_trivial_cases():
    assert np.array_equal(matrix_exponential(np.zeros((5, 5))), np.eye(5))
    np.testing.assert_allclose(matrix_exponential(np.diag([1.5, -2.0])),
                               np.diag([math.exp(1.5), math.exp(-2.0)]), rtol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_expm_matches_taylor(seed):
    M = random_matrix(np.random.default_rng(seed), 5, 1.0)
    E = matrix_exponential(M)
    ref = taylor_expm(M)
    assert np.abs(E - ref).max() / np.abs(ref).max() < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_expm_larger_norm(seed):
    # scaled Taylor oracle: exp(M) = exp(M / 16)^16
    M = random_matrix(np.random.default_rng(100 + seed), 5, 10.0)
    ref = np.linalg.matrix_power(taylor_expm(M / 16), 16)
    assert np.abs(matrix_exponential(M) - ref).max() / np.abs(ref).max() < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 5.0))
def test_expm_inverse_property(seed, nrm):
    M = random_matrix(np.random.default_rng(seed), 5, nrm)
    np.testing.assert_allclose(matrix_exponential(M) @ matrix_exponential(-M), np.eye(5),
                               atol=1e-10)


def test_expm_rejects_bad_input():
    with pytest.raises(ValueError):
        matrix_exponential(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        matrix_exponential(np.ones((2, 3)))


def test_ll_step_origin_fixed():
    assert np.all(ll_step(0.0, np.zeros(5), None, TABLE1, 0.1) == 0)


@pytest.mark.parametrize("dt", [0.01, 0.1, 1.0])
def test_ll_step_exact_on_linear_system(dt):
    W = jacobian(0.0, np.zeros(5), None, LINEAR)
    x = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    np.testing.assert_allclose(ll_step(0.0, x, None, LINEAR, dt), matrix_exponential(W * dt) @ x,
                               rtol=1e-12)


def test_ll_near_singular_fallback():
    J = np.diag([1e-14, -1.0, -2.0])
    f = np.array([1.0, 1.0, 1.0])
    inc = _kernels.ll_increment(J, f, 0.5)
    expected = [0.5, 1 - math.exp(-0.5), (1 - math.exp(-1.0)) / 2]
    np.testing.assert_allclose(inc, expected, rtol=1e-12)


def test_forced_increment_matches_closed_form():
    rng = np.random.default_rng(3)
    J = random_matrix(rng, 5, 1.0) - 2 * np.eye(5)
    f, ft = rng.normal(size=5), rng.normal(size=5)
    dt = 0.3
    E = taylor_expm(J * dt)
    Ji = np.linalg.inv(J)
    closed = (E - np.eye(5)) @ Ji @ f + (E - np.eye(5) - J * dt) @ Ji @ Ji @ ft
    np.testing.assert_allclose(_kernels.forced_increment(J, f, ft, dt), closed, rtol=1e-10)


def test_zero_initial_state():
    g = TimeGrid.from_horizon(20, 0.1)
    assert np.all(integrate_ll(np.zeros(5), None, TABLE1, g).states == 0)
    assert np.all(integrate_reference(np.zeros(5), None, TABLE1, g).states == 0)


def test_ll_against_reference_dt001():
    g = TimeGrid.from_horizon(151, 0.01)
    ll = integrate_ll(X0_TABLE1, None, TABLE1, g).states
    ref = integrate_reference(X0_TABLE1, None, TABLE1, g).states
    assert np.abs(ll - ref).max() / np.abs(ref).max() < 1e-3


def test_uncontrolled_adults_oscillate_with_period_37():
    g = TimeGrid.from_horizon(151, 0.1)
    x5 = integrate_ll(X0_TABLE1, None, TABLE1, g).states[:, 4]
    tail = x5[g.times >= 74]
    tail = tail - tail.mean()
    spec = np.abs(np.fft.rfft(tail))
    freqs = np.fft.rfftfreq(tail.size, d=0.1)
    k = np.argmax(spec[1:]) + 1
    assert abs(1 / freqs[k] - 37.0) < 4.0
    # one period later the oscillation repeats (attracted to the periodic orbit)
    i = np.searchsorted(g.times, 100.0)
    j = np.searchsorted(g.times, 137.0)
    assert abs(x5[i] - x5[j]) < 0.05 * x5[i]


def test_per_interval_error_second_order():
    ref = integrate_reference(X0_TABLE1, None, TABLE1, TimeGrid.from_horizon(151, 0.005)).states
    errs = []
    for dt in (0.1, 0.05):
        g = TimeGrid.from_horizon(151, dt)
        ll = integrate_ll(X0_TABLE1, None, TABLE1, g).states
        k = int(round(dt / 0.005))
        errs.append(np.abs(ll - ref[::k]).sum(axis=1).max())
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_linear_system_reference():
    W = jacobian(0.0, np.zeros(5), None, LINEAR)
    g = TimeGrid.from_horizon(10, 0.1)
    x0 = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    ref = integrate_reference(x0, None, LINEAR, g)
    np.testing.assert_allclose(ref.final, matrix_exponential(W * 10) @ x0, rtol=1e-8)
    ll = integrate_ll(x0, None, LINEAR, g)
    expected = x0.copy()
    E = matrix_exponential(W * 0.1)
    for j in range(g.n_steps):
        expected = E @ expected
        np.testing.assert_allclose(ll.states[j + 1], expected, rtol=1e-12)


def test_reference_fourth_order():
    def final(dt):
        return integrate_reference(X0_TABLE1, None, TABLE1, TimeGrid.from_horizon(20, dt),
                                   substeps=1).final
    a, b, c = final(0.4), final(0.2), final(0.1)
    ratio = np.abs(a - b).max() / np.abs(b - c).max()
    assert 13 < ratio < 19


def test_positivity_random_initial_states():
    rng = np.random.default_rng(0)
    g = TimeGrid.from_horizon(151, 0.1)
    for _ in range(20):
        x0 = rng.uniform(0, 500, 5) * (rng.random(5) < 0.7)
        for integ in (integrate_ll, integrate_reference):
            assert integ(x0, None, TABLE1, g).states.min() >= -1e-9


def test_negative_state_aborts():
    # a wildly unphysical control drives the explicit step negative
    g = TimeGrid.from_horizon(1, 0.5)
    U = np.full((2, 2), 50.0)
    with pytest.raises(IntegrationError) as info:
        integrate_reference(X0_TABLE1, U, TABLE1, g, substeps=1)
    assert info.value.step == 1


def test_bad_initial_state():
    with pytest.raises(ValueError):
        integrate_ll([-1, 0, 0, 0, 0], None, TABLE1, TimeGrid.from_horizon(1, 0.5))


def test_fundamental_matrix_constant():
    W = jacobian(0.0, np.zeros(5), None, LINEAR)
    Z = fundamental_matrix(lambda t: W, 5.0, dt=0.05)
    np.testing.assert_allclose(Z, matrix_exponential(W * 5.0), rtol=1e-8, atol=1e-10)


def _origin(params):
    return lambda t: jacobian(t, np.zeros(5), None, params)


def test_fundamental_matrix_against_solve_ivp():
    W = _origin(TABLE1)
    P = TABLE1.period
    Z = fundamental_matrix(W, P, dt=0.01)
    sol = solve_ivp(lambda t, z: (W(t) @ z.reshape(5, 5)).ravel(), (0, P), np.eye(5).ravel(),
                    method="DOP853", rtol=1e-12, atol=1e-12)
    ref = sol.y[:, -1].reshape(5, 5)
    assert np.abs(Z - ref).max() / np.abs(ref).max() < 1e-8


def test_fundamental_matrix_composition():
    W = _origin(TABLE1)
    full = fundamental_matrix(W, 20.0, dt=0.01)
    first = fundamental_matrix(W, 8.0, dt=0.01)
    second = fundamental_matrix(lambda t: W(t + 8.0), 12.0, dt=0.01)
    assert np.abs(second @ first - full).max() / np.abs(full).max() < 1e-8


def test_monodromy_equals_exp_gamma2_when_unforced():
    auto = TABLE1.with_values(epsilon0=0.0)
    Z = fundamental_matrix(_origin(auto), auto.period, dt=0.01)
    G2 = jacobian(0.0, np.zeros(5), None, auto)
    np.testing.assert_allclose(Z, matrix_exponential(G2 * auto.period), rtol=1e-6)


def test_csv_roundtrip(tmp_path):
    g = TimeGrid.from_horizon(5, 0.1)
    traj = integrate_ll(X0_TABLE1, None, TABLE1, g)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, traj)
    assert path.read_text().splitlines()[0] == "t,x1,x2,x3,x4,x5"
    t, x = read_trajectory_csv(path)
    assert np.array_equal(t, traj.times) and np.array_equal(x, traj.states)
