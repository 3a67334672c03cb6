import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from aedesdyn.estimate import (EstimationProblem, barrier, ga_optimize, generate_synthetic,
                               genetic_minimize, likelihood_from_residuals, ls_objective,
                               mle_objective, profile_bounds, profile_interval,
                               refine, residuals, total_population, wald_bounds, wald_interval,
                               write_ga_log)
from aedesdyn.integrate import TimeGrid, integrate_reference
from aedesdyn.model import TABLE1, X0_TABLE1, SolverError

TRUTH = np.array([2.0, 0.4])
LOWER = np.array([0.0, 0.0])
UPPER = np.array([2.9, 1.0])


def make_problem(dt=0.1, T=151.0, noise=0.0, seed=0, integrator="ll", kind="mle",
                 lower=LOWER, upper=UPPER, barrier_weight=1e-4):
    grid = TimeGrid.from_horizon(T, dt)
    obs = generate_synthetic(TABLE1, grid, noise, seed, integrator=integrator)
    return EstimationProblem(TABLE1, ("epsilon0", "p"), lower, upper, grid, obs,
                             barrier_weight=barrier_weight, kind=kind)


@pytest.fixture(scope="module")
def noiseless():
    return make_problem()


# synthetic data

def test_synthetic_noiseless_is_exact():
    grid = TimeGrid.from_horizon(151, 0.1)
    obs = generate_synthetic(TABLE1, grid, 0.0, 0)
    clean = total_population(integrate_reference(X0_TABLE1, None, TABLE1, grid).states)
    assert np.array_equal(obs.refined, clean)


def test_synthetic_noise_variance():
    grid = TimeGrid.from_horizon(151, 0.1)
    obs = generate_synthetic(TABLE1, grid, 10.0, 5)
    clean = generate_synthetic(TABLE1, grid, 0.0, 5)
    diff = obs.refined - clean.refined
    assert diff.size >= 1500
    assert 7 <= diff.var() <= 13


def test_synthetic_deterministic():
    grid = TimeGrid.from_horizon(20, 0.1)
    a = generate_synthetic(TABLE1, grid, 10.0, 9)
    b = generate_synthetic(TABLE1, grid, 10.0, 9)
    assert np.array_equal(a.refined, b.refined)


# refinement

def test_refine_passthrough_and_linear():
    grid = TimeGrid.from_horizon(10, 0.5)
    vals = np.sin(grid.times)
    np.testing.assert_array_equal(refine(grid.times, vals, grid)[:, 0], vals)
    lin = refine([0.0, 10.0], [0.0, 10.0], grid)[:, 0]
    np.testing.assert_allclose(lin, grid.times, rtol=1e-15)


def test_refine_gap_and_extrapolation():
    grid = TimeGrid.from_horizon(4, 1.0)
    out = refine([1.0, 3.0], [2.0, 6.0], grid)[:, 0]
    np.testing.assert_allclose(out, [2.0, 2.0, 4.0, 6.0, 6.0])


def test_refine_needs_two_points():
    with pytest.raises(ValueError):
        refine([1.0], [2.0], TimeGrid.from_horizon(4, 1.0))


# objectives

def test_residuals_vanish_at_truth(noiseless):
    assert np.linalg.norm(residuals(TRUTH, noiseless)) < 1e-6


def test_residuals_zero_state_zero_observations():
    grid = TimeGrid.from_horizon(10, 0.5)
    obs = generate_synthetic(TABLE1, grid, 0.0, 0, x0=np.zeros(5))
    prob = EstimationProblem(TABLE1, ("epsilon0", "p"), LOWER, UPPER, grid, obs,
                             x0=np.zeros(5))
    assert np.all(residuals([1.0, 0.7], prob) == 0)


def test_residuals_identifiable(noiseless):
    base = np.linalg.norm(residuals(TRUTH, noiseless))
    assert np.linalg.norm(residuals(TRUTH + [0.5, 0.0], noiseless)) > base


def test_barrier_only_value():
    grid = TimeGrid.from_horizon(10, 0.5)
    obs = generate_synthetic(TABLE1, grid, 0.0, 0, x0=np.zeros(5))
    prob = EstimationProblem(TABLE1, ("epsilon0", "p"), LOWER, UPPER, grid, obs,
                             kind="ls", x0=np.zeros(5), barrier_weight=0.01)
    mid = 0.5 * (LOWER + UPPER)
    expected = -0.01 * np.sum(2 * np.log((UPPER - LOWER) / 2))
    assert ls_objective(mid, prob) == pytest.approx(expected, rel=1e-14)
    assert -0.01 * barrier(mid, prob) == pytest.approx(expected, rel=1e-14)


def test_infeasible_theta(noiseless):
    assert ls_objective([0.0, 0.4], noiseless) == math.inf
    assert mle_objective([2.0, 1.2], noiseless) == -math.inf


def test_ls_line_scan_decreasing():
    prob = make_problem(kind="ls", barrier_weight=1e-8)
    start = np.array([1.2, 0.7])
    vals = [ls_objective(start + s * (TRUTH - start), prob) for s in np.linspace(0, 1, 11)]
    assert np.all(np.diff(vals) < 0)


def test_ls_objective_tends_to_zero_at_truth():
    for w in (1e-2, 1e-6, 1e-10):
        prob = make_problem(kind="ls", barrier_weight=w)
        assert abs(ls_objective(TRUTH, prob)) < 50 * w + 1e-10


def test_barrier_consistency():
    prob0 = make_problem(kind="ls", integrator="reference", T=40.0)
    scan = np.linspace(1.5, 2.5, 41)
    errs = []
    for w in (1e-2, 1e-4, 1e-6):
        prob = make_problem(kind="ls", integrator="reference", T=40.0, barrier_weight=w)
        vals = [ls_objective([e, 0.4], prob) for e in scan]
        errs.append(abs(scan[int(np.argmin(vals))] - 2.0))
    assert errs[-1] <= errs[0] and errs[-1] <= 0.025
    assert prob0.observation.m == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5), st.integers(10, 200))
def test_profiled_identity(seed, m, n):
    eps = np.random.default_rng(seed).normal(size=(n, m)) * 10
    terms = likelihood_from_residuals(eps)
    assert not terms.regularized
    assert 0.5 * terms.mahalanobis_sq == pytest.approx(m * n / 2, rel=1e-12)


def test_scalar_likelihood_algebra():
    eps = np.random.default_rng(1).normal(size=(300, 1)) * 3
    n = eps.shape[0]
    s2 = np.mean(eps ** 2)
    expected = -(n / 2) * (math.log(2 * math.pi * s2) + 1)
    assert likelihood_from_residuals(eps).loglik == pytest.approx(expected, rel=1e-13)


def test_singular_covariance_regularized():
    terms = likelihood_from_residuals(np.zeros((20, 1)))
    assert terms.regularized and np.isfinite(terms.loglik)


def test_mle_line_scan_peaks_at_truth():
    prob = make_problem(integrator="reference")
    scan = np.linspace(1.6, 2.4, 17)
    vals = [mle_objective([e, 0.4], prob) for e in scan]
    assert scan[int(np.argmax(vals))] == pytest.approx(2.0)


def test_ls_mle_ordering_agree():
    ls_prob = make_problem(noise=10.0, seed=3, integrator="reference", kind="ls",
                           barrier_weight=1e-12)
    mle_prob = make_problem(noise=10.0, seed=3, integrator="reference", barrier_weight=1e-12)
    cands = np.random.default_rng(4).uniform([1.0, 0.2], [2.8, 0.8], size=(15, 2))
    ls_order = np.argsort([ls_objective(c, ls_prob) for c in cands])
    mle_order = np.argsort([-mle_objective(c, mle_prob) for c in cands])
    assert np.array_equal(ls_order, mle_order)


def test_problem_validation(noiseless):
    with pytest.raises(ValueError):
        EstimationProblem(TABLE1, ("p",), [0.5], [0.5], noiseless.grid, noiseless.observation)
    with pytest.raises(ValueError):
        EstimationProblem(TABLE1, ("p",), [0.0], [1.0], noiseless.grid, noiseless.observation,
                          barrier_weight=0.0)
    with pytest.raises(ValueError):
        EstimationProblem(TABLE1, ("p",), [0.0], [1.0], noiseless.grid, noiseless.observation,
                          kind="bayes")


# genetic algorithm

def test_ga_minimizes_quadratic():
    f = lambda x: float(np.sum((x - [0.3, -1.2]) ** 2))
    x, fx, evals = genetic_minimize(f, [-2, -2], [2, 2], population=30, generations=60, seed=1)
    assert np.abs(x - [0.3, -1.2]).max() < 0.02 and evals > 0


def test_ga_all_infeasible_fails():
    with pytest.raises(SolverError):
        genetic_minimize(lambda x: math.inf, [0], [1], population=10, generations=2, seed=0)


def test_ga_deterministic_and_monotone():
    prob = make_problem(noise=10.0, seed=1, integrator="reference", T=40.0)
    a = ga_optimize(prob, population=10, generations=8, seed=7)
    b = ga_optimize(prob, population=10, generations=8, seed=7)
    assert np.array_equal(a.theta_hat, b.theta_hat)
    strip = lambda h: [row[:-2] + row[-1:] for row in h]
    assert strip(a.history) == strip(b.history)
    best = [row[1] for row in a.history]
    assert np.all(np.diff(best) >= 0)  # log-likelihood objective, maximized
    assert prob.interior(a.theta_hat)
    np.testing.assert_allclose(a.sigma_hat, a.sigma_hat.T)
    assert np.all(np.linalg.eigvalsh(a.sigma_hat) >= 0)


def test_ga_small_population_rejected(noiseless):
    with pytest.raises(ValueError):
        ga_optimize(noiseless, population=5)


def test_ga_degenerate_box_returns_truth():
    delta = 1e-7
    prob = make_problem(T=40.0, lower=TRUTH - delta, upper=TRUTH + delta, kind="ls")
    res = ga_optimize(prob, population=10, generations=3, seed=0)
    np.testing.assert_allclose(res.theta_hat, TRUTH, atol=2 * delta)


def test_ga_log(tmp_path):
    prob = make_problem(noise=10.0, seed=1, T=20.0)
    res = ga_optimize(prob, population=10, generations=3, seed=2)
    write_ga_log(tmp_path / "log.csv", res, prob.free)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "generation,best_objective,epsilon0,p,elapsed_seconds,evaluations"
    assert len(lines) == 1 + len(res.history)


# intervals

def quadratic_loglik(center, cov):
    P = np.linalg.inv(cov)
    return lambda th: -0.5 * float((th - center) @ P @ (th - center))


def test_wald_on_quadratic():
    cov = np.array([[0.04, 0.01], [0.01, 0.09]])
    c = np.array([1.0, 2.0])
    iv = wald_bounds(quadratic_loglik(c, cov), c, [1e-3, 1e-3], 0.025)
    half = stats.norm.ppf(0.975) * np.sqrt(np.diag(cov))
    np.testing.assert_allclose(iv.upper - c, half, rtol=1e-6)
    np.testing.assert_allclose(c - iv.lower, iv.upper - c, rtol=0, atol=1e-15)


def test_wald_tau_half_degenerate():
    c = np.array([1.0, 2.0])
    iv = wald_bounds(quadratic_loglik(c, np.eye(2)), c, [1e-3, 1e-3], 0.5)
    np.testing.assert_array_equal(iv.lower, c)
    np.testing.assert_array_equal(iv.upper, c)


def test_wald_not_positive_definite_flagged():
    iv = wald_bounds(lambda th: float(th @ th), np.zeros(2), [1e-3, 1e-3], 0.025)
    assert not iv.ok and np.all(np.isnan(iv.lower))


def test_profile_equals_wald_on_quadratic():
    cov = np.array([[0.04, 0.01], [0.01, 0.09]])
    c = np.array([1.0, 2.0])
    ll = quadratic_loglik(c, cov)
    wald = wald_bounds(ll, c, [1e-3, 1e-3], 0.05)
    prof = profile_bounds(ll, c, [-2, -2], [4, 5], 0.05, burst_generations=60,
                          burst_population=20, seed=0)
    assert prof.ok
    np.testing.assert_allclose(prof.upper - c, wald.upper - c, rtol=0.01)
    np.testing.assert_allclose(c - prof.lower, c - wald.lower, rtol=0.01)


def test_profile_tau_half_collapses():
    c = np.array([1.0, 2.0])
    prof = profile_bounds(quadratic_loglik(c, np.eye(2)), c, [-2, -2], [4, 5], 0.5)
    np.testing.assert_array_equal(prof.lower, c)


def test_profile_no_crossing_flagged():
    c = np.array([1.0])
    prof = profile_bounds(quadratic_loglik(c, np.eye(1) * 100.0), c, [0.5], [1.5], 0.025)
    assert len(prof.flags) == 2
    assert prof.lower[0] == pytest.approx(0.5) and prof.upper[0] == pytest.approx(1.5)


def test_wald_shrinks_with_more_data():
    widths = []
    for T in (10.0, 100.0):
        prob = make_problem(noise=10.0, seed=2, integrator="reference", T=T)
        iv = wald_interval(TRUTH, prob, 0.025)
        widths.append(iv.upper - iv.lower)
    assert np.all(widths[1] < widths[0])


def test_intervals_cover_truth_with_small_noise():
    prob = make_problem(noise=1.0, seed=4, integrator="reference")
    res = ga_optimize(prob, population=20, generations=30, seed=0)
    wald = wald_interval(res.theta_hat, prob, 0.025)
    assert wald.ok
    assert np.all(wald.lower <= TRUTH) and np.all(TRUTH <= wald.upper)
    prof = profile_interval(res.theta_hat, prob, 0.025, burst_generations=10,
                            burst_population=10, initial_step=wald.upper - res.theta_hat)
    assert prof.ok
    assert np.all(prof.lower <= TRUTH) and np.all(TRUTH <= prof.upper)
