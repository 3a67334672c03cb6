"""Recovery of model parameters from aggregate population counts.

Least-squares and profiled Gaussian log-likelihood objectives (each with a
log-barrier keeping the search inside its box), a real-coded genetic
algorithm, and Wald / profile-likelihood confidence intervals.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .integrate import TimeGrid, integrate_reference, integrate_ll
from .model import X0_TABLE1, ModelParams, SolverError

__all__ = [
    "ObservationSet",
    "EstimationProblem",
    "EstimationResult",
    "Interval",
    "LikelihoodTerms",
    "total_population",
    "generate_synthetic",
    "refine",
    "residuals",
    "barrier",
    "ls_objective",
    "log_likelihood",
    "mle_objective",
    "genetic_minimize",
    "ga_optimize",
    "wald_bounds",
    "wald_interval",
    "profile_bounds",
    "profile_interval",
    "write_ga_log",
]

SINGULAR_RIDGE = 1e-12


def total_population(states: np.ndarray) -> np.ndarray:
    """Observation map summing all five classes; returns shape ``(n, 1)``."""
    return states.sum(axis=1, keepdims=True)


@dataclass
class ObservationSet:
    raw_times: np.ndarray
    raw_values: np.ndarray  # (k, m)
    refined: np.ndarray     # (n_steps + 1, m)

    @property
    def m(self) -> int:
        return self.refined.shape[1]


def refine(raw_times, raw_values, grid: TimeGrid) -> np.ndarray:
    """Put raw observations onto every grid point.

    Linear interpolation inside the observed span, last-value extrapolation
    outside it.  Returns shape ``(n_steps + 1, m)``.
    """
    t = np.asarray(raw_times, dtype=float)
    v = np.asarray(raw_values, dtype=float)
    if t.size == 0:
        raise ValueError("refine: empty observation set")
    if t.size < 2:
        raise ValueError("refine: need at least two observations")
    if v.ndim == 1:
        v = v[:, None]
    order = np.argsort(t, kind="stable")
    t, v = t[order], v[order]
    g = grid.times
    return np.column_stack([np.interp(g, t, v[:, k]) for k in range(v.shape[1])])


def generate_synthetic(params: ModelParams, grid: TimeGrid, noise_variance: float,
                       seed: int, x0=X0_TABLE1,
                       aggregator: Callable = total_population,
                       integrator: str = "reference") -> ObservationSet:
    """Noisy aggregate observations of the uncontrolled model on every grid point.

    The path comes from the RK4 reference integrator by default
    (``integrator="ll"`` uses the local-linearization scheme instead).
    """
    if noise_variance < 0:
        raise ValueError("noise_variance must be >= 0")
    run = integrate_reference if integrator == "reference" else integrate_ll
    clean = aggregator(run(x0, None, params, grid).states)
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, math.sqrt(noise_variance), size=clean.shape)
    return ObservationSet(raw_times=grid.times, raw_values=noisy, refined=noisy.copy())


@dataclass
class EstimationProblem:
    base: ModelParams
    free: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    grid: TimeGrid
    observation: ObservationSet
    barrier_weight: float = 1e-4
    kind: str = "mle"
    x0: np.ndarray = field(default_factory=lambda: X0_TABLE1.copy())
    aggregator: Callable = total_population

    def __post_init__(self):
        self.free = tuple(self.free)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.kind not in ("ls", "mle"):
            raise ValueError("kind must be 'ls' or 'mle'")
        if not (self.lower.shape == self.upper.shape == (len(self.free),)):
            raise ValueError("bounds must match the free parameters")
        if not np.all(self.lower < self.upper):
            raise ValueError("lower bounds must be below upper bounds")
        if not self.barrier_weight > 0:
            raise ValueError("barrier_weight must be > 0")
        if self.observation.refined.shape[0] != self.grid.n_steps + 1:
            raise ValueError("refined observations must cover every grid point")
        m = self.observation.m
        if not 1 <= m <= 5:
            raise ValueError("observation dimension must be between 1 and 5")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def params_for(self, theta) -> ModelParams:
        return self.base.with_values(**{k: float(v) for k, v in zip(self.free, theta)})

    def interior(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))


@dataclass
class Interval:
    lower: np.ndarray
    upper: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


@dataclass
class EstimationResult:
    theta_hat: np.ndarray
    objective_value: float
    sigma_hat: np.ndarray
    iterations: int
    evaluations: int
    elapsed: float
    history: list[tuple] = field(default_factory=list)
    wald_interval: Interval | None = None
    profile_interval: Interval | None = None


def _path(theta, problem: EstimationProblem) -> np.ndarray:
    prm = problem.params_for(theta).as_array()
    U = np.zeros((problem.grid.n_steps, 2))
    states, status, step = _kernels.ll_path(problem.x0, U, prm, problem.grid.times)
    if status != _kernels.OK:
        raise SolverError(f"integration failed at step {step}", step=step)
    return states


def residuals(theta, problem: EstimationProblem) -> np.ndarray:
    """Observation minus model aggregate at every grid point, shape ``(n+1, m)``."""
    return problem.observation.refined - problem.aggregator(_path(theta, problem))


def barrier(theta, problem: EstimationProblem) -> float:
    """Sum of ``log(theta - l) + log(u - theta)``; ``-inf`` outside the open box."""
    theta = np.asarray(theta, dtype=float)
    if not problem.interior(theta):
        return -math.inf
    return float(np.sum(np.log(theta - problem.lower) + np.log(problem.upper - theta)))


def _feasible(theta, problem):
    if not problem.interior(theta):
        return False
    try:
        problem.params_for(theta)
    except ValueError:
        return False
    return True


def ls_objective(theta, problem: EstimationProblem) -> float:
    """Squared Frobenius residual norm minus the weighted barrier (minimize)."""
    if not _feasible(theta, problem):
        return math.inf
    eps = residuals(theta, problem)
    return float(np.sum(eps * eps)) - problem.barrier_weight * barrier(theta, problem)


@dataclass
class LikelihoodTerms:
    loglik: float
    sigma_hat: np.ndarray
    logdet: float
    mahalanobis_sq: float  # squared 2-norm of the Mahalanobis distance vector
    n_points: int
    m: int
    regularized: bool


def likelihood_from_residuals(eps: np.ndarray) -> LikelihoodTerms:
    """Gaussian log-likelihood with the covariance replaced by its maximizer ``S / N``."""
    eps = np.atleast_2d(eps)
    n, m = eps.shape
    S = eps.T @ eps
    sigma = S / n
    regularized = False
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0 or not np.isfinite(logdet) or np.linalg.cond(sigma) > 1e15:
        sigma = sigma + SINGULAR_RIDGE * np.eye(m)
        sign, logdet = np.linalg.slogdet(sigma)
        regularized = True
    sol = np.linalg.solve(sigma, eps.T)
    maha = float(np.sum(eps.T * sol))
    if not regularized and not math.isclose(maha, m * n, rel_tol=1e-9):
        raise SolverError(f"profiled covariance identity violated: {maha} != {m * n}")
    loglik = -0.5 * m * n * math.log(2 * math.pi) - 0.5 * n * logdet - 0.5 * maha
    return LikelihoodTerms(loglik, sigma, float(logdet), maha, n, m, regularized)


def log_likelihood(theta, problem: EstimationProblem) -> LikelihoodTerms:
    return likelihood_from_residuals(residuals(theta, problem))


def mle_objective(theta, problem: EstimationProblem) -> float:
    """Profiled log-likelihood plus the weighted barrier (maximize)."""
    if not _feasible(theta, problem):
        return -math.inf
    terms = log_likelihood(theta, problem)
    return terms.loglik + problem.barrier_weight * barrier(theta, problem)


def _loss(problem: EstimationProblem) -> Callable[[np.ndarray], float]:
    if problem.kind == "ls":
        return lambda th: ls_objective(th, problem)
    return lambda th: -mle_objective(th, problem)


def genetic_minimize(fun: Callable[[np.ndarray], float], lower, upper, population: int = 60,
                     generations: int = 100, seed: int = 0, rng=None, init=None,
                     tournament: int = 3, blend_alpha: float = 0.5,
                     crossover_rate: float = 0.9, mutation_rate: float = 0.1,
                     mutation_scale: float = 0.02, annealing: float = 0.99,
                     on_generation: Callable | None = None):
    """Real-coded genetic algorithm over a box.

    Tournament selection, BLX-alpha crossover, annealed Gaussian mutation and
    a single elite.  Infeasible points should evaluate to ``inf``.  Returns
    ``(best_x, best_f, evaluations)``.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if population < 2:
        raise ValueError("population must be >= 2")
    rng = np.random.default_rng(seed) if rng is None else rng
    width = upper - lower
    pad = 1e-9 * width
    lo, hi = lower + pad, upper - pad
    k = lower.size

    def sample(count):
        return lo + rng.random((count, k)) * (hi - lo)

    pop = sample(population)
    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=float))
        pop[: len(init)] = np.clip(init, lo, hi)
    fit = np.array([fun(x) for x in pop])
    evaluations = population
    if not np.any(np.isfinite(fit)):
        pop = sample(population)
        fit = np.array([fun(x) for x in pop])
        evaluations += population
        if not np.any(np.isfinite(fit)):
            raise SolverError("genetic algorithm: every candidate is infeasible")
    b = int(np.argmin(fit))
    best_x, best_f = pop[b].copy(), float(fit[b])
    if on_generation is not None:
        on_generation(0, best_x, best_f, evaluations)

    def pick():
        idx = rng.integers(0, population, size=tournament)
        return pop[idx[np.argmin(fit[idx])]]

    for g in range(1, generations + 1):
        sd = mutation_scale * width * annealing ** (g - 1)
        children = [best_x.copy()]
        while len(children) < population:
            a, c = pick(), pick()
            if rng.random() < crossover_rate:
                gam = rng.uniform(-blend_alpha, 1 + blend_alpha, size=(2, k))
                kids = a + gam * (c - a)
            else:
                kids = np.stack([a.copy(), c.copy()])
            for kid in kids:
                mask = rng.random(k) < mutation_rate
                kid = kid + mask * rng.normal(0.0, 1.0, size=k) * sd
                children.append(np.clip(kid, lo, hi))
        pop = np.array(children[:population])
        fit = np.empty(population)
        fit[0] = best_f
        fit[1:] = [fun(x) for x in pop[1:]]
        evaluations += population - 1
        b = int(np.argmin(fit))
        if fit[b] < best_f:
            best_x, best_f = pop[b].copy(), float(fit[b])
        if on_generation is not None:
            on_generation(g, best_x, best_f, evaluations)
    return best_x, best_f, evaluations


def ga_optimize(problem: EstimationProblem, population: int = 60, generations: int = 100,
                seed: int = 0, **ga_options) -> EstimationResult:
    """Fit the free parameters of ``problem`` with :func:`genetic_minimize`.

    ``history`` holds one row per generation:
    ``(generation, best_objective, *theta, elapsed_seconds, evaluations)``,
    with the objective in the problem's own sense (LS value, or the
    log-likelihood objective to be maximized).
    """
    if population < 10:
        raise ValueError("population must be >= 10")
    sign = 1.0 if problem.kind == "ls" else -1.0
    history = []
    start = time.perf_counter()

    def record(g, x, f, evals):
        history.append((g, sign * f, *x.tolist(), time.perf_counter() - start, evals))

    x, f, evals = genetic_minimize(_loss(problem), problem.lower, problem.upper,
                                   population=population, generations=generations,
                                   seed=seed, on_generation=record, **ga_options)
    terms = log_likelihood(x, problem)
    return EstimationResult(theta_hat=x, objective_value=sign * f, sigma_hat=terms.sigma_hat,
                            iterations=generations, evaluations=evals,
                            elapsed=time.perf_counter() - start, history=history)


def write_ga_log(path, result: EstimationResult, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_objective", *names, "elapsed_seconds", "evaluations"])
        for row in result.history:
            g, f, *rest = row
            theta, elapsed, evals = rest[:-2], rest[-2], rest[-1]
            w.writerow([g, f"{f:.17g}", *(f"{v:.17g}" for v in theta),
                        f"{elapsed:.6f}", evals])


def _hessian(fun, x, h):
    k = x.size
    H = np.empty((k, k))
    f0 = fun(x)
    for i in range(k):
        ei = np.zeros(k)
        ei[i] = h[i]
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(k)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (fun(x + ei + ej) - fun(x + ei - ej)
                                 - fun(x - ei + ej) + fun(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def wald_bounds(loglik: Callable, theta_hat, step, tau: float) -> Interval:
    """``theta_hat +- z_{1-tau} sqrt(diag(I^-1))`` with ``I`` the negated
    central-difference Hessian of ``loglik``."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    info = -_hessian(loglik, theta_hat, np.asarray(step, dtype=float))
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        nan = np.full(theta_hat.shape, np.nan)
        return Interval(nan, nan.copy(), ["information matrix not positive definite"])
    half = stats.norm.ppf(1 - tau) * np.sqrt(np.diag(np.linalg.inv(info)))
    return Interval(theta_hat - half, theta_hat + half)


def _problem_loglik(problem):
    def ll(theta):
        if not _feasible(theta, problem):
            return -math.inf
        return log_likelihood(theta, problem).loglik
    return ll


def wald_interval(theta_hat, problem: EstimationProblem, tau: float) -> Interval:
    return wald_bounds(_problem_loglik(problem), theta_hat, 1e-4 * problem.width, tau)


def profile_bounds(loglik: Callable, theta_hat, lower, upper, tau: float,
                   burst_generations: int = 50, burst_population: int = 10,
                   seed: int = 0, initial_step=None, rel_tol: float = 1e-4) -> Interval:
    """Likelihood-ratio interval for each coordinate of ``theta_hat``.

    The bound is where ``2 (l(theta_hat) - max_nuisance l)`` reaches
    ``z_{1-tau}^2``, the one-degree-of-freedom chi-square quantile at level
    ``1 - 2 tau`` (so that a quadratic log-likelihood reproduces the Wald
    interval).  The remaining coordinates are re-optimized by a short GA burst.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    width = upper - lower
    k = theta_hat.size
    crit = float(stats.norm.ppf(1 - tau) ** 2) if tau < 0.5 else 0.0
    l_hat = loglik(theta_hat)
    lo_out, hi_out, flags = theta_hat.copy(), theta_hat.copy(), []
    if crit == 0.0:
        return Interval(lo_out, hi_out, flags)
    rng = np.random.default_rng(seed)

    for i in range(k):
        others = [j for j in range(k) if j != i]
        nuisance = theta_hat[others].copy()

        def excess(v):
            nonlocal nuisance
            if not others:
                val = loglik(np.array([v]))
            else:
                def neg(y):
                    th = theta_hat.copy()
                    th[i] = v
                    th[others] = y
                    out = loglik(th)
                    return -out if np.isfinite(out) else math.inf
                y, f, _ = genetic_minimize(neg, lower[others], upper[others],
                                           population=burst_population,
                                           generations=burst_generations, rng=rng,
                                           init=nuisance)
                nuisance = y
                val = -f
            return 2 * (l_hat - val) - crit

        tol = rel_tol * width[i]
        step0 = (initial_step[i] if initial_step is not None and np.isfinite(initial_step[i])
                 and initial_step[i] > 0 else 0.05 * width[i])
        for direction, edge in ((-1, lower[i]), (+1, upper[i])):
            nuisance = theta_hat[others].copy()
            inner, step = theta_hat[i], step0
            edge_in = edge - direction * 1e-9 * width[i]
            crossed = False
            while True:
                outer = theta_hat[i] + direction * step
                at_edge = direction * (outer - edge_in) >= 0
                if at_edge:
                    outer = edge_in
                if excess(outer) >= 0:
                    crossed = True
                    break
                if at_edge:
                    break
                inner, step = outer, 2 * step
            if crossed:
                while abs(outer - inner) > tol:
                    mid = 0.5 * (inner + outer)
                    if excess(mid) >= 0:
                        outer = mid
                    else:
                        inner = mid
                bound = 0.5 * (inner + outer)
            else:
                side = "lower" if direction < 0 else "upper"
                flags.append(f"parameter {i}: no crossing before the {side} bound")
                bound = edge_in
            if direction < 0:
                lo_out[i] = bound
            else:
                hi_out[i] = bound
    return Interval(lo_out, hi_out, flags)


def profile_interval(theta_hat, problem: EstimationProblem, tau: float,
                     burst_generations: int = 50, burst_population: int = 10,
                     seed: int = 0, initial_step=None) -> Interval:
    return profile_bounds(_problem_loglik(problem), theta_hat, problem.lower, problem.upper,
                          tau, burst_generations=burst_generations,
                          burst_population=burst_population, seed=seed,
                          initial_step=initial_step)
