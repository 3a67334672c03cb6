"""Stability of the trivial and nontrivial periodic solutions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .integrate import TimeGrid, Trajectory, fundamental_matrix
from .model import ModelParams, SolverError, equilibria, offspring_number

__all__ = [
    "FloquetResult",
    "PeriodicOrbit",
    "MARGINAL_BAND",
    "gamma2_matrix",
    "origin_linearization",
    "floquet_from_monodromy",
    "floquet_at_origin",
    "find_periodic_orbit",
    "floquet_at_orbit",
    "running_average_minimum",
    "OffspringGrid",
    "offspring_grid",
]

MARGINAL_BAND = 1e-9


@dataclass
class FloquetResult:
    monodromy: np.ndarray
    multipliers: np.ndarray
    exponents: np.ndarray
    period: float
    stable: bool
    marginal: bool
    # offspring number with competition-raised larval loss (orbit analysis only)
    criterion: float | None = None

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.multipliers)))

    def report(self, title: str = "Floquet analysis") -> str:
        lines = [title, f"  period: {self.period:.6g} days"]
        for k, (m, e) in enumerate(zip(self.multipliers, self.exponents), 1):
            lines.append(f"  multiplier {k}: {m.real:+.10g} {m.imag:+.10g}i  "
                         f"|m| = {abs(m):.10g}  exponent = {e.real:+.6g} {e.imag:+.6g}i")
        if self.criterion is not None:
            lines.append(f"  sufficient criterion R(d3 + 2 g1 v3min, d4 + 2 g2 v4min) = "
                         f"{self.criterion:.6g}")
        verdict = ("marginal" if self.marginal
                   else "asymptotically stable" if self.stable else "unstable")
        lines.append(f"  verdict: {verdict} (max |m| = {self.spectral_radius:.10g})")
        return "\n".join(lines)


@dataclass
class PeriodicOrbit:
    x0_star: np.ndarray
    residual: float
    orbit: Trajectory
    iterations: int = 0


def gamma2_matrix(params: ModelParams, d3: float | None = None,
                  d4: float | None = None) -> np.ndarray:
    """Constant part of the origin linearization, with optional larval loss rates."""
    r = params.rates()
    d3 = r.d3 if d3 is None else d3
    d4 = r.d4 if d4 is None else d4
    return np.array([
        [-r.d1, 0, 0, 0, r.b1],
        [0, -r.d2, 0, 0, r.b2],
        [r.b3, 0, -d3, 0, 0],
        [0, r.b4, 0, -d4, 0],
        [0, 0, r.b5, r.b6, -r.d5],
    ], dtype=float)


def origin_linearization(params: ModelParams):
    prm = params.as_array()
    zero = np.zeros(5)
    return lambda t: _kernels.jac(float(t), zero, 0.0, 0.0, prm)


def floquet_from_monodromy(Z: np.ndarray, period: float,
                           criterion: float | None = None) -> FloquetResult:
    try:
        mult = np.linalg.eigvals(Z)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"eigenvalue computation failed: {exc}") from exc
    mult = mult[np.argsort(-np.abs(mult))]
    with np.errstate(divide="ignore"):
        expo = np.log(mult.astype(complex)) / period
    rho = float(np.max(np.abs(mult)))
    marginal = abs(rho - 1.0) <= MARGINAL_BAND
    return FloquetResult(monodromy=Z, multipliers=mult, exponents=expo, period=period,
                         stable=(rho < 1.0 and not marginal), marginal=marginal,
                         criterion=criterion)


def floquet_at_origin(params: ModelParams, grid: TimeGrid | None = None,
                      dt: float = 0.01) -> FloquetResult:
    """Floquet multipliers of the trivial periodic solution."""
    period = params.period
    Z = fundamental_matrix(origin_linearization(params), period, grid=grid, dt=dt)
    return floquet_from_monodromy(Z, period)


def _period_grid(params, grid, dt):
    if grid is not None and abs(grid.T - params.period) <= 1e-9 * params.period:
        return grid
    if grid is not None:
        dt = grid.dt
    return TimeGrid.covering(params.period, dt)


def find_periodic_orbit(params: ModelParams, guess=None, grid: TimeGrid | None = None,
                        dt: float = 0.1, tol: float = 1e-8, max_iter: int = 50,
                        substeps: int = 10) -> PeriodicOrbit:
    """Shooting for the initial state of the period-``2 pi / sigma`` solution.

    Newton iteration on ``S(x0) = x(period; x0) - x0`` with the Jacobian
    ``Z(period) - id`` taken from the variational equation along the current
    orbit.  The default guess is the positive autonomous equilibrium.
    """
    pgrid = _period_grid(params, grid, dt)
    if guess is None:
        eq = equilibria(params)
        guess = eq[-1]
    x = np.asarray(guess, dtype=float).copy()
    if np.any(x < 0):
        raise ValueError("guess must be componentwise nonnegative")
    prm = params.as_array()
    times = pgrid.times
    projected = False
    res = math.inf
    for it in range(1, max_iter + 1):
        states, Z = _kernels.rk4_variational(x, prm, times, substeps)
        S = states[-1] - x
        res = float(np.linalg.norm(S))
        if not np.isfinite(res):
            raise SolverError("shooting diverged", residual=res)
        if res < tol:
            orbit = Trajectory(pgrid, states)
            return PeriodicOrbit(x0_star=x, residual=res, orbit=orbit, iterations=it - 1)
        try:
            dx = np.linalg.solve(Z - np.eye(5), -S)
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular shooting Jacobian", residual=res) from exc
        x = x + dx
        if np.any(x < 0):
            if projected:
                raise SolverError("shooting left the positive orthant twice", residual=res)
            projected = True
            x = np.maximum(x, 0.0)
    raise SolverError(f"shooting did not converge in {max_iter} iterations", residual=res)


def running_average_minimum(times: np.ndarray, values: np.ndarray) -> float:
    """min over t in (0, T] of (1/t) * integral_0^t values (trapezoid)."""
    inc = 0.5 * (values[1:] + values[:-1]) * np.diff(times)
    avg = np.cumsum(inc) / times[1:]
    return float(np.min(avg))


def floquet_at_orbit(orbit: PeriodicOrbit, params: ModelParams,
                     substeps: int = 10) -> FloquetResult:
    """Multipliers of the linearization along a periodic orbit plus the
    competition-adjusted offspring-number criterion."""
    times = orbit.orbit.times
    states, Z = _kernels.rk4_variational(np.asarray(orbit.x0_star, dtype=float),
                                         params.as_array(), times, substeps)
    v3 = running_average_minimum(times, states[:, 2])
    v4 = running_average_minimum(times, states[:, 3])
    r = params.rates()
    crit = offspring_number(r.d3 + 2 * params.gamma1 * v3, r.d4 + 2 * params.gamma2 * v4, r)
    return floquet_from_monodromy(Z, orbit.orbit.grid.T, criterion=crit)


@dataclass
class OffspringGrid:
    p: np.ndarray
    epsilon: np.ndarray
    R: np.ndarray  # shape (len(p), len(epsilon))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p", "epsilon", "R"])
            for i, p in enumerate(self.p):
                for j, e in enumerate(self.epsilon):
                    w.writerow([f"{p:.17g}", f"{e:.17g}", f"{self.R[i, j]:.17g}"])


def offspring_grid(p_range, epsilon_range, params: ModelParams,
                   resolution: int) -> OffspringGrid:
    """Offspring number over a ``resolution x resolution`` (p, epsilon) grid.

    With ``resolution == 1`` the single cell is the point of ``params`` itself.
    """
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if resolution == 1:
        ps, es = np.array([params.p]), np.array([params.epsilon])
    else:
        ps = np.linspace(p_range[0], p_range[1], resolution)
        es = np.linspace(epsilon_range[0], epsilon_range[1], resolution)
    if ps.min() < 0 or ps.max() > 1 or es.min() <= 0:
        raise ValueError("p must lie in [0, 1] and epsilon in (0, inf)")
    base = params.rates()
    R = np.empty((ps.size, es.size))
    for i, p in enumerate(ps):
        for j, e in enumerate(es):
            r = replace(base, b1=e * p, b2=e * (1 - p))
            R[i, j] = offspring_number(r.d3, r.d4, r)
    return OffspringGrid(ps, es, R)
