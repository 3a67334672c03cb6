"""Fixed-grid integrators: local linearization, RK4 reference, fundamental matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import _kernels
from .model import ModelParams, SolverError

__all__ = [
    "TimeGrid",
    "Trajectory",
    "IntegrationError",
    "matrix_exponential",
    "ll_step",
    "integrate_ll",
    "integrate_reference",
    "fundamental_matrix",
    "control_steps",
    "write_trajectory_csv",
    "read_trajectory_csv",
]


class IntegrationError(SolverError):
    """Raised when a state leaves the positive orthant beyond roundoff or blows up."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_j = j * dt``, ``j = 0..n_steps``, ending at ``T``."""

    dt: float
    n_steps: int
    T: float

    def __post_init__(self):
        if not self.dt > 0 or self.n_steps < 1:
            raise ValueError("grid needs dt > 0 and at least one step")
        if abs(self.n_steps * self.dt - self.T) > 1e-12 * abs(self.T):
            raise ValueError(f"n_steps * dt = {self.n_steps * self.dt!r} does not match T = {self.T!r}")

    @classmethod
    def from_horizon(cls, T: float, dt: float) -> "TimeGrid":
        """Grid with the given step; ``T`` must be a whole number of steps."""
        n = int(round(T / dt))
        if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
            raise ValueError(f"T = {T} is not a multiple of dt = {dt}")
        return cls(dt=T / n, n_steps=n, T=float(T))

    @classmethod
    def covering(cls, T: float, max_dt: float) -> "TimeGrid":
        """Smallest uniform grid over ``[0, T]`` whose step does not exceed ``max_dt``."""
        n = max(1, math.ceil(T / max_dt - 1e-9))
        return cls(dt=T / n, n_steps=n, T=float(T))

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def aggregate(self) -> np.ndarray:
        return self.states.sum(axis=1)


def matrix_exponential(M) -> np.ndarray:
    """exp(M) by diagonal Pade(6, 6) approximation with scaling and squaring."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix_exponential needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix_exponential: non-finite entries")
    return _kernels.expm(np.ascontiguousarray(M))


def control_steps(schedule, grid: TimeGrid) -> np.ndarray:
    """Per-step control array of shape ``(n_steps, 2)``.

    ``schedule`` may be ``None`` (no control), an array of that shape, or any
    object exposing ``steps(grid)`` such as :class:`~aedesdyn.control.ControlSchedule`.
    """
    if schedule is None:
        return np.zeros((grid.n_steps, 2))
    if hasattr(schedule, "steps"):
        return schedule.steps(grid)
    U = np.asarray(schedule, dtype=float)
    if U.shape != (grid.n_steps, 2):
        raise ValueError(f"control array must have shape {(grid.n_steps, 2)}, got {U.shape}")
    return np.ascontiguousarray(U)


def ll_step(t_j: float, x_j, u, params: ModelParams, dt: float) -> np.ndarray:
    """One local-linearization step: ``x + (exp(J dt) - id) J^{-1} f``."""
    if not dt > 0:
        raise ValueError("dt must be > 0")
    u1, u2 = (0.0, 0.0) if u is None else (float(u[0]), float(u[1]))
    return _kernels.ll_step(float(t_j), np.asarray(x_j, dtype=float), u1, u2,
                            params.as_array(), float(dt))


def _finish(states, status, step, name):
    if status == _kernels.NEGATIVE:
        raise IntegrationError(f"{name}: negative state beyond tolerance at step {step}",
                               step=step)
    if status == _kernels.NONFINITE:
        raise IntegrationError(f"{name}: non-finite state at step {step}", step=step)
    return states


def _initial(x0):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (5,) or np.any(x0 < 0) or not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be 5 finite nonnegative numbers")
    return x0


def integrate_ll(x0, schedule, params: ModelParams, grid: TimeGrid) -> Trajectory:
    U = control_steps(schedule, grid)
    states, status, step = _kernels.ll_path(_initial(x0), U, params.as_array(), grid.times)
    return Trajectory(grid, _finish(states, status, step, "integrate_ll"))


def integrate_reference(x0, schedule, params: ModelParams, grid: TimeGrid,
                        substeps: int = 10) -> Trajectory:
    """Classical RK4 at ``dt / substeps``, reported on the grid."""
    U = control_steps(schedule, grid)
    states, status, step = _kernels.rk4_path(_initial(x0), U, params.as_array(),
                                             grid.times, substeps)
    return Trajectory(grid, _finish(states, status, step, "integrate_reference"))


_GAUSS_OFFSET = 0.5 - math.sqrt(3) / 6


def fundamental_matrix(W: Callable[[float], np.ndarray], period: float,
                       grid: TimeGrid | None = None, dt: float = 0.01) -> np.ndarray:
    """Monodromy ``Z(period, 0)`` of ``Z' = W(t) Z``, ``Z(0) = id``.

    Each step applies the exponential of the fourth-order Magnus generator
    built from two Gauss points.  ``grid`` (if given) must span exactly one
    period; otherwise a grid with step at most ``dt`` is used.
    """
    if grid is None:
        grid = TimeGrid.covering(period, dt)
    elif abs(grid.T - period) > 1e-9 * period:
        raise ValueError("grid must span exactly one period")
    t = grid.times
    n = np.asarray(W(0.0)).shape[0]
    Z = np.eye(n)
    for j in range(grid.n_steps):
        h = t[j + 1] - t[j]
        A1 = np.asarray(W(t[j] + _GAUSS_OFFSET * h), dtype=float)
        A2 = np.asarray(W(t[j] + (1 - _GAUSS_OFFSET) * h), dtype=float)
        omega = 0.5 * h * (A1 + A2) + (math.sqrt(3) / 12) * h * h * (A2 @ A1 - A1 @ A2)
        Z = matrix_exponential(omega) @ Z
    return Z


def write_trajectory_csv(path, trajectory: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x1", "x2", "x3", "x4", "x5"])
        for t, x in zip(trajectory.times, trajectory.states):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in x])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(times, states)`` from a trajectory CSV."""
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]
