"""Optimal spraying schedules with piecewise-constant (collocated) controls.

Each control channel is active on windows ``[k (h_i + n), k (h_i + n) + n)``
and takes one constant value per window.  The solver alternates a forward
state pass, a backward costate pass and a projected update of the window
values, with a quadratic line search on the step length.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .integrate import IntegrationError, TimeGrid, Trajectory, control_steps
from .model import X0_TABLE1, ModelParams, SolverError

__all__ = [
    "Weights",
    "TABLE1_WEIGHTS",
    "ControlSchedule",
    "ControlSolution",
    "objective",
    "collocate",
    "saturate",
    "adjoint_sweep",
    "gradient_control",
    "window_gradient",
    "augmented_field",
    "integrate_augmented",
    "solve_ocp",
    "write_control_csv",
]

_WINDOW_TOL = 1e-9


@dataclass(frozen=True)
class Weights:
    state: tuple = (1.0, 1.0, 1.0, 1.0, 2.0)
    control: tuple = (4000.0, 4000.0)

    def __post_init__(self):
        if len(self.state) != 5 or len(self.control) != 2:
            raise ValueError("weights need 5 state and 2 control entries")
        if min(self.state) < 0 or min(self.control) < 0:
            raise ValueError("weights must be nonnegative")

    @property
    def wx(self) -> np.ndarray:
        return np.asarray(self.state, dtype=float)

    @property
    def wu(self) -> np.ndarray:
        return np.asarray(self.control, dtype=float)

    def scaled(self, c: float) -> "Weights":
        return Weights(tuple(c * w for w in self.state), tuple(c * w for w in self.control))


TABLE1_WEIGHTS = Weights()


@dataclass
class ControlSchedule:
    """Window layout plus one value per window and channel."""

    h: tuple
    n: float
    a: tuple
    T: float
    values: list = field(default=None)

    def __post_init__(self):
        self.h = tuple(float(v) for v in self.h)
        self.a = tuple(float(v) for v in self.a)
        if len(self.h) != 2 or len(self.a) != 2:
            raise ValueError("h and a need one entry per channel")
        if not self.n > 0 or min(self.h) < 0 or min(self.a) < 0 or not self.T > 0:
            raise ValueError("need n > 0, h >= 0, a >= 0, T > 0")
        counts = [len(self.windows(i)) for i in range(2)]
        if self.values is None:
            self.values = [np.zeros(c) for c in counts]
        else:
            self.values = [np.asarray(v, dtype=float).copy() for v in self.values]
            if [v.size for v in self.values] != counts:
                raise ValueError(f"expected {counts} window values, got "
                                 f"{[v.size for v in self.values]}")

    @classmethod
    def constant(cls, h, n, a, T, fraction: float = 0.5) -> "ControlSchedule":
        s = cls(h, n, a, T)
        s.values = [np.full(v.size, fraction * s.a[i]) for i, v in enumerate(s.values)]
        return s

    def windows(self, channel: int) -> np.ndarray:
        """``[start, end)`` pairs for a channel, truncated at ``T``."""
        spacing = self.h[channel] + self.n
        starts = []
        k = 0
        while k * spacing < self.T - _WINDOW_TOL:
            starts.append(k * spacing)
            k += 1
        s = np.array(starts)
        return np.column_stack([s, np.minimum(s + self.n, self.T)])

    def with_values(self, values) -> "ControlSchedule":
        return replace(self, values=[np.asarray(v, dtype=float) for v in values])

    def evaluate(self, t: float) -> np.ndarray:
        out = np.zeros(2)
        for i in range(2):
            w = self.windows(i)
            hit = np.nonzero((t >= w[:, 0] - _WINDOW_TOL) & (t < w[:, 1] - _WINDOW_TOL))[0]
            if hit.size:
                out[i] = self.values[i][hit[0]]
        return out

    def step_windows(self, grid: TimeGrid) -> np.ndarray:
        """Window index owning each step (by its left end), ``-1`` if none; shape (2, n_steps)."""
        t = grid.times[:-1]
        idx = np.full((2, t.size), -1, dtype=int)
        for i in range(2):
            for k, (s, e) in enumerate(self.windows(i)):
                idx[i, (t >= s - _WINDOW_TOL) & (t < e - _WINDOW_TOL)] = k
        return idx

    def steps(self, grid: TimeGrid) -> np.ndarray:
        idx = self.step_windows(grid)
        U = np.zeros((grid.n_steps, 2))
        for i in range(2):
            on = idx[i] >= 0
            U[on, i] = self.values[i][idx[i, on]]
        return U

    def total_mass(self) -> np.ndarray:
        """Integral of each channel over ``[0, T]``."""
        return np.array([float(np.dot(self.values[i], np.diff(self.windows(i), axis=1)[:, 0]))
                         for i in range(2)])

    def flat(self) -> np.ndarray:
        return np.concatenate(self.values)

    def from_flat(self, v) -> "ControlSchedule":
        k = self.values[0].size
        return self.with_values([v[:k], v[k:]])


@dataclass
class ControlSolution:
    schedule: ControlSchedule
    state: Trajectory
    objective: float
    iterations: int
    objective_history: list
    status: str = "converged"
    uncontrolled_objective: float | None = None


def saturate(u, a) -> np.ndarray:
    """Componentwise clamp to ``[0, a]`` (last axis indexes the channel)."""
    return np.maximum(0.0, np.minimum(np.asarray(a, dtype=float), np.asarray(u, dtype=float)))


def _saturate_schedule(s: ControlSchedule) -> ControlSchedule:
    return s.with_values([np.clip(s.values[i], 0.0, s.a[i]) for i in range(2)])


def objective(state: Trajectory, schedule, weights: Weights) -> float:
    """Quadratic cost ``(1 / 2T) * integral(sum wx x^2 + sum wu u^2)``.

    The state part uses the trapezoid rule on the grid; the piecewise-constant
    control part is integrated exactly step by step.
    """
    grid = state.grid
    U = control_steps(schedule, grid)
    xs = (state.states ** 2) @ weights.wx
    state_part = float(np.sum(0.5 * (xs[1:] + xs[:-1]) * np.diff(grid.times)))
    control_part = float(np.sum(((U ** 2) @ weights.wu) * np.diff(grid.times)))
    return (state_part + control_part) / (2 * grid.T)


def _gauss_step_means(u, grid):
    t = grid.times
    h = np.diff(t)
    off = 0.5 - math.sqrt(3) / 6
    out = np.empty((grid.n_steps, 2))
    for j in range(grid.n_steps):
        out[j] = 0.5 * (np.asarray(u(t[j] + off * h[j])) + np.asarray(u(t[j] + (1 - off) * h[j])))
    return out


def collocate(u, template: ControlSchedule, grid: TimeGrid) -> ControlSchedule:
    """Best piecewise-constant (in L2) fit of ``u`` on the template's windows.

    ``u`` is a callable ``t -> (u1, u2)`` or an array of per-step means of
    shape ``(n_steps, 2)``.  Each window value is the mean of ``u`` over it.
    """
    steps = _gauss_step_means(u, grid) if callable(u) else np.asarray(u, dtype=float)
    if steps.shape != (grid.n_steps, 2):
        raise ValueError(f"expected per-step control of shape {(grid.n_steps, 2)}")
    idx = template.step_windows(grid)
    h = np.diff(grid.times)
    values = []
    for i in range(2):
        k = len(template.values[i])
        on = idx[i] >= 0
        num = np.bincount(idx[i, on], weights=steps[on, i] * h[on], minlength=k)
        den = np.bincount(idx[i, on], weights=h[on], minlength=k)
        values.append(np.divide(num, den, out=np.zeros(k), where=den > 0))
    return template.with_values(values)


def _forward(x0, U, params, grid):
    states, status, step = _kernels.ll_path(np.asarray(x0, dtype=float), U,
                                            params.as_array(), grid.times)
    if status != _kernels.OK:
        raise IntegrationError(f"forward pass failed at step {step}", step=step)
    return Trajectory(grid, states)


def adjoint_sweep(state: Trajectory, schedule, params: ModelParams, weights: Weights,
                  grid: TimeGrid | None = None) -> np.ndarray:
    """Costates ``z_1..z_6`` on every grid point, shape ``(n_steps + 1, 6)``.

    Integrated backward from ``z(T) = 0`` with the local-linearization step
    applied to the reversed-time linear system.
    """
    grid = state.grid if grid is None else grid
    U = control_steps(schedule, grid)
    z, status, step = _kernels.adjoint_path(state.states, U, params.as_array(),
                                            grid.times, weights.wx)
    if status != _kernels.OK:
        raise SolverError(f"non-finite costate at step {step}", step=step)
    return z


def gradient_control(states: np.ndarray, adjoints: np.ndarray, params: ModelParams,
                     weights: Weights) -> np.ndarray:
    """Pointwise solution of the gradient equations, shape ``(n_points, 2)``."""
    wu = weights.wu
    if np.any(wu <= 0):
        raise ValueError("control weights must be > 0")
    y, z = np.asarray(states), np.asarray(adjoints)
    u1 = (params.q * y[:, 0] * z[:, 0] + y[:, 2] * z[:, 2]) / wu[0]
    u2 = (params.r * y[:, 2] * z[:, 2] + params.s * y[:, 3] * z[:, 3]
          + y[:, 4] * z[:, 4]) / wu[1]
    return np.column_stack([u1, u2])


def _step_means(pointwise):
    return 0.5 * (pointwise[1:] + pointwise[:-1])


def window_gradient(schedule: ControlSchedule, ustar_steps: np.ndarray, weights: Weights,
                    grid: TimeGrid) -> np.ndarray:
    """Derivative of the objective with respect to every window value (flat).

    Per step the derivative is ``(dt / T) * wu * (U - u*)`` with ``u*`` the
    step mean of :func:`gradient_control`; steps are summed over each window.
    """
    U = schedule.steps(grid)
    h = np.diff(grid.times)
    per_step = (h[:, None] / grid.T) * weights.wu * (U - ustar_steps)
    idx = schedule.step_windows(grid)
    out = []
    for i in range(2):
        k = len(schedule.values[i])
        on = idx[i] >= 0
        out.append(np.bincount(idx[i, on], weights=per_step[on, i], minlength=k))
    return np.concatenate(out)


def augmented_field(y, u, params: ModelParams) -> np.ndarray:
    """Autonomous six-state field: the population field driven by ``y6`` as time, ``y6' = 1``."""
    y = np.asarray(y, dtype=float)
    u1, u2 = (0.0, 0.0) if u is None else (float(u[0]), float(u[1]))
    out = np.empty(6)
    out[:5] = _kernels.field(float(y[5]), y[:5].copy(), u1, u2, params.as_array())
    out[5] = 1.0
    return out


def integrate_augmented(x0, schedule, params: ModelParams, grid: TimeGrid,
                        substeps: int = 10) -> np.ndarray:
    """RK4 on the six-state autonomous system; returns shape ``(n_steps + 1, 6)``."""
    U = control_steps(schedule, grid)
    t = grid.times
    y = np.concatenate([np.asarray(x0, dtype=float), [0.0]])
    out = np.empty((grid.n_steps + 1, 6))
    out[0] = y
    for j in range(grid.n_steps):
        h = (t[j + 1] - t[j]) / substeps
        u = U[j]
        for _ in range(substeps):
            k1 = augmented_field(y, u, params)
            k2 = augmented_field(y + 0.5 * h * k1, u, params)
            k3 = augmented_field(y + 0.5 * h * k2, u, params)
            k4 = augmented_field(y + h * k3, u, params)
            y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[j + 1] = y
    return out


@dataclass
class _Iterate:
    schedule: ControlSchedule
    state: Trajectory
    J: float
    z: np.ndarray = None
    ustar: np.ndarray = None  # per-step means


def _evaluate(schedule, x0, params, weights, grid, with_adjoint=True):
    U = schedule.steps(grid)
    state = _forward(x0, U, params, grid)
    it = _Iterate(schedule, state, objective(state, U, weights))
    if with_adjoint:
        it.z = adjoint_sweep(state, U, params, weights, grid)
        it.ustar = _step_means(gradient_control(state.states, it.z, params, weights))
    return it


def solve_ocp(params: ModelParams, weights: Weights, template: ControlSchedule,
              grid: TimeGrid, x0=X0_TABLE1, tol: float = 1e-6, step: float = 1.0,
              min_step: float = 1e-8, max_iter: int = 500, initial=None) -> ControlSolution:
    """Projected-gradient sweep on the window values with a quadratic line search.

    The search direction is ``collocate(u*) - v`` (the negative gradient in the
    control-weighted metric); updates are saturated to ``[0, a]``.  Stops when
    the objective change drops below ``tol`` or the step length below
    ``min_step``; the objective history never increases.
    """
    if not tol > 0 or not step > min_step > 0:
        raise ValueError("need tol > 0 and step > min_step > 0")
    if initial is None:
        initial = ControlSchedule.constant(template.h, template.n, template.a, template.T)
    cur = _evaluate(_saturate_schedule(collocate(initial.steps(grid), template, grid)),
                    x0, params, weights, grid)
    J0 = objective(_forward(x0, np.zeros((grid.n_steps, 2)), params, grid), None, weights)
    history = [cur.J]
    lam = step
    a_flat = np.concatenate([np.full(len(cur.schedule.values[i]), template.a[i])
                             for i in range(2)])
    status = "max_iter"
    k = 0

    def trial(v, d, s):
        return _evaluate(cur.schedule.from_flat(np.clip(v + s * d, 0.0, a_flat)),
                         x0, params, weights, grid)

    while k < max_iter:
        v = cur.schedule.flat()
        d = collocate(cur.ustar, template, grid).flat() - v
        grad = window_gradient(cur.schedule, cur.ustar, weights, grid)
        d_proj = np.where(((v <= 0) & (d < 0)) | ((v >= a_flat) & (d > 0)), 0.0, d)
        slope = float(grad @ d_proj)
        new = trial(v, d, lam)
        dJ = new.J - cur.J
        done = abs(dJ) < tol
        while dJ >= 0 and not done:
            # quadratic model through phi(0), phi'(0), phi(lam)
            curv = (new.J - cur.J - slope * lam) / lam ** 2
            s = -slope / (2 * curv) if curv > 0 and slope < 0 else 0.5 * lam
            lam = min(max(s, 0.1 * lam), 0.5 * lam)
            if lam < min_step:
                status = "terminated on step-length"
                break
            new = trial(v, d, lam)
            dJ = new.J - cur.J
            done = abs(dJ) < tol
        if status == "terminated on step-length":
            break
        k += 1
        if dJ <= 0:
            cur = new
            history.append(cur.J)
        if done:
            status = "converged"
            break
    return ControlSolution(schedule=cur.schedule, state=cur.state, objective=cur.J,
                           iterations=k, objective_history=history, status=status,
                           uncontrolled_objective=J0)


def write_control_csv(path, schedule: ControlSchedule, grid: TimeGrid) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "u1", "u2"])
        for t in grid.times:
            u = schedule.evaluate(t)
            w.writerow([f"{t:.17g}", f"{u[0]:.17g}", f"{u[1]:.17g}"])
