"""Periodic mosquito population dynamics: simulation, stability, estimation, control."""

from .model import TABLE1, X0_TABLE1, ModelParams, SolverError, offspring_number
from .integrate import TimeGrid, Trajectory, integrate_ll, integrate_reference
from .control import ControlSchedule, Weights, solve_ocp

__all__ = [
    "TABLE1",
    "X0_TABLE1",
    "ModelParams",
    "SolverError",
    "offspring_number",
    "TimeGrid",
    "Trajectory",
    "integrate_ll",
    "integrate_reference",
    "ControlSchedule",
    "Weights",
    "solve_ocp",
]

__version__ = "0.1.0"
