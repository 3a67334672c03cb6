"""Command-line front end: ``aedesdyn {simulate,analyze,estimate,control}``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error.
Each command writes its whole output set into a scratch directory first and
moves it into ``--out`` only on success.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .analyze import find_periodic_orbit, floquet_at_orbit, floquet_at_origin, offspring_grid
from .config import ConfigError, RunConfig, load_config, parse_config
from .control import ControlSchedule, solve_ocp, write_control_csv
from .estimate import (EstimationProblem, ga_optimize, generate_synthetic, profile_interval,
                       wald_interval, write_ga_log)
from .integrate import TimeGrid, integrate_ll, integrate_reference, write_trajectory_csv
from .model import SolverError, offspring_number

__all__ = ["main", "cmd_simulate", "cmd_analyze", "cmd_estimate", "cmd_control"]

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _grid(cfg: RunConfig) -> TimeGrid:
    return TimeGrid.from_horizon(cfg.T, cfg.dt)


def _template(cfg: RunConfig) -> ControlSchedule:
    return ControlSchedule(cfg["h"], cfg["n"], cfg["a"], cfg.T)


def cmd_simulate(cfg: RunConfig, out: Path) -> None:
    grid = _grid(cfg)
    u = np.array(cfg["simulate.u"])
    schedule = None
    if np.any(u != 0):
        if np.any(u < 0) or np.any(u > np.array(cfg["a"])):
            raise ConfigError("simulate.u must lie within [0, a]")
        tpl = _template(cfg)
        schedule = tpl.with_values([np.full(len(v), u[i]) for i, v in enumerate(tpl.values)])
    integrate = integrate_ll if cfg["simulate.integrator"] == "ll" else integrate_reference
    write_trajectory_csv(out / "trajectory.csv", integrate(cfg.x0, schedule, cfg.params, grid))


def cmd_analyze(cfg: RunConfig, out: Path) -> None:
    prm = cfg.params
    grid = offspring_grid(cfg["analyze.p_range"], cfg["analyze.epsilon_range"], prm,
                          cfg["analyze.resolution"])
    grid.write_csv(out / "offspring_grid.csv")
    r = prm.rates()
    R = offspring_number(r.d3, r.d4, r)
    origin = floquet_at_origin(prm, dt=cfg["analyze.floquet_dt"])
    verdict = ("marginal" if origin.marginal
               else "asymptotically stable" if origin.stable else "unstable")
    lines = [f"offspring number R = {R:.6f}",
             f"trivial solution {verdict}",
             "",
             origin.report("Floquet analysis at the trivial solution")]
    if cfg["analyze.orbit"] and R > 1:
        orbit = find_periodic_orbit(prm)
        res = floquet_at_orbit(orbit, prm)
        lines += ["",
                  "periodic orbit x0* = " + ", ".join(f"{v:.10g}" for v in orbit.x0_star),
                  f"shooting residual = {orbit.residual:.3e} after {orbit.iterations} Newton steps",
                  res.report("Floquet analysis at the nontrivial periodic solution")]
    (out / "floquet_report.txt").write_text("\n".join(lines) + "\n")


def cmd_estimate(cfg: RunConfig, out: Path) -> None:
    grid = _grid(cfg)
    data_seed = cfg["estimate.data_seed"] if cfg["estimate.data_seed"] >= 0 else cfg.seed
    obs = generate_synthetic(cfg.params, grid, cfg["estimate.noise_variance"], data_seed,
                             x0=cfg.x0)
    free = cfg["estimate.free"]
    problem = EstimationProblem(cfg.params, free, cfg["estimate.lower"], cfg["estimate.upper"],
                                grid, obs, barrier_weight=cfg["estimate.barrier_weight"],
                                kind=cfg["estimate.kind"], x0=cfg.x0)
    result = ga_optimize(problem, population=cfg["estimate.population"],
                         generations=cfg["estimate.generations"], seed=cfg.seed)
    write_ga_log(out / "ga_log.csv", result, free)

    true = [getattr(cfg.params, k) for k in free]
    lines = [f"objective ({problem.kind}) = {result.objective_value:.10g}",
             f"generations = {result.iterations}, evaluations = {result.evaluations}, "
             f"elapsed = {result.elapsed:.2f} s"]
    for name, est, ref in zip(free, result.theta_hat, true):
        lines.append(f"{name}: estimate {est:.6f} (data generated with {ref:.6f})")
    lines.append("sigma_hat = " + np.array2string(result.sigma_hat, precision=6))
    tau = cfg["estimate.tau"]
    wald = None
    if "wald" in cfg["estimate.intervals"]:
        wald = wald_interval(result.theta_hat, problem, tau)
        lines += _interval_lines("Wald", free, wald, tau)
    if "profile" in cfg["estimate.intervals"]:
        step = None if wald is None or not wald.ok else wald.upper - result.theta_hat
        prof = profile_interval(result.theta_hat, problem, tau,
                                burst_generations=cfg["estimate.profile_generations"],
                                burst_population=cfg["estimate.profile_population"],
                                seed=cfg.seed, initial_step=step)
        lines += _interval_lines("profile", free, prof, tau)
    (out / "estimate_report.txt").write_text("\n".join(lines) + "\n")


def _interval_lines(kind, names, interval, tau):
    out = [f"{kind} interval (tau = {tau}):"]
    for name, lo, hi in zip(names, interval.lower, interval.upper):
        out.append(f"  {name}: [{lo:.6f}, {hi:.6f}]")
    out += [f"  flag: {f}" for f in interval.flags]
    return out


def cmd_control(cfg: RunConfig, out: Path) -> None:
    grid = _grid(cfg)
    sol = solve_ocp(cfg.params, cfg.weights, _template(cfg), grid, x0=cfg.x0,
                    tol=cfg["control.tol"], step=cfg["control.step"],
                    min_step=cfg["control.min_step"], max_iter=cfg["control.max_iter"])
    write_control_csv(out / "control.csv", sol.schedule, grid)
    write_trajectory_csv(out / "trajectory.csv", sol.state)
    mass = sol.schedule.total_mass()
    lines = [f"J(0) = {sol.uncontrolled_objective:.10g}",
             f"J(u_hat) = {sol.objective:.10g}",
             f"status = {sol.status}, iterations = {sol.iterations}",
             f"windows: u1 {len(sol.schedule.values[0])}, u2 {len(sol.schedule.values[1])}",
             f"total mass: u1 {mass[0]:.6g}, u2 {mass[1]:.6g}",
             "iterate,J"]
    lines += [f"{k},{J:.17g}" for k, J in enumerate(sol.objective_history)]
    (out / "control_report.txt").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "simulate": (cmd_simulate, "integrate the model and write trajectory.csv"),
    "analyze": (cmd_analyze, "offspring-number grid and Floquet stability report"),
    "estimate": (cmd_estimate, "fit parameters to synthetic data with the genetic algorithm"),
    "control": (cmd_control, "solve the optimal spraying problem"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aedesdyn",
        description="Periodic mosquito population model: simulation, stability, "
                    "estimation and optimal control.",
        epilog="exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="key = value configuration file (defaults to Table 1 values)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=0, help="random seed (estimate)")
        p.add_argument("--dt", type=float, default=None, help="grid step, overrides the config")
    return parser


def _publish(scratch: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(scratch.iterdir()):
        os.replace(f, out / f.name)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config is not None else parse_config("")
        cfg.seed = args.seed
        if args.dt is not None:
            cfg = cfg.with_dt(args.dt)
    except ConfigError as exc:
        print(f"aedesdyn: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"aedesdyn: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO

    run = COMMANDS[args.command][0]
    scratch = None
    try:
        parent = args.out.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        scratch = Path(tempfile.mkdtemp(prefix=".aedesdyn-", dir=parent))
        run(cfg, scratch)
        _publish(scratch, args.out)
    except (ConfigError, ValueError) as exc:
        print(f"aedesdyn: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"aedesdyn: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"aedesdyn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if scratch is not None:
            shutil.rmtree(scratch, ignore_errors=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
