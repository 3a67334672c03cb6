"""Plain-text run configuration.

One ``key = value`` per line, ``#`` starts a comment.  Model parameters use
their field names (``epsilon``, ``beta1``, ...); vectors are comma separated,
optionally in brackets.  Command options live under a dotted prefix, e.g.
``estimate.free = epsilon0, p``.  Everything has a Table 1 default, so an
empty file is a valid configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .control import Weights
from .model import TABLE1, X0_TABLE1, ModelParams

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based source line when known."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


_PARAM_KEYS = {f.name for f in fields(ModelParams)}

# key -> (kind, default); kinds: float, int, str, bool, vec<n>, list
_OPTIONS = {
    "T": ("float", 151.0),
    "dt": ("float", 0.1),
    "x0": ("vec5", tuple(X0_TABLE1)),
    "h": ("vec2", (9.0, 19.0)),
    "n": ("float", 1.0),
    "a": ("vec2", (1.0, 1.0)),
    "wx": ("vec5", (1.0, 1.0, 1.0, 1.0, 2.0)),
    "wu": ("vec2", (4000.0, 4000.0)),
    "simulate.u": ("vec2", (0.0, 0.0)),
    "simulate.integrator": ("str", "ll"),
    "analyze.resolution": ("int", 41),
    "analyze.p_range": ("vec2", (0.0, 1.0)),
    "analyze.epsilon_range": ("vec2", (0.2, 3.0)),
    "analyze.floquet_dt": ("float", 0.01),
    "analyze.orbit": ("bool", True),
    "estimate.free": ("list", ("epsilon0", "p")),
    "estimate.lower": ("vec", (0.0, 0.0)),
    "estimate.upper": ("vec", (2.9, 1.0)),
    "estimate.kind": ("str", "mle"),
    "estimate.noise_variance": ("float", 10.0),
    "estimate.data_seed": ("int", -1),
    "estimate.population": ("int", 40),
    "estimate.generations": ("int", 50),
    "estimate.barrier_weight": ("float", 1e-4),
    "estimate.tau": ("float", 0.025),
    "estimate.intervals": ("list", ("wald", "profile")),
    "estimate.profile_generations": ("int", 10),
    "estimate.profile_population": ("int", 10),
    "control.tol": ("float", 1e-6),
    "control.step": ("float", 1.0),
    "control.min_step": ("float", 1e-8),
    "control.max_iter": ("int", 500),
}


@dataclass
class RunConfig:
    params: ModelParams = TABLE1
    options: dict = field(default_factory=lambda: {k: v for k, (_, v) in _OPTIONS.items()})
    seed: int = 0

    def __getitem__(self, key):
        return self.options[key]

    @property
    def T(self) -> float:
        return self.options["T"]

    @property
    def dt(self) -> float:
        return self.options["dt"]

    @property
    def x0(self) -> np.ndarray:
        return np.array(self.options["x0"], dtype=float)

    @property
    def weights(self) -> Weights:
        return Weights(tuple(self.options["wx"]), tuple(self.options["wu"]))

    def with_dt(self, dt: float) -> "RunConfig":
        opts = dict(self.options)
        opts["dt"] = float(dt)
        _check_grid(opts, None)
        return replace(self, options=opts)


def _split(text):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
    return [p.strip() for p in text.split(",") if p.strip()]


def _number(text, lineno, key):
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {text!r}", lineno) from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: value must be finite", lineno)
    return v


def _convert(kind, text, lineno, key):
    if kind == "float":
        return _number(text, lineno, key)
    if kind == "int":
        v = _number(text, lineno, key)
        if v != int(v):
            raise ConfigError(f"{key}: expected an integer, got {text!r}", lineno)
        return int(v)
    if kind == "str":
        return text.strip().lower()
    if kind == "bool":
        t = text.strip().lower()
        if t in ("true", "yes", "1", "on"):
            return True
        if t in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}", lineno)
    if kind == "list":
        return tuple(_split(text))
    vals = tuple(_number(p, lineno, key) for p in _split(text))
    if kind.startswith("vec") and kind != "vec" and len(vals) != int(kind[3:]):
        raise ConfigError(f"{key}: expected {kind[3:]} values, got {len(vals)}", lineno)
    return vals


def _check_grid(opts, lines):
    T, dt = opts["T"], opts["dt"]
    where = (lines or {}).get("dt") or (lines or {}).get("T")
    if not (T > 0 and dt > 0):
        raise ConfigError("T and dt must be > 0", where)
    if abs(round(T / dt) * dt - T) > 1e-9 * T:
        raise ConfigError(f"T = {T} is not a whole number of dt = {dt} steps", where)


def parse_config(text: str) -> RunConfig:
    """Parse configuration text; every error carries its line number."""
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", lineno)
        if key in _PARAM_KEYS:
            values[key] = _number(val, lineno, key)
        elif key in _OPTIONS:
            values[key] = _convert(_OPTIONS[key][0], val, lineno, key)
        else:
            raise ConfigError(f"unknown key {key!r}", lineno)
        lines[key] = lineno

    opts = {k: v for k, (_, v) in _OPTIONS.items()}
    opts.update({k: v for k, v in values.items() if k in _OPTIONS})
    _check_grid(opts, lines)

    prm = {k: v for k, v in values.items() if k in _PARAM_KEYS}
    if "sigma" not in prm and "T" in values:
        prm["sigma"] = 2 * math.pi / math.floor(opts["T"] / 4)
    try:
        params = replace(TABLE1, **prm)
    except ValueError as exc:
        first = min((lines[k] for k in prm), default=None)
        raise ConfigError(f"invalid model parameters: {exc}", first) from None

    x0 = np.array(opts["x0"])
    if np.any(x0 < 0):
        raise ConfigError("x0 must be nonnegative", lines.get("x0"))
    if min(opts["a"]) < 0 or min(opts["h"]) < 0 or not opts["n"] > 0:
        raise ConfigError("need a >= 0, h >= 0 and n > 0",
                          lines.get("a") or lines.get("h") or lines.get("n"))
    try:
        Weights(tuple(opts["wx"]), tuple(opts["wu"]))
    except ValueError as exc:
        raise ConfigError(str(exc), lines.get("wx") or lines.get("wu")) from None

    free = opts["estimate.free"]
    unknown = [f for f in free if f not in _PARAM_KEYS]
    if unknown:
        raise ConfigError(f"estimate.free: unknown parameters {unknown}", lines.get("estimate.free"))
    for key in ("estimate.lower", "estimate.upper"):
        if len(opts[key]) != len(free):
            raise ConfigError(f"{key} needs {len(free)} values", lines.get(key))
    if opts["estimate.kind"] not in ("ls", "mle"):
        raise ConfigError("estimate.kind must be 'ls' or 'mle'", lines.get("estimate.kind"))
    bad = [i for i in opts["estimate.intervals"] if i not in ("wald", "profile", "none")]
    if bad:
        raise ConfigError(f"estimate.intervals: unknown {bad}", lines.get("estimate.intervals"))
    if opts["simulate.integrator"] not in ("ll", "reference"):
        raise ConfigError("simulate.integrator must be 'll' or 'reference'",
                          lines.get("simulate.integrator"))
    if opts["analyze.resolution"] < 1:
        raise ConfigError("analyze.resolution must be >= 1", lines.get("analyze.resolution"))
    return RunConfig(params=params, options=opts)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
