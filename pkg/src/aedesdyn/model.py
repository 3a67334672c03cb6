"""Periodically forced five-class mosquito population model.

State order is (indoor eggs, outdoor eggs, indoor larvae, outdoor larvae,
adults); the two control channels are the larvicide (temephos) and adulticide
(ULV aerosol) impact rates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import _kernels

__all__ = [
    "ModelParams",
    "DerivedRates",
    "TABLE1",
    "X0_TABLE1",
    "birth_rate",
    "vector_field",
    "jacobian",
    "offspring_number",
    "equilibria",
    "autonomous_field",
    "check_boundedness_hypotheses",
    "SolverError",
]


class SolverError(RuntimeError):
    """A numerical procedure failed to converge or produced invalid values."""

    def __init__(self, message, residual=None, step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


@dataclass(frozen=True)
class ModelParams:
    """Rates, probabilities and forcing of the vector field (all per day)."""

    epsilon: float
    epsilon0: float
    sigma: float
    p: float
    q: float
    r: float
    s: float
    beta1: float
    beta2: float
    beta3: float
    beta4: float
    gamma1: float
    gamma2: float
    mu1: float
    mu2: float
    mu3: float
    mu4: float
    mu5: float

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {value!r}")
        for name in ("p", "q", "r", "s"):
            if getattr(self, name) > 1:
                raise ValueError(f"{name} is a probability, got {getattr(self, name)!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.epsilon0 > 0 and not self.epsilon > self.epsilon0:
            raise ValueError("periodic forcing requires epsilon > epsilon0")
        # gamma1 == gamma2 == 0 is the linear test variant
        if not (self.gamma1 > self.gamma2 or self.gamma1 == self.gamma2 == 0):
            raise ValueError("larval competition requires gamma1 > gamma2")

    @property
    def period(self) -> float:
        return 2 * math.pi / self.sigma

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in _kernels.PARAM_NAMES], dtype=float)

    def with_values(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)

    def rates(self) -> "DerivedRates":
        return DerivedRates.from_params(self)


@dataclass(frozen=True)
class DerivedRates:
    b1: float
    b2: float
    b3: float
    b4: float
    b5: float
    b6: float
    d1: float
    d2: float
    d3: float
    d4: float
    d5: float

    @classmethod
    def from_params(cls, prm: ModelParams) -> "DerivedRates":
        return cls(
            b1=prm.epsilon * prm.p,
            b2=prm.epsilon * (1 - prm.p),
            b3=prm.beta1,
            b4=prm.beta2,
            b5=prm.beta3,
            b6=prm.beta4,
            d1=prm.beta1 + prm.mu1,
            d2=prm.beta2 + prm.mu2,
            d3=prm.beta3 + prm.mu3,
            d4=prm.beta4 + prm.mu4,
            d5=prm.mu5,
        )


TABLE1 = ModelParams(
    epsilon=3.0, epsilon0=2.0, sigma=2 * math.pi / math.floor(151 / 4),
    p=0.4, q=0.04, r=0.05, s=0.05,
    beta1=0.3, beta2=0.2, beta3=0.08, beta4=0.05,
    gamma1=0.004, gamma2=0.0026,
    mu1=0.02, mu2=0.01, mu3=0.02, mu4=0.01, mu5=0.4,
)

X0_TABLE1 = np.array([21.0, 43.0, 24.0, 37.0, 8.0])


def birth_rate(t: float, params: ModelParams) -> float:
    """Egg-laying rate ``epsilon + epsilon0 * cos(sigma * t)``."""
    return params.epsilon + params.epsilon0 * math.cos(params.sigma * t)


def _control(u):
    if u is None:
        return 0.0, 0.0
    u1, u2 = u
    return float(u1), float(u2)


def vector_field(t: float, x, u, params: ModelParams) -> np.ndarray:
    u1, u2 = _control(u)
    return _kernels.field(float(t), np.asarray(x, dtype=float), u1, u2, params.as_array())


def jacobian(t: float, x, u, params: ModelParams) -> np.ndarray:
    """Analytic state Jacobian of :func:`vector_field`."""
    u1, u2 = _control(u)
    return _kernels.jac(float(t), np.asarray(x, dtype=float), u1, u2, params.as_array())


def autonomous_field(x, params: ModelParams) -> np.ndarray:
    """The ``epsilon0 = 0`` part of the uncontrolled field."""
    return vector_field(0.0, x, None, params.with_values(epsilon0=0.0))


def offspring_number(d3_eff: float, d4_eff: float, rates: DerivedRates) -> float:
    """Basic mosquito offspring number with effective larval loss rates.

    ``offspring_number(r.d3, r.d4, r)`` is the threshold quantity of the
    trivial solution; raising the larval loss rates (competition) lowers it.
    """
    for name, value in (("d1", rates.d1), ("d2", rates.d2), ("d5", rates.d5),
                        ("d3_eff", d3_eff), ("d4_eff", d4_eff)):
        if not value > 0:
            raise ValueError(f"{name} must be > 0, got {value!r}")
    indoor = (rates.b1 / rates.d5) * (rates.b3 / rates.d1) * (rates.b5 / d3_eff)
    outdoor = (rates.b2 / rates.d5) * (rates.b4 / rates.d2) * (rates.b6 / d4_eff)
    return float(np.cbrt(indoor + outdoor))


def _newton(x, params, tol, max_iter=100):
    f0 = params.with_values(epsilon0=0.0)
    prm = f0.as_array()
    for _ in range(max_iter):
        F = _kernels.field(0.0, x, 0.0, 0.0, prm)
        if np.linalg.norm(F) < tol * (np.linalg.norm(x) + 1):
            return x, F
        J = _kernels.jac(0.0, x, 0.0, 0.0, prm)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return x, F
        # damping: halve until the residual drops and the iterate stays positive
        step = 1.0
        nF = np.linalg.norm(F)
        while step > 1e-10:
            cand = x + step * dx
            if np.all(cand > 0) and np.linalg.norm(
                    _kernels.field(0.0, cand, 0.0, 0.0, prm)) < nF:
                break
            step *= 0.5
        x = cand
    return x, _kernels.field(0.0, x, 0.0, 0.0, prm)


def equilibria(params: ModelParams, restarts: int = 10, seed: int = 0,
               tol: float = 1e-10) -> list[np.ndarray]:
    """Equilibria of the autonomous (``epsilon0 = 0``) system in the positive orthant.

    The origin is always returned first.  When the offspring number exceeds
    one, the positive equilibrium is located by damped Newton iteration from
    ``restarts`` random positive starting points.
    """
    out = [np.zeros(5)]
    rates = params.rates()
    if rates.b1 + rates.b2 == 0 or offspring_number(rates.d3, rates.d4, rates) <= 1:
        return out
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        start = rng.uniform(1.0, 1.0 / max(params.gamma2, 1e-3), size=5)
        x, F = _newton(start, params, tol)
        res = np.linalg.norm(F) / (np.linalg.norm(x) + 1)
        if best is None or res < best[1]:
            best = (x, res)
        if res < tol and np.all(x > 0):
            out.append(x)
            return out
    raise SolverError("positive equilibrium not found", residual=best[1] if best else None)


def check_boundedness_hypotheses(states: np.ndarray) -> bool:
    """Post-hoc check that both larval classes dominate adults along a path."""
    states = np.asarray(states)
    return bool(np.all(states[:, 2] >= states[:, 4]) and np.all(states[:, 3] >= states[:, 4]))
