"""Compiled inner loops shared by the integrators, estimators and control solver.

Parameters travel as a flat float64 array in the order of ``PARAM_NAMES``.
Controls travel as per-step arrays of shape ``(n_steps, 2)``: row ``j`` holds
the value applied on ``[t_j, t_{j+1})``.
"""

import numpy as np
from numba import njit

PARAM_NAMES = (
    "epsilon", "epsilon0", "sigma", "p", "q", "r", "s",
    "beta1", "beta2", "beta3", "beta4", "gamma1", "gamma2",
    "mu1", "mu2", "mu3", "mu4", "mu5",
)
(EPS, EPS0, SIGMA, P, Q, R, S, B1, B2, B3, B4, G1, G2,
 M1, M2, M3, M4, M5) = range(len(PARAM_NAMES))

# integrate status codes
OK = 0
NEGATIVE = 1
NONFINITE = 2

POSITIVITY_TOL = 1e-9
COND_LIMIT = 1e12

# diagonal Pade(6, 6) numerator coefficients
_PADE6 = np.array([1.0, 0.5, 5.0 / 44.0, 1.0 / 66.0, 1.0 / 792.0,
                   1.0 / 15840.0, 1.0 / 665280.0])
_SQUARING_THRESHOLD = 0.5


@njit(cache=True)
def birth_rate(t, prm):
    return prm[EPS] + prm[EPS0] * np.cos(prm[SIGMA] * t)


@njit(cache=True)
def field(t, x, u1, u2, prm):
    alpha = birth_rate(t, prm)
    p = prm[P]
    out = np.empty(5)
    out[0] = p * alpha * x[4] - (prm[B1] + prm[Q] * u1 + prm[M1]) * x[0]
    out[1] = (1.0 - p) * alpha * x[4] - (prm[B2] + prm[M2]) * x[1]
    out[2] = (prm[B1] * x[0] - prm[G1] * x[2] * x[2]
              - (prm[B3] + u1 + prm[R] * u2 + prm[M3]) * x[2])
    out[3] = (prm[B2] * x[1] - prm[G2] * x[3] * x[3]
              - (prm[B4] + prm[S] * u2 + prm[M4]) * x[3])
    out[4] = prm[B3] * x[2] + prm[B4] * x[3] - (u2 + prm[M5]) * x[4]
    return out


@njit(cache=True)
def field_t(t, x, prm):
    """Explicit time derivative of the field (only the egg-laying terms depend on t)."""
    dalpha = -prm[EPS0] * prm[SIGMA] * np.sin(prm[SIGMA] * t)
    out = np.zeros(5)
    out[0] = prm[P] * dalpha * x[4]
    out[1] = (1.0 - prm[P]) * dalpha * x[4]
    return out


@njit(cache=True)
def jac(t, x, u1, u2, prm):
    alpha = birth_rate(t, prm)
    p = prm[P]
    J = np.zeros((5, 5))
    J[0, 0] = -(prm[B1] + prm[Q] * u1 + prm[M1])
    J[0, 4] = p * alpha
    J[1, 1] = -(prm[B2] + prm[M2])
    J[1, 4] = (1.0 - p) * alpha
    J[2, 0] = prm[B1]
    J[2, 2] = -(2.0 * prm[G1] * x[2] + prm[B3] + u1 + prm[R] * u2 + prm[M3])
    J[3, 1] = prm[B2]
    J[3, 3] = -(2.0 * prm[G2] * x[3] + prm[B4] + prm[S] * u2 + prm[M4])
    J[4, 2] = prm[B3]
    J[4, 3] = prm[B4]
    J[4, 4] = -(u2 + prm[M5])
    return J


@njit(cache=True)
def norm1(M):
    best = 0.0
    for j in range(M.shape[1]):
        col = 0.0
        for i in range(M.shape[0]):
            col += abs(M[i, j])
        if col > best:
            best = col
    return best


@njit(cache=True)
def expm(M):
    n = M.shape[0]
    nrm = norm1(M)
    s = 0
    if nrm > _SQUARING_THRESHOLD:
        s = int(np.ceil(np.log2(nrm / _SQUARING_THRESHOLD)))
    A = M / (2.0 ** s)
    eye = np.eye(n)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    c = _PADE6
    odd = A @ (c[1] * eye + c[3] * A2 + c[5] * A4)
    even = c[0] * eye + c[2] * A2 + c[4] * A4 + c[6] * A6
    E = np.ascontiguousarray(np.linalg.solve(even - odd, even + odd))
    for _ in range(s):
        E = E @ E
    return E


@njit(cache=True)
def phi1_times(J, f, dt):
    """dt * phi1(J dt) f through the augmented exponential exp([[J, f], [0, 0]] dt)."""
    n = J.shape[0]
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = J * dt
    aug[:n, n] = f * dt
    E = expm(aug)
    return E[:n, n].copy()


@njit(cache=True)
def ll_increment(J, f, dt):
    """(exp(J dt) - id) J^-1 f, or the phi1 form when J is near singular."""
    n = J.shape[0]
    Jinv = np.zeros((n, n))
    singular = False
    try:
        Jinv[:, :] = np.linalg.inv(J)
    except Exception:
        singular = True
    if singular or not np.all(np.isfinite(Jinv)) or norm1(J) * norm1(Jinv) > COND_LIMIT:
        return phi1_times(J, f, dt)
    E = expm(J * dt)
    return (E - np.eye(n)) @ (Jinv @ f)


@njit(cache=True)
def forced_increment(J, f, ft, dt):
    """Exact flow of y' = J y + f + ft s over [0, dt] from y = 0.

    This is the local linearization of the time-augmented system.  With
    ``ft = 0`` it reduces to :func:`ll_increment`; otherwise the block
    exponential of ``[[J, ft, f], [0, 0, 1], [0, 0, 0]] dt`` is used, which
    avoids the cancellation in ``(exp(J dt) - id - J dt) J^-2 ft``.
    """
    n = J.shape[0]
    if not np.any(ft != 0.0):
        return ll_increment(J, f, dt)
    aug = np.zeros((n + 2, n + 2))
    aug[:n, :n] = J * dt
    aug[:n, n] = ft * dt
    aug[:n, n + 1] = f * dt
    aug[n, n + 1] = dt
    E = expm(aug)
    return E[:n, n + 1].copy()


@njit(cache=True)
def ll_step(t, x, u1, u2, prm, dt):
    f = field(t, x, u1, u2, prm)
    J = jac(t, x, u1, u2, prm)
    return x + forced_increment(J, f, field_t(t, x, prm), dt)


@njit(cache=True)
def _check(x, states, j):
    # returns status; clamps roundoff negatives in place
    for i in range(5):
        v = x[i]
        if not np.isfinite(v):
            return NONFINITE
        if v < 0.0:
            if v < -POSITIVITY_TOL:
                return NEGATIVE
            x[i] = 0.0
    states[j] = x
    return OK


@njit(cache=True)
def ll_path(x0, U, prm, times):
    n = times.shape[0] - 1
    states = np.zeros((n + 1, 5))
    states[0] = x0
    x = x0.copy()
    for j in range(n):
        dt = times[j + 1] - times[j]
        x = ll_step(times[j], x, U[j, 0], U[j, 1], prm, dt)
        status = _check(x, states, j + 1)
        if status != OK:
            return states, status, j + 1
    return states, OK, -1


@njit(cache=True)
def rk4_path(x0, U, prm, times, substeps):
    n = times.shape[0] - 1
    states = np.zeros((n + 1, 5))
    states[0] = x0
    x = x0.copy()
    for j in range(n):
        u1 = U[j, 0]
        u2 = U[j, 1]
        h = (times[j + 1] - times[j]) / substeps
        t = times[j]
        for _ in range(substeps):
            k1 = field(t, x, u1, u2, prm)
            k2 = field(t + 0.5 * h, x + 0.5 * h * k1, u1, u2, prm)
            k3 = field(t + 0.5 * h, x + 0.5 * h * k2, u1, u2, prm)
            k4 = field(t + h, x + h * k3, u1, u2, prm)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t += h
        status = _check(x, states, j + 1)
        if status != OK:
            return states, status, j + 1
    return states, OK, -1


@njit(cache=True)
def _variational_rhs(t, x, Z, prm):
    return field(t, x, 0.0, 0.0, prm), jac(t, x, 0.0, 0.0, prm) @ Z


@njit(cache=True)
def rk4_variational(x0, prm, times, substeps):
    """Uncontrolled state together with its sensitivity matrix d x(t) / d x0."""
    n = times.shape[0] - 1
    states = np.zeros((n + 1, 5))
    states[0] = x0
    x = x0.copy()
    Z = np.eye(5)
    for j in range(n):
        h = (times[j + 1] - times[j]) / substeps
        t = times[j]
        for _ in range(substeps):
            a1, b1 = _variational_rhs(t, x, Z, prm)
            a2, b2 = _variational_rhs(t + 0.5 * h, x + 0.5 * h * a1, Z + 0.5 * h * b1, prm)
            a3, b3 = _variational_rhs(t + 0.5 * h, x + 0.5 * h * a2, Z + 0.5 * h * b2, prm)
            a4, b4 = _variational_rhs(t + h, x + h * a3, Z + h * b3, prm)
            x = x + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            Z = Z + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
            t += h
        states[j + 1] = x
    return states, Z


@njit(cache=True)
def adjoint_path(states, U, prm, times, wx):
    """Backward LL sweep of the costate system z' = -wx*y - J(t, y, u)^T z, z(T) = 0.

    Coefficients are frozen at the step midpoint (average of the endpoint
    states and times); the control on step j is U[j].  Column 5 is the
    time costate, accumulated by trapezoid quadrature.
    """
    n = times.shape[0] - 1
    z = np.zeros((n + 1, 6))
    zc = np.zeros(5)
    eps0 = prm[EPS0]
    sig = prm[SIGMA]
    p = prm[P]
    for j in range(n - 1, -1, -1):
        dt = times[j + 1] - times[j]
        tm = 0.5 * (times[j] + times[j + 1])
        ym = 0.5 * (states[j] + states[j + 1])
        M = jac(tm, ym, U[j, 0], U[j, 1], prm).T.copy()
        # reversed time s = T - t:  dz/ds = M z + wx*y
        g = M @ zc + wx * ym
        zc = zc + ll_increment(M, g, dt)
        for i in range(5):
            if not np.isfinite(zc[i]):
                z[j, :5] = zc
                return z, NONFINITE, j
        z[j, :5] = zc
        # z6' = sigma*eps0*sin(sigma*t)*y5*(p z1 + (1-p) z2)
        a = (sig * eps0 * np.sin(sig * times[j]) * states[j, 4]
             * (p * z[j, 0] + (1.0 - p) * z[j, 1]))
        b = (sig * eps0 * np.sin(sig * times[j + 1]) * states[j + 1, 4]
             * (p * z[j + 1, 0] + (1.0 - p) * z[j + 1, 1]))
        z[j, 5] = z[j + 1, 5] - 0.5 * dt * (a + b)
    return z, OK, -1
