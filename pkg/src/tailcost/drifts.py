"""Drift fields b(y, t) and their calculus.

Every other module consumes drifts through DriftSpec, which packages the
drift function itself, its y-derivatives, a Lipschitz bound on db/dy, and
the structural flags the verification checks key on (concavity in y,
b(0, .) = 0). Built-in drifts cover the hypotheses of the different
checks: zero and linear drifts admit exact Gaussian statistics, the
log-cosh drift is concave and bounded-slope but genuinely nonlinear, and
the sine drift is non-concave with bounded slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate


class DriftError(ValueError):
    """Drift evaluation produced a non-finite value or violated a declared flag."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


# Drift callables accept a scalar or ndarray y and a scalar time, and
# broadcast over y.
DriftFunc = Callable[..., np.ndarray | float]


@dataclass(frozen=True)
class DriftSpec:
    """A drift b(y, t) with derivatives and declared structure.

    lipschitz_A bounds |db/dy| uniformly; it is supplied by the drift
    author and spot-checked on a grid, not inferred.  d2b_dy2 is optional:
    only the second-derivative machinery of the classical solver needs it.
    A_of_s is set for linear drifts b(y, s) = A(s) * y and enables the
    closed-form Gaussian statistics; it is None otherwise.
    """

    name: str
    b: DriftFunc
    db_dy: DriftFunc
    d2b_dy2: DriftFunc | None
    lipschitz_A: float
    is_concave: bool
    vanishes_at_origin: bool
    horizon_T: float = 1.0
    A_of_s: Callable[[float], float] | None = None


@dataclass(frozen=True)
class LinearDriftStats:
    """Growth factor Lambda and variance scale sigma2 of a linear drift.

    For b(y, s) = A(s) y started at time t, the state at T is Gaussian
    with mean Lambda * y and variance epsilon * sigma2.
    """

    Lambda: float
    sigma2: float

    def __post_init__(self) -> None:
        if not (self.Lambda > 0.0 and self.sigma2 > 0.0):
            raise ValueError(f"degenerate linear stats: {self}")


def eval_b(spec: DriftSpec, y: float, t: float) -> float:
    """Evaluate the drift at a single point, guarding against non-finite output."""
    if t > spec.horizon_T + 1e-12:
        raise DriftError(f"t={t} beyond horizon T={spec.horizon_T}")
    val = float(spec.b(y, t))
    if not math.isfinite(val):
        raise DriftError(f"drift {spec.name} non-finite at (y={y}, t={t})")
    return val


def zero_drift(T: float = 1.0) -> DriftSpec:
    return DriftSpec(
        name="zero",
        b=lambda y, t: y * 0.0,
        db_dy=lambda y, t: y * 0.0,
        d2b_dy2=lambda y, t: y * 0.0,
        lipschitz_A=0.0,
        is_concave=True,
        vanishes_at_origin=True,
        horizon_T=T,
        A_of_s=lambda s: 0.0,
    )


def linear_drift(A: float, T: float = 1.0) -> DriftSpec:
    return DriftSpec(
        name=f"linear(A={A:g})",
        b=lambda y, t: A * y,
        db_dy=lambda y, t: A + y * 0.0,
        d2b_dy2=lambda y, t: y * 0.0,
        lipschitz_A=abs(A),
        is_concave=True,
        vanishes_at_origin=True,
        horizon_T=T,
        A_of_s=lambda s: A,
    )


def time_varying_linear(a0: float, a1: float, omega: float, T: float = 1.0) -> DriftSpec:
    """b(y, s) = (a0 + a1 cos(omega s)) y.  The integral of A has a closed form."""

    def A(s: float) -> float:
        return a0 + a1 * math.cos(omega * s)

    return DriftSpec(
        name=f"linear(A={a0:g}+{a1:g}cos({omega:g}s))",
        b=lambda y, t: (a0 + a1 * np.cos(omega * t)) * y,
        db_dy=lambda y, t: (a0 + a1 * np.cos(omega * t)) + y * 0.0,
        d2b_dy2=lambda y, t: y * 0.0,
        lipschitz_A=abs(a0) + abs(a1),
        is_concave=True,
        vanishes_at_origin=True,
        horizon_T=T,
        A_of_s=A,
    )


def _logcosh(y):
    # log cosh(y) without overflow: |y| + log1p(e^{-2|y|}) - log 2
    a = np.abs(y)
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


def _sech2(y):
    # 1 / cosh(y)^2, stable for large |y|
    a = np.abs(y)
    e = np.exp(-a)
    return (2.0 * e / (1.0 + e * e)) ** 2


def logcosh_drift(c: float = 0.5, T: float = 1.0) -> DriftSpec:
    """Concave drift b(y) = -c log cosh(y): slope bounded by c, b(0) = 0."""
    return DriftSpec(
        name=f"logcosh(c={c:g})",
        b=lambda y, t: -c * _logcosh(y),
        db_dy=lambda y, t: -c * np.tanh(y),
        d2b_dy2=lambda y, t: -c * _sech2(y),
        lipschitz_A=c,
        is_concave=True,
        vanishes_at_origin=True,
        horizon_T=T,
    )


def sin_drift(amplitude: float = 0.3, T: float = 1.0) -> DriftSpec:
    """Bounded-slope, non-concave drift used by the mixed-partial check."""
    return DriftSpec(
        name=f"sin(a={amplitude:g})",
        b=lambda y, t: amplitude * np.sin(y),
        db_dy=lambda y, t: amplitude * np.cos(y),
        d2b_dy2=lambda y, t: -amplitude * np.sin(y),
        lipschitz_A=amplitude,
        is_concave=False,
        vanishes_at_origin=True,
        horizon_T=T,
    )


_FACTORIES: dict[str, Callable[..., DriftSpec]] = {
    "zero": zero_drift,
    "linear": linear_drift,
    "linear_tv": time_varying_linear,
    "logcosh": logcosh_drift,
    "sin": sin_drift,
}


def drift_by_name(kind: str, **params) -> DriftSpec:
    """Construct a built-in drift from a config-style (kind, params) pair."""
    try:
        factory = _FACTORIES[kind]
    except KeyError:
        raise DriftError(f"unknown drift kind {kind!r}; choose from {sorted(_FACTORIES)}")
    return factory(**params)


def characteristic_F(spec: DriftSpec, x: float, t: float, n_steps: int = 2000) -> float:
    """Backward characteristic: solve y' = b(y, s) with y(T) = x down to s = t.

    Classical fourth-order one-step integration with fixed step; the step
    count default places the integration error far below every tolerance
    used by the callers.
    """
    T = spec.horizon_T
    if not t < T:
        raise ValueError(f"need t < T, got t={t}, T={T}")
    h = (T - t) / n_steps
    y = float(x)
    s = T
    f = spec.b
    for _ in range(n_steps):
        k1 = f(y, s)
        k2 = f(y - 0.5 * h * k1, s - 0.5 * h)
        k3 = f(y - 0.5 * h * k2, s - 0.5 * h)
        k4 = f(y - h * k3, s - h)
        y -= (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        s -= h
    if not math.isfinite(y):
        raise DriftError(f"characteristic diverged for drift {spec.name} at x={x}, t={t}")
    return y


def _quad(f: Callable[[float], float], a: float, b: float, rel: float = 1e-10) -> float:
    val, err = integrate.quad(f, a, b, epsabs=0.0, epsrel=rel, limit=200)
    if not math.isfinite(val):
        raise QuadratureError(f"quadrature returned {val}")
    if err > rel * max(1.0, abs(val)) * 100.0:
        raise QuadratureError(f"quadrature error estimate {err:g} too large for value {val:g}")
    return val


def linear_stats(A_of_s: Callable[[float], float], t: float, T: float) -> LinearDriftStats:
    """Gaussian statistics of a linear drift over [t, T], by adaptive quadrature.

    Lambda = exp(int_t^T A), sigma2 = int_t^T exp(2 int_s^T A) ds, so the
    time-T state given y at time t is Gaussian(Lambda * y, eps * sigma2).
    """
    if not t < T:
        raise ValueError(f"need t < T, got t={t}, T={T}")
    growth = _quad(A_of_s, t, T)

    def integrand(s: float) -> float:
        return math.exp(2.0 * _quad(A_of_s, s, T))

    sigma2 = _quad(integrand, t, T)
    return LinearDriftStats(Lambda=math.exp(growth), sigma2=sigma2)


def spot_check(spec: DriftSpec, y_grid: np.ndarray | None = None, n_times: int = 11) -> None:
    """Grid check of the declared flags; raises DriftError on violation."""
    if y_grid is None:
        y_grid = np.linspace(-4.0, 4.0, 41)
    times = np.linspace(0.0, spec.horizon_T, n_times)
    for t in times:
        slope = np.asarray(spec.db_dy(y_grid, t), dtype=float)
        if not np.all(np.isfinite(slope)):
            raise DriftError(f"{spec.name}: non-finite db_dy at t={t}")
        if np.max(np.abs(slope)) > spec.lipschitz_A + 1e-12:
            raise DriftError(
                f"{spec.name}: |db_dy| exceeds declared bound "
                f"{spec.lipschitz_A} at t={t} (max {np.max(np.abs(slope)):.3e})"
            )
        if spec.is_concave and spec.d2b_dy2 is not None:
            curv = np.asarray(spec.d2b_dy2(y_grid, t), dtype=float)
            if np.max(curv) > 1e-12:
                raise DriftError(f"{spec.name}: declared concave but d2b_dy2 > 0 at t={t}")
        if spec.vanishes_at_origin and abs(float(spec.b(0.0, t))) > 1e-12:
            raise DriftError(f"{spec.name}: declared b(0,.)=0 but b(0,{t}) != 0")
