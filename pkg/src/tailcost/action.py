"""Zero-noise variational cost: shooting and direct minimization.

The cost q(x, y, t) is the minimum of one half the time integral of
(y'(s) - b(y(s), s))^2 over paths from (t, y) whose terminal value is at
least the threshold x.  Above the backward characteristic through
(T, x) the minimum is zero (the free flow already exceeds x); below it
the terminal constraint binds, the minimizer satisfies the momentum
system

    y' = b(y, s) - p,    p' = -b_y(y, s) p,    y(t) = y,  y(T) = x,

and everything else falls out of p: the start slope gives the optimal
control, p(t) and -p(T) are the two first derivatives, and a linear
variational system along the path gives the second derivatives.

Two independent routes to the same number are kept deliberately: the
shooting solver above, and a direct discrete minimization of the action
over interior path nodes.  They share no discretization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import minimize

from .drifts import DriftSpec, characteristic_F

_trapz = getattr(np, "trapezoid", None) or np.trapz

REGION_TOL = 1e-9  # scaled by (1 + |x|) when classifying y against F(x, t)
TERMINAL_MISMATCH_TOL = 1e-9
BISECT_WIDTH = 1e-12


class ShootingError(RuntimeError):
    """Momentum search failed to bracket or meet the terminal constraint."""


class DegenerateVariationError(RuntimeError):
    """Variational solution hit a conjugate point; second derivatives blow up."""


class ConvergenceError(RuntimeError):
    """Direct minimizer stopped before reaching the gradient tolerance."""


@dataclass(frozen=True)
class Path:
    times: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class ClassicalSolution:
    """Minimizing path with cost, control, and derivative values at (x, y, t)."""

    path: Path
    momentum_p: np.ndarray
    q_value: float
    lambda_star: float
    dq_dy: float
    dq_dx: float
    dq_dt: float
    x_threshold: float
    t_start: float
    d2q_dy2: float | None = None
    d2q_dxdy: float | None = None
    d2q_dx2: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def binding(self) -> bool:
        return self.q_value > 0.0


@dataclass(frozen=True)
class VariationalSystem:
    """Solution (phi, psi) of the second-variation system along the path.

    tag records which boundary data produced it: "terminal" for
    phi(T) = 0, psi(T) = 1 (curvature in the start point), "initial" for
    phi(t) = 0, psi(t) = 1 (curvature in the threshold).
    """

    phi: np.ndarray
    psi: np.ndarray
    tag: str


def action(path: Path, spec: DriftSpec) -> float:
    """One half the trapezoid integral of (y' - b)^2 along the path."""
    s, y = path.times, path.y
    yp = np.gradient(y, s, edge_order=2)
    b_vals = np.array([float(spec.b(y[i], s[i])) for i in range(s.size)])
    return float(_trapz(0.5 * (yp - b_vals) ** 2, s))


def shoot_terminal(
    spec: DriftSpec,
    y0: float,
    t: float,
    p0: np.ndarray,
    n_steps: int = 2000,
) -> np.ndarray:
    """Terminal value y(T) of the momentum system for a batch of p(t) values."""
    p = np.asarray(p0, dtype=float).copy()
    y = np.full_like(p, float(y0))
    h = (spec.horizon_T - t) / n_steps
    b, b_y = spec.b, spec.db_dy

    def rhs(yv, pv, s):
        return np.asarray(b(yv, s)) - pv, -np.asarray(b_y(yv, s)) * pv

    s = t
    # large trial momenta can blow paths up; callers treat NaN as overshoot
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            k1y, k1p = rhs(y, p, s)
            k2y, k2p = rhs(y + 0.5 * h * k1y, p + 0.5 * h * k1p, s + 0.5 * h)
            k3y, k3p = rhs(y + 0.5 * h * k2y, p + 0.5 * h * k2p, s + 0.5 * h)
            k4y, k4p = rhs(y + h * k3y, p + h * k3p, s + h)
            y = y + (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
            p = p + (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
            s += h
    return y


def _integrate_path(
    spec: DriftSpec, y0: float, t: float, p0: float, n_steps: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Momentum system with stored nodes; returns (times, y, p)."""
    T = spec.horizon_T
    times = np.linspace(t, T, n_steps + 1)
    h = (T - t) / n_steps
    ys = np.empty(n_steps + 1)
    ps = np.empty(n_steps + 1)
    y, p = float(y0), float(p0)
    ys[0], ps[0] = y, p
    b, b_y = spec.b, spec.db_dy

    def rhs(yv, pv, s):
        return float(b(yv, s)) - pv, -float(b_y(yv, s)) * pv

    for i in range(n_steps):
        s = times[i]
        k1y, k1p = rhs(y, p, s)
        k2y, k2p = rhs(y + 0.5 * h * k1y, p + 0.5 * h * k1p, s + 0.5 * h)
        k3y, k3p = rhs(y + 0.5 * h * k2y, p + 0.5 * h * k2p, s + 0.5 * h)
        k4y, k4p = rhs(y + h * k3y, p + h * k3p, s + h)
        y += (h / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        p += (h / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        ys[i + 1], ps[i + 1] = y, p
    return times, ys, ps


def _find_momentum(
    spec: DriftSpec, x: float, y: float, t: float, n_steps: int
) -> float:
    """Search m = -p(t) > 0 with y(T; m) = x by bracketed grid bisection.

    A geometric ladder of candidates brackets the root in one batched
    integration; each refinement pass then subdivides the bracket into 32
    cells and keeps the cell with the sign change, contracting the width
    to BISECT_WIDTH in a handful of further batches.
    """
    span = spec.horizon_T - t

    def overshoot(m: np.ndarray) -> np.ndarray:
        term = shoot_terminal(spec, y, t, -np.asarray(m, dtype=float), n_steps)
        # an upward blow-up exceeds every threshold
        return np.where(np.isnan(term), np.inf, term - x)

    base = max(1e-3, 2.0 * (x - y) / span)
    ladder = np.concatenate(([0.0], base * 2.0 ** np.arange(22)))
    g = overshoot(ladder)
    if g[0] >= 0.0:
        # the uncontrolled flow already reaches x: caller classified wrongly
        return 0.0
    hits = np.nonzero(g >= 0.0)[0]
    if hits.size == 0:
        raise ShootingError(f"cannot bracket the momentum at (x={x}, y={y}, t={t})")
    k = int(hits[0])
    lo, hi = float(ladder[k - 1]), float(ladder[k])
    g_lo, g_hi = float(g[k - 1]), float(g[k])

    for _ in range(64):
        if hi - lo <= BISECT_WIDTH:
            break
        grid = np.linspace(lo, hi, 33)
        gv = overshoot(grid)
        idx = int(np.argmax(gv >= 0.0))
        if idx == 0:
            # sign flipped at the lower edge under refinement: root is at lo
            hi = lo
            break
        lo, hi = float(grid[idx - 1]), float(grid[idx])
        g_lo, g_hi = float(gv[idx - 1]), float(gv[idx])
    if g_hi > g_lo:
        m_star = lo + (hi - lo) * (-g_lo) / (g_hi - g_lo)
    else:
        m_star = 0.5 * (lo + hi)
    return float(m_star)


def solve_shooting(
    spec: DriftSpec,
    x: float,
    y: float,
    t: float = 0.0,
    n_steps: int = 2000,
) -> ClassicalSolution:
    """Classical cost and derivatives at (x, y, t) via the momentum system."""
    T = spec.horizon_T
    if not t < T:
        raise ValueError(f"need t < T, got t={t}")
    boundary = characteristic_F(spec, x, t)
    b_start = float(spec.b(y, t))

    if y >= boundary - REGION_TOL * (1.0 + abs(x)):
        # free region: the uncontrolled flow already meets the threshold
        times, ys, ps = _integrate_path(spec, y, t, 0.0, n_steps)
        return ClassicalSolution(
            path=Path(times=times, y=ys),
            momentum_p=ps,
            q_value=0.0,
            lambda_star=b_start,
            dq_dy=0.0,
            dq_dx=0.0,
            dq_dt=0.0,
            x_threshold=x,
            t_start=t,
            diagnostics={"binding": False, "boundary_F": boundary},
        )

    m_star = _find_momentum(spec, x, y, t, n_steps)
    p0 = -m_star
    times, ys, ps = _integrate_path(spec, y, t, p0, n_steps)
    mismatch = abs(ys[-1] - x)
    if mismatch > TERMINAL_MISMATCH_TOL * (1.0 + abs(x)):
        raise ShootingError(
            f"terminal mismatch {mismatch:.3e} at (x={x}, y={y}, t={t})"
        )

    path = Path(times=times, y=ys)
    q = action(path, spec)
    lam = b_start - p0
    by_nodes = np.array(
        [float(spec.db_dy(ys[i], times[i])) for i in range(times.size)]
    )
    # (y' - b) e^{int b_y} is conserved along the minimizer
    log_v = np.concatenate(
        ([0.0], np.cumsum(0.5 * (by_nodes[1:] + by_nodes[:-1]) * np.diff(times)))
    )
    invariant = ps * np.exp(log_v)
    conservation = float(np.max(np.abs(invariant - ps[0])) / abs(ps[0]))

    return ClassicalSolution(
        path=path,
        momentum_p=ps,
        q_value=q,
        lambda_star=lam,
        dq_dy=p0,
        dq_dx=-float(ps[-1]),
        dq_dt=0.5 * (lam * lam - b_start * b_start),
        x_threshold=x,
        t_start=t,
        diagnostics={
            "binding": True,
            "boundary_F": boundary,
            "terminal_mismatch": mismatch,
            "conservation": conservation,
        },
    )


def derivatives_first(sol: ClassicalSolution, spec: DriftSpec) -> dict:
    """First derivatives by the closed forms, plus their integral-form twins.

    The integral forms weight the excess slope w = y' - b along the path;
    they must agree with the endpoint forms, so both are returned for
    consistency checking.
    """
    times, ys, ps = sol.path.times, sol.path.y, sol.momentum_p
    t, T = times[0], times[-1]
    span = T - t
    by = np.array([float(spec.db_dy(ys[i], times[i])) for i in range(times.size)])
    w = -ps  # lambda*(s) - b(y(s), s)

    dq_dy_integral = float(-_trapz((1.0 + (T - times) * by) * w, times) / span)
    dq_dx_integral = float(_trapz((1.0 - (times - t) * by) * w, times) / span)
    sum_integral = float(-_trapz(by * w, times))
    flow_decay = math.exp(-float(_trapz(by, times)))

    return {
        "dq_dy": sol.dq_dy,
        "dq_dx": sol.dq_dx,
        "dq_dt": sol.dq_dt,
        "dq_dy_integral": dq_dy_integral,
        "dq_dx_integral": dq_dx_integral,
        "dq_dx_flow": float(w[0]) * flow_decay,
        "sum_identity_lhs": sol.dq_dy + sol.dq_dx,
        "sum_identity_rhs": sum_integral,
    }


def variational_system(
    sol: ClassicalSolution, spec: DriftSpec, tag: str
) -> VariationalSystem:
    """Second-variation pair (phi, psi) along the stored minimizing path.

    phi' = b_y phi - psi and psi' = -b_y psi - V phi with V = b_yy * p,
    run backward from phi(T)=0, psi(T)=1 ("terminal") or forward from
    phi(t)=0, psi(t)=1 ("initial").  Coefficients at half steps use
    linear interpolation of the path, consistent with the path's own
    integration order.
    """
    if spec.d2b_dy2 is None:
        raise ValueError(f"drift {spec.name} carries no second derivative")
    times, ys, ps = sol.path.times, sol.path.y, sol.momentum_p
    n = times.size - 1
    h = times[1] - times[0]

    def coeffs(yv: float, pv: float, s: float) -> tuple[float, float]:
        a = float(spec.db_dy(yv, s))
        v = float(spec.d2b_dy2(yv, s)) * pv
        return a, v

    a_node = np.empty(n + 1)
    v_node = np.empty(n + 1)
    for i in range(n + 1):
        a_node[i], v_node[i] = coeffs(ys[i], ps[i], times[i])
    a_mid = np.empty(n)
    v_mid = np.empty(n)
    for i in range(n):
        a_mid[i], v_mid[i] = coeffs(
            0.5 * (ys[i] + ys[i + 1]),
            0.5 * (ps[i] + ps[i + 1]),
            times[i] + 0.5 * h,
        )

    def deriv(phi: float, psi: float, a: float, v: float) -> tuple[float, float]:
        return a * phi - psi, -a * psi - v * phi

    phi = np.empty(n + 1)
    psi = np.empty(n + 1)
    if tag == "terminal":
        phi[n], psi[n] = 0.0, 1.0
        order = range(n - 1, -1, -1)
        step = -h
    elif tag == "initial":
        phi[0], psi[0] = 0.0, 1.0
        order = range(1, n + 1)
        step = h
    else:
        raise ValueError(f"tag must be 'terminal' or 'initial', got {tag!r}")

    for j in order:
        i_from = j + 1 if tag == "terminal" else j - 1
        i_mid = min(j, i_from)
        f, g = phi[i_from], psi[i_from]
        k1 = deriv(f, g, a_node[i_from], v_node[i_from])
        k2 = deriv(f + 0.5 * step * k1[0], g + 0.5 * step * k1[1], a_mid[i_mid], v_mid[i_mid])
        k3 = deriv(f + 0.5 * step * k2[0], g + 0.5 * step * k2[1], a_mid[i_mid], v_mid[i_mid])
        k4 = deriv(f + step * k3[0], g + step * k3[1], a_node[j], v_node[j])
        phi[j] = f + (step / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        psi[j] = g + (step / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    return VariationalSystem(phi=phi, psi=psi, tag=tag)


def derivatives_second(sol: ClassicalSolution, spec: DriftSpec) -> ClassicalSolution:
    """Fill the three second derivatives; only defined where the cost binds."""
    if not sol.binding:
        raise ValueError("second derivatives are defined only below the boundary")
    term = variational_system(sol, spec, "terminal")
    init = variational_system(sol, spec, "initial")
    # interior zeros of phi mark conjugate points: curvature degenerates
    if term.phi[0] <= 0.0 or np.min(term.phi[:-1]) <= 0.0:
        raise DegenerateVariationError("terminal-data variation loses positivity")
    if init.phi[-1] >= 0.0 or np.max(init.phi[1:]) >= 0.0:
        raise DegenerateVariationError("initial-data variation loses negativity")
    return replace(
        sol,
        d2q_dy2=float(term.psi[0] / term.phi[0]),
        d2q_dxdy=float(1.0 / init.phi[-1]),
        d2q_dx2=float(-init.psi[-1] / init.phi[-1]),
    )


def minimize_direct(
    spec: DriftSpec,
    x: float,
    y: float,
    t: float = 0.0,
    n_nodes: int = 256,
    grad_tol: float = 1e-8,
    max_iter: int = 100_000,
) -> tuple[float, Path]:
    """Direct discrete action minimum over interior nodes, endpoints pinned.

    Midpoint-rule objective with analytic gradient; independent of the
    shooting discretization.  L-BFGS-B does the bulk descent but its line
    search stalls on f rounding around gradient 1e-7, so exact Newton
    steps on the tridiagonal Hessian finish the last digits.  Raises
    ConvergenceError when the gradient max-norm cannot be brought under
    grad_tol.
    """
    if n_nodes < 16:
        raise ValueError("need at least 16 interior nodes")
    T = spec.horizon_T
    s = np.linspace(t, T, n_nodes + 2)
    h = s[1] - s[0]
    s_mid = 0.5 * (s[:-1] + s[1:])
    curvature = spec.d2b_dy2

    def pieces(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        full = np.concatenate(([y], z, [x]))
        ymid = 0.5 * (full[:-1] + full[1:])
        w = np.diff(full) / h - np.asarray(spec.b(ymid, s_mid), dtype=float)
        by = np.asarray(spec.db_dy(ymid, s_mid), dtype=float)
        return ymid, w, by

    def objective(z: np.ndarray) -> tuple[float, np.ndarray]:
        _, w, by = pieces(z)
        f = 0.5 * h * float(np.dot(w, w))
        grad = w[:-1] - w[1:] - 0.5 * h * (w[:-1] * by[:-1] + w[1:] * by[1:])
        return f, grad

    def hessian_banded(z: np.ndarray) -> np.ndarray:
        ymid, w, by = pieces(z)
        if curvature is None:
            curv = np.zeros_like(w)
        else:
            curv = w * np.asarray(curvature(ymid, s_mid), dtype=float)
        diag = (
            2.0 / h
            + (by[1:] - by[:-1])
            + 0.25 * h * (by[:-1] ** 2 + by[1:] ** 2)
            - 0.25 * h * (curv[:-1] + curv[1:])
        )
        off = -1.0 / h + 0.25 * h * (by[1:-1] ** 2 - curv[1:-1])
        ab = np.zeros((3, diag.size))
        ab[0, 1:] = off
        ab[1, :] = diag
        ab[2, :-1] = off
        return ab

    seed = np.linspace(y, x, n_nodes + 2)[1:-1]
    res = minimize(
        objective,
        seed,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": grad_tol, "ftol": 1e-16},
    )
    z = res.x
    f, grad = objective(z)
    for _ in range(60):
        gmax = float(np.max(np.abs(grad)))
        if gmax <= grad_tol:
            break
        step = solve_banded((1, 1), hessian_banded(z), -grad)
        for _ in range(30):
            f_new, grad_new = objective(z + step)
            if float(np.max(np.abs(grad_new))) < gmax or f_new < f:
                break
            step *= 0.5
        z = z + step
        f, grad = f_new, grad_new
    if float(np.max(np.abs(grad))) > grad_tol:
        raise ConvergenceError(
            f"gradient max-norm {np.max(np.abs(grad)):.3e} above {grad_tol:g}"
        )
    return float(objective(z)[0]), Path(times=s, y=np.concatenate(([y], z, [x])))


def path_rows(sol: ClassicalSolution, spec: DriftSpec):
    """(s, y, p, control) row iterator for the CSV exporter."""
    times, ys, ps = sol.path.times, sol.path.y, sol.momentum_p
    for i in range(times.size):
        lam = float(spec.b(ys[i], times[i])) - float(ps[i])
        yield float(times[i]), float(ys[i]), float(ps[i]), lam
