"""Backward diffusion solver and the cost field it induces.

The central object is u(y, t) = P(state at horizon T exceeds a threshold x,
given state y at time t), obtained by marching the backward equation

    u_t + b(y, t) u_y + (eps/2) u_yy = 0,   u(y, T) = 1{y > x}

in reverse time.  The exponential transform q = -eps log u is the tail
cost; its y-derivative feeds the controller, its threshold-derivative
gives the transition density (Green function).

Numerical scheme: full-operator Crank-Nicolson (central differences for
both diffusion and drift) with a backward-Euler startup phase that damps
the ringing the step terminal data would otherwise excite.  At the mesh
Peclet numbers of every shipped configuration (|b| h_y / eps <= 1) each
step is a monotone map, so the discrete solution inherits the maximum
principle and monotonicity in y to roundoff.  The mesh Peclet and
diffusion numbers are recorded as diagnostics, not enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .drifts import DriftSpec, LinearDriftStats

U_FLOOR = 1e-300  # below this, q = -eps log u is flagged, never clamped

_trapz = getattr(np, "trapezoid", None) or np.trapz

MAXPRINCIPLE_TOL = 1e-12
MONOTONE_TOL = 1e-12


class GridExtentError(ValueError):
    """Grid does not cover the domain the solve needs."""


class PdeError(RuntimeError):
    """Scheme produced a field violating its contracts."""


@dataclass(frozen=True)
class Grid1D:
    y_min: float
    y_max: float
    n_y: int
    t_start: float
    T: float
    n_t: int

    def __post_init__(self) -> None:
        if not self.y_min < self.y_max:
            raise ValueError("y_min must be < y_max")
        if self.n_y < 3 or self.n_t < 2:
            raise ValueError("need n_y >= 3 and n_t >= 2")
        if not self.t_start < self.T:
            raise ValueError("t_start must be < T")

    @property
    def h_y(self) -> float:
        return (self.y_max - self.y_min) / (self.n_y - 1)

    @property
    def h_t(self) -> float:
        return (self.T - self.t_start) / (self.n_t - 1)

    def y_nodes(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.n_y)

    def t_nodes(self) -> np.ndarray:
        return np.linspace(self.t_start, self.T, self.n_t)

    def nearest_node(self, y: float) -> int:
        j = int(round((y - self.y_min) / self.h_y))
        return min(max(j, 0), self.n_y - 1)


@dataclass(frozen=True)
class HeatField:
    """u on the full (t, y) lattice; row k is time level t_k."""

    grid: Grid1D
    epsilon: float
    x_threshold: float
    u: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CostField:
    """q = -eps log u with derivative fields.

    overflow_mask marks nodes where u underflowed the representable floor;
    q is +inf there and the node is excluded from statistics.  dq_dx is
    NaN unless the field came out of a threshold bundle.
    """

    grid: Grid1D
    epsilon: float
    x_threshold: float
    q: np.ndarray
    dq_dy: np.ndarray
    dq_dx: np.ndarray
    overflow_mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CostBundle:
    """Cost fields at a fan of thresholds x_center + j*dx, sharing one grid.

    center has dq_dx filled by centered differencing across the fan.
    """

    members: tuple[CostField, ...]
    thresholds: np.ndarray
    dx: float
    center_index: int

    @property
    def center(self) -> CostField:
        return self.members[self.center_index]


@dataclass(frozen=True)
class GreenFunction:
    """Transition density g(y_i, x_j) from time t to T, columns on x_nodes."""

    grid: Grid1D
    epsilon: float
    t: float
    T: float
    x_nodes: np.ndarray
    g: np.ndarray


def required_half_width(spec: DriftSpec, x: float, epsilon: float, t_start: float) -> float:
    """Domain rule: diffusive spread plus worst-case drift magnification of x."""
    span = spec.horizon_T - t_start
    growth = math.expm1(spec.lipschitz_A * span)
    return max(8.0 * math.sqrt(epsilon * span), 4.0) + growth * abs(x)


def default_grid(
    spec: DriftSpec,
    x: float,
    epsilon: float,
    t_start: float = 0.0,
    n_y: int = 2001,
    n_t: int = 2001,
    widen: float = 1.0,
    extra: float = 0.0,
) -> Grid1D:
    """Grid centered on the threshold, sized by the domain rule, x on a node.

    extra widens the half-width additively; a threshold bundle needs it so
    the rule still holds around its outermost member.
    """
    half = widen * required_half_width(spec, x, epsilon, t_start) + extra
    if n_y % 2 == 0:
        n_y += 1  # keep x exactly on the middle node
    return Grid1D(x - half, x + half, n_y, t_start, spec.horizon_T, n_t)


def fan_margin(spec: DriftSpec, dx: float, n_x: int, t_start: float = 0.0) -> float:
    """Extra half-width a threshold bundle needs (see default_grid's extra).

    The domain rule must hold around the outermost member, whose own
    |x| term grows with the fan extent.
    """
    extent = (n_x // 2) * dx
    span = spec.horizon_T - t_start
    return extent * (1.0 + math.expm1(spec.lipschitz_A * span))


def _advection_coeffs(spec: DriftSpec, y_int: np.ndarray, grid: Grid1D):
    """Per-time advection/diffusion stencil pieces; caches if b is time-constant."""
    t0, T = grid.t_start, grid.T
    b0 = np.asarray(spec.b(y_int, t0), dtype=float)
    b_mid = np.asarray(spec.b(y_int, 0.5 * (t0 + T)), dtype=float)
    b_T = np.asarray(spec.b(y_int, T), dtype=float)
    constant = np.array_equal(b0, b_mid) and np.array_equal(b0, b_T)
    h = grid.h_y
    if constant:
        beta = b0 / (2.0 * h)
        return lambda t: beta, float(np.max(np.abs(b0)))

    def beta_at(t: float) -> np.ndarray:
        return np.asarray(spec.b(y_int, t), dtype=float) / (2.0 * h)

    b_max = max(float(np.max(np.abs(v))) for v in (b0, b_mid, b_T))
    return beta_at, b_max


def _march(
    spec: DriftSpec,
    x_snapped: float,
    grid: Grid1D,
    epsilon: float,
    n_startup: int,
    collect_all: bool,
):
    """Reverse-time march; returns (levels, diagnostics).

    levels is the full (n_t, n_y) array when collect_all, else just the
    t_start profile.
    """
    y = grid.y_nodes()
    t = grid.t_nodes()
    h = grid.h_y
    dt = grid.h_t
    m = grid.n_y - 2
    y_int = y[1:-1]

    alpha = 0.5 * epsilon / (h * h)
    beta_at, b_max = _advection_coeffs(spec, y_int, grid)

    j_thr = grid.nearest_node(x_snapped)
    u = np.zeros(grid.n_y)
    u[j_thr + 1 :] = 1.0
    u[j_thr] = 0.5

    if collect_all:
        levels = np.empty((grid.n_t, grid.n_y))
        levels[grid.n_t - 1] = u

    def explicit(u_full: np.ndarray, beta: np.ndarray, r: float) -> np.ndarray:
        lower = alpha - beta
        upper = alpha + beta
        return u_full[1:-1] + r * (
            lower * u_full[:-2] - 2.0 * alpha * u_full[1:-1] + upper * u_full[2:]
        )

    ab = np.zeros((3, m))

    def implicit(rhs: np.ndarray, beta: np.ndarray, r: float) -> np.ndarray:
        lower = alpha - beta
        upper = alpha + beta
        ab[0, 1:] = -r * upper[:-1]
        ab[1, :] = 1.0 + 2.0 * r * alpha
        ab[2, :-1] = -r * lower[1:]
        rhs = rhs.copy()
        rhs[-1] += r * upper[-1] * 1.0  # pinned u = 1 at y_max
        # pinned u = 0 at y_min contributes nothing
        return solve_banded((1, 1), ab, rhs, overwrite_ab=False, overwrite_b=True)

    r = 0.5 * dt
    for step in range(1, grid.n_t):
        k_old = grid.n_t - step
        k_new = k_old - 1
        if step <= n_startup:
            # two backward-Euler half-steps: strongly damping, monotone
            t_half = t[k_old] - 0.5 * dt
            v = implicit(u[1:-1], beta_at(t_half), r)
            u_half = u.copy()
            u_half[1:-1] = v
            v = implicit(u_half[1:-1], beta_at(t[k_new]), r)
        else:
            rhs = explicit(u, beta_at(t[k_old]), r)
            v = implicit(rhs, beta_at(t[k_new]), r)
        u = u.copy()
        u[1:-1] = v
        u[0] = 0.0
        u[-1] = 1.0
        if collect_all:
            levels[k_new] = u

    diagnostics = {
        "peclet": b_max * h / epsilon if epsilon > 0 else math.inf,
        "diffusion_number": epsilon * dt / (2.0 * h * h),
        "startup_steps": n_startup,
        "threshold_node": j_thr,
    }
    return (levels if collect_all else u), diagnostics


def solve_u(
    spec: DriftSpec,
    x_threshold: float,
    grid: Grid1D,
    epsilon: float,
    n_startup: int = 8,
) -> HeatField:
    """Solve the backward equation on the grid with step data at x_threshold.

    The threshold is snapped to the nearest grid node (the node itself takes
    the value 0.5).  Raises GridExtentError when the grid violates the domain
    rule, PdeError when the returned field would violate the maximum
    principle or monotonicity contracts.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    half = required_half_width(spec, x_threshold, epsilon, grid.t_start)
    if grid.y_max - x_threshold < half - 1e-9 or x_threshold - grid.y_min < half - 1e-9:
        raise GridExtentError(
            f"grid [{grid.y_min}, {grid.y_max}] too small around x={x_threshold}: "
            f"need half-width {half:.3g}"
        )
    j = grid.nearest_node(x_threshold)
    x_snapped = grid.y_min + j * grid.h_y

    levels, diagnostics = _march(spec, x_snapped, grid, epsilon, n_startup, collect_all=True)
    diagnostics["x_requested"] = x_threshold

    worst = _field_violations(levels)
    if worst["max_principle"] > MAXPRINCIPLE_TOL or worst["monotonicity"] > MONOTONE_TOL:
        raise PdeError(f"scheme broke field contracts: {worst}")
    diagnostics.update(worst)
    return HeatField(grid=grid, epsilon=epsilon, x_threshold=x_snapped, u=levels, diagnostics=diagnostics)


def _field_violations(levels: np.ndarray) -> dict:
    under = max(0.0, float(-levels.min()))
    over = max(0.0, float(levels.max() - 1.0))
    diffs = np.diff(levels, axis=-1)
    mono = max(0.0, float(-diffs.min()))
    return {"max_principle": max(under, over), "monotonicity": mono}


def exact_gaussian_u(stats: LinearDriftStats, x: float, y, epsilon: float):
    """Closed-form u for a linear drift: the state at T is Gaussian(Lambda y, eps sigma2)."""
    z = (stats.Lambda * np.asarray(y, dtype=float) - x) / math.sqrt(epsilon * stats.sigma2)
    return ndtr(z)


def hopf_cole(heat: HeatField) -> CostField:
    """Cost transform q = -eps log u, with centered y-derivatives.

    Nodes where u underflows are flagged in overflow_mask and carry q = +inf;
    they are never clamped.  dq_dx needs a threshold bundle and is NaN here.
    """
    u = heat.u
    mask = u < U_FLOOR
    with np.errstate(divide="ignore"):
        q = np.where(mask, np.inf, -heat.epsilon * np.log(np.maximum(u, U_FLOOR)))

    h = heat.grid.h_y
    dq_dy = np.empty_like(q)
    with np.errstate(invalid="ignore"):  # inf - inf across masked nodes
        dq_dy[:, 1:-1] = (q[:, 2:] - q[:, :-2]) / (2.0 * h)
        # one-sided second-order differences at the two boundary nodes
        dq_dy[:, 0] = (-3.0 * q[:, 0] + 4.0 * q[:, 1] - q[:, 2]) / (2.0 * h)
        dq_dy[:, -1] = (3.0 * q[:, -1] - 4.0 * q[:, -2] + q[:, -3]) / (2.0 * h)

    dq_dx = np.full_like(q, np.nan)
    return CostField(
        grid=heat.grid,
        epsilon=heat.epsilon,
        x_threshold=heat.x_threshold,
        q=q,
        dq_dy=dq_dy,
        dq_dx=dq_dx,
        overflow_mask=mask,
        diagnostics=dict(heat.diagnostics),
    )


def solve_bundle(
    spec: DriftSpec,
    x_center: float,
    n_x: int,
    dx: float,
    grid: Grid1D,
    epsilon: float,
    n_startup: int = 8,
) -> CostBundle:
    """Cost fields at n_x thresholds x_center + j*dx (n_x odd, >= 3).

    dx is snapped to a positive multiple of the grid spacing so every
    threshold sits exactly on a node; the center field's dq_dx is the
    centered difference of q across neighboring thresholds (error O(dx^2)).
    """
    if n_x < 3 or n_x % 2 == 0:
        raise ValueError("n_x must be odd and >= 3")
    steps = max(1, int(round(dx / grid.h_y)))
    dx_snapped = steps * grid.h_y
    half = (n_x - 1) // 2
    offsets = np.arange(-half, half + 1)
    thresholds = x_center + offsets * dx_snapped

    members = []
    for x_j in thresholds:
        heat = solve_u(spec, float(x_j), grid, epsilon, n_startup=n_startup)
        members.append(hopf_cole(heat))
    thresholds = np.array([m.x_threshold for m in members])

    center = members[half]
    lo, hi = members[half - 1], members[half + 1]
    with np.errstate(invalid="ignore"):  # inf - inf across masked nodes
        dq_dx = (hi.q - lo.q) / (2.0 * dx_snapped)
    bad = lo.overflow_mask | hi.overflow_mask
    dq_dx = np.where(bad, np.nan, dq_dx)
    center = CostField(
        grid=center.grid,
        epsilon=center.epsilon,
        x_threshold=center.x_threshold,
        q=center.q,
        dq_dy=center.dq_dy,
        dq_dx=dq_dx,
        overflow_mask=center.overflow_mask,
        diagnostics=dict(center.diagnostics, bundle_dx=dx_snapped),
    )
    members[half] = center
    return CostBundle(
        members=tuple(members),
        thresholds=thresholds,
        dx=dx_snapped,
        center_index=half,
    )


def green_function(
    spec: DriftSpec,
    grid: Grid1D,
    epsilon: float,
    t: float,
    T: float,
    thresholds: np.ndarray | None = None,
    max_solves: int = 201,
    n_startup: int = 8,
) -> GreenFunction:
    """Transition density g(y, x') = -du/dx' from solves at a fan of thresholds.

    Thresholds default to a node sub-lattice spanning the grid (at most
    max_solves solves); a caller interested in a window passes explicit
    threshold values, which are snapped to nodes.  Rows integrate to ~1
    (trapezoid over the threshold columns) for y away from the boundary.
    """
    if not (math.isclose(t, grid.t_start) and math.isclose(T, grid.T)):
        raise ValueError("green_function samples the (grid.t_start, grid.T) pair")
    y = grid.y_nodes()
    if thresholds is None:
        stride = max(1, (grid.n_y - 1) // (max_solves - 1))
        idx = np.arange(0, grid.n_y, stride)
        thresholds = y[idx]
    else:
        thresholds = np.array([y[grid.nearest_node(float(x))] for x in thresholds])
        if np.any(np.diff(thresholds) <= 0):
            raise ValueError("thresholds must snap to strictly increasing nodes")

    profiles = np.empty((thresholds.size, grid.n_y))
    for j, x_j in enumerate(thresholds):
        # no domain-rule enforcement per column: the fan deliberately spans
        # the whole grid, and edge columns only feed boundary rows that the
        # row-sum contract already excludes
        profile, _ = _march(spec, float(x_j), grid, epsilon, n_startup, collect_all=False)
        profiles[j] = profile

    g = np.full((grid.n_y, thresholds.size), np.nan)
    g[:, 1:-1] = -(profiles[2:] - profiles[:-2]).T / (thresholds[2:] - thresholds[:-2])
    g[:, 0] = -(profiles[1] - profiles[0]) / (thresholds[1] - thresholds[0])
    g[:, -1] = -(profiles[-1] - profiles[-2]) / (thresholds[-1] - thresholds[-2])
    return GreenFunction(grid=grid, epsilon=epsilon, t=t, T=T, x_nodes=thresholds, g=g)


def green_row_sums(green: GreenFunction) -> np.ndarray:
    """Trapezoid integral of each row over the threshold columns."""
    return _trapz(green.g, green.x_nodes, axis=1)


def audit_domain(
    spec: DriftSpec,
    x: float,
    epsilon: float,
    grid: Grid1D,
    probe_y: np.ndarray,
    widen: float = 1.5,
) -> float:
    """Re-solve on a widened domain; max |u1 - u2| at probe nodes, t_start level.

    The domain rule is our own policy (the underlying theory gives no usable
    constant for the threshold-tail decay), so it is audited rather than
    trusted: values above 1e-6 mean the grid rule failed.
    """
    base = solve_u(spec, x, grid, epsilon)
    n_wide = int(round((grid.n_y - 1) * widen)) + 1
    wide_grid = default_grid(
        spec, x, epsilon, t_start=grid.t_start, n_y=n_wide, n_t=grid.n_t, widen=widen
    )
    wide = solve_u(spec, x, wide_grid, epsilon)
    drift = 0.0
    for yp in probe_y:
        i0 = grid.nearest_node(float(yp))
        i1 = wide_grid.nearest_node(float(yp))
        drift = max(drift, abs(float(base.u[0, i0]) - float(wide.u[0, i1])))
    return drift


def costfield_rows(heat: HeatField, cost: CostField, t_stride: int = 1, y_stride: int = 1):
    """(t, y, u, q, dq_dy, dq_dx) row iterator used by the CSV exporters."""
    tvals = cost.grid.t_nodes()
    yvals = cost.grid.y_nodes()
    for k in range(0, cost.grid.n_t, t_stride):
        for i in range(0, cost.grid.n_y, y_stride):
            yield (
                float(tvals[k]),
                float(yvals[i]),
                float(heat.u[k, i]),
                float(cost.q[k, i]),
                float(cost.dq_dy[k, i]),
                float(cost.dq_dx[k, i]),
            )
