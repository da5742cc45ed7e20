"""SDE path simulation: uncontrolled, optimally controlled, and pinned-pull.

Euler-Maruyama throughout, with a Philox counter-based generator so runs
are reproducible bit for bit from the seed alone.  The controlled
simulator follows the steered drift read off a solved cost field, stops
steering a short cutoff before the horizon, and accumulates the exact
change-of-measure log weight so controlled samples can stand in for the
original law (importance sampling) or be studied in their own right.

Per-path integral accumulators use compensated summation; the cost and
slope representations are plain averages of those integrals.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .drifts import DriftSpec
from .pde import CostField, Grid1D


class SimulationError(RuntimeError):
    pass


class GridCoverageError(SimulationError):
    """Too many paths left the controller's valid window."""


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    dt: float
    seed: int
    terminal_cutoff: float | None = None

    def __post_init__(self) -> None:
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.terminal_cutoff is not None and self.terminal_cutoff < self.dt:
            raise ValueError("terminal_cutoff must be at least one step")

    def cutoff(self, span: float) -> float:
        if self.terminal_cutoff is not None:
            return self.terminal_cutoff
        return max(self.dt, 1e-3 * span)


@dataclass(frozen=True)
class PathEnsemble:
    times: np.ndarray
    paths: np.ndarray  # (n_paths, times.size)
    log_girsanov_weight: np.ndarray
    seed: int
    escaped: np.ndarray | None = None
    cutoff_index: int | None = None
    integrals: dict = field(default_factory=dict)

    @property
    def kept(self) -> np.ndarray:
        if self.escaped is None:
            return np.ones(self.paths.shape[0], dtype=bool)
        return ~self.escaped


@dataclass(frozen=True)
class EstimatorResult:
    name: str
    estimate: float
    std_error: float
    n: int
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "name": self.name,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "n": self.n,
        }
        out.update(self.extra)
        return out


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _check_dt(dt: float, span: float) -> int:
    if dt > span / 10.0 + 1e-15:
        raise ValueError(f"dt={dt} too coarse for span {span}; need span/10 or finer")
    return max(1, int(math.ceil(span / dt - 1e-12)))


def _kahan(total: np.ndarray, comp: np.ndarray, inc: np.ndarray) -> None:
    t = inc - comp
    s = total + t
    comp[:] = (s - total) - t
    total[:] = s


# ------------------------------------------------------------- uncontrolled

def simulate_uncontrolled(
    spec: DriftSpec,
    y0: float,
    t: float,
    epsilon: float,
    config: SimConfig,
) -> PathEnsemble:
    """Paths of dY = b dt + sqrt(eps) dW from (t, y0) up to the horizon."""
    span = spec.horizon_T - t
    n_steps = _check_dt(config.dt, span)
    times = np.linspace(t, spec.horizon_T, n_steps + 1)
    rng = _generator(config.seed)
    paths = np.empty((config.n_paths, n_steps + 1))
    paths[:, 0] = y0
    y = np.full(config.n_paths, float(y0))
    for k in range(n_steps):
        h = times[k + 1] - times[k]
        xi = rng.standard_normal(config.n_paths)
        y = y + np.asarray(spec.b(y, times[k])) * h + math.sqrt(epsilon * h) * xi
        paths[:, k + 1] = y
    return PathEnsemble(
        times=times,
        paths=paths,
        log_girsanov_weight=np.zeros(config.n_paths),
        seed=config.seed,
    )


def terminal_sample(
    spec: DriftSpec,
    y0: float,
    t: float,
    epsilon: float,
    config: SimConfig,
) -> np.ndarray:
    """Terminal values only; memory stays flat in the step count."""
    span = spec.horizon_T - t
    n_steps = _check_dt(config.dt, span)
    times = np.linspace(t, spec.horizon_T, n_steps + 1)
    rng = _generator(config.seed)
    y = np.full(config.n_paths, float(y0))
    for k in range(n_steps):
        h = times[k + 1] - times[k]
        xi = rng.standard_normal(config.n_paths)
        y = y + np.asarray(spec.b(y, times[k])) * h + math.sqrt(epsilon * h) * xi
    return y


def estimate_u_naive(
    spec: DriftSpec,
    y0: float,
    x: float,
    t: float,
    epsilon: float,
    config: SimConfig,
) -> EstimatorResult:
    """Plain Monte Carlo exceedance probability with binomial error bars."""
    terminal = terminal_sample(spec, y0, t, epsilon, config)
    n = config.n_paths
    p = float(np.count_nonzero(terminal > x)) / n
    # floor keeps the error bar honest when no sample lands on either side
    se = math.sqrt(max(p * (1.0 - p), 1.0 / n) / n)
    return EstimatorResult(name="exceedance_naive", estimate=p, std_error=se, n=n)


# --------------------------------------------------------------- controller

class ControllerError(SimulationError):
    pass


@dataclass(frozen=True)
class ControllerField:
    """Steered drift b - (d/dy) cost, bilinear over the solved (t, y) lattice.

    Rows where the cost field underflowed carry a restricted valid window
    around the threshold; queries outside the window (or outside the time
    range) do not extrapolate, they mark the path as escaped.
    """

    y_nodes: np.ndarray
    t_nodes: np.ndarray
    control: np.ndarray  # (n_t, n_y), NaN outside each row's window
    window_lo: np.ndarray  # per-row first valid y
    window_hi: np.ndarray  # per-row last valid y
    last_row: int

    @property
    def t_valid_max(self) -> float:
        return float(self.t_nodes[self.last_row])

    @classmethod
    def from_fields(
        cls, grid: Grid1D, cost: CostField, spec: DriftSpec
    ) -> "ControllerField":
        if cost.q.ndim != 2:
            raise ControllerError("controller needs a fully collected cost field")
        n_t, n_y = cost.q.shape
        t_nodes = grid.t_nodes()
        y_nodes = grid.y_nodes()
        # seed the per-row window search from the best-covered column
        center = int(np.argmax(np.isfinite(cost.dq_dy).sum(axis=0)))
        control = np.full((n_t, n_y), np.nan)
        window_lo = np.full(n_t, np.inf)
        window_hi = np.full(n_t, -np.inf)
        last_row = 0
        # the terminal row holds the raw step data and carries no usable
        # slope, so it never participates
        for i in range(n_t - 1):
            finite = np.isfinite(cost.dq_dy[i])
            if not finite[center]:
                break
            j_lo = center
            while j_lo > 0 and finite[j_lo - 1]:
                j_lo -= 1
            j_hi = center
            while j_hi < n_y - 1 and finite[j_hi + 1]:
                j_hi += 1
            drift_row = np.asarray(spec.b(y_nodes[j_lo : j_hi + 1], t_nodes[i]))
            lam = drift_row - cost.dq_dy[i, j_lo : j_hi + 1]
            # steering never pushes below the plain drift
            control[i, j_lo : j_hi + 1] = np.maximum(lam, drift_row)
            window_lo[i] = y_nodes[j_lo]
            window_hi[i] = y_nodes[j_hi]
            last_row = i
        if last_row < 1:
            raise ControllerError("cost field has no usable interior rows")
        return cls(
            y_nodes=y_nodes,
            t_nodes=t_nodes,
            control=control,
            window_lo=window_lo,
            window_hi=window_hi,
            last_row=last_row,
        )

    def evaluate(self, y: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
        """(control values, validity mask) at positions y and time s."""
        if s < self.t_nodes[0] - 1e-12 or s > self.t_valid_max + 1e-12:
            raise ControllerError(f"time {s} outside the controller's range")
        i = int(np.searchsorted(self.t_nodes, s, side="right")) - 1
        i = min(max(i, 0), self.last_row - 1)
        w = (s - self.t_nodes[i]) / (self.t_nodes[i + 1] - self.t_nodes[i])
        w = min(max(w, 0.0), 1.0)
        lo = max(self.window_lo[i], self.window_lo[i + 1])
        hi = min(self.window_hi[i], self.window_hi[i + 1])
        valid = (y >= lo) & (y <= hi)
        yq = np.clip(y, lo, hi)
        low_row = np.interp(yq, self.y_nodes, self.control[i])
        high_row = np.interp(yq, self.y_nodes, self.control[i + 1])
        return (1.0 - w) * low_row + w * high_row, valid


# ----------------------------------------------------------------- steered

def simulate_controlled(
    spec: DriftSpec,
    controller: ControllerField,
    y0: float,
    t: float,
    epsilon: float,
    config: SimConfig,
    max_escaped_fraction: float = 0.01,
) -> PathEnsemble:
    """Steered paths with exact change-of-measure accounting.

    The controller drives dY = lambda dt + sqrt(eps) dW on [t, T - cutoff];
    the final stretch runs the plain drift.  log_girsanov_weight holds
    log dP/dQ along each path, so averaging exp(weight) * functional
    recovers plain-law expectations.  Paths that leave the controller's
    window freeze in place and are flagged; more than max_escaped_fraction
    of them aborts the run.
    """
    T = spec.horizon_T
    span = T - t
    cutoff = config.cutoff(span)
    if cutoff >= span:
        raise ValueError("terminal cutoff swallows the whole horizon")
    n_ctl = _check_dt(config.dt, span - cutoff)
    n_free = max(1, int(math.ceil(cutoff / config.dt - 1e-12)))
    times = np.concatenate(
        [
            np.linspace(t, T - cutoff, n_ctl + 1),
            np.linspace(T - cutoff, T, n_free + 1)[1:],
        ]
    )
    if times[n_ctl - 1] > controller.t_valid_max + 1e-12:
        raise ControllerError(
            "controller time resolution too coarse near the horizon: "
            f"last steered step at {times[n_ctl - 1]:.6g} but coverage ends "
            f"at {controller.t_valid_max:.6g}; refine the time grid or "
            "enlarge the cutoff"
        )
    n_paths = config.n_paths
    rng = _generator(config.seed)
    paths = np.empty((n_paths, times.size))
    paths[:, 0] = y0
    y = np.full(n_paths, float(y0))
    alive = np.ones(n_paths, dtype=bool)

    logw = np.zeros(n_paths)
    logw_comp = np.zeros(n_paths)
    accum = {
        "cost": np.zeros(n_paths),
        "slope_y": np.zeros(n_paths),
        "slope_x": np.zeros(n_paths),
        "slope_sum": np.zeros(n_paths),
    }
    comps = {k: np.zeros(n_paths) for k in accum}

    sqrt_eps = math.sqrt(epsilon)
    for k in range(n_ctl):
        s = times[k]
        h = times[k + 1] - times[k]
        lam, valid = controller.evaluate(y, s)
        alive &= valid
        b_now = np.asarray(spec.b(y, s), dtype=float)
        by_now = np.asarray(spec.db_dy(y, s), dtype=float)
        excess = np.where(alive, lam - b_now, 0.0)
        xi = rng.standard_normal(n_paths)
        dw = math.sqrt(h) * xi
        step = np.where(alive, (b_now + excess) * h + sqrt_eps * dw, 0.0)
        y = y + step
        paths[:, k + 1] = y
        _kahan(logw, logw_comp, -(excess / sqrt_eps) * dw - (excess**2 / (2.0 * epsilon)) * h)
        _kahan(accum["cost"], comps["cost"], excess**2 * h)
        _kahan(accum["slope_y"], comps["slope_y"], (1.0 + (T - s) * by_now) * excess * h)
        _kahan(accum["slope_x"], comps["slope_x"], (1.0 - (s - t) * by_now) * excess * h)
        _kahan(accum["slope_sum"], comps["slope_sum"], by_now * excess * h)

    for k in range(n_ctl, times.size - 1):
        s = times[k]
        h = times[k + 1] - times[k]
        xi = rng.standard_normal(n_paths)
        step = np.asarray(spec.b(y, s), dtype=float) * h + sqrt_eps * math.sqrt(h) * xi
        y = y + np.where(alive, step, 0.0)
        paths[:, k + 1] = y

    escaped = ~alive
    fraction = float(np.count_nonzero(escaped)) / n_paths
    if fraction > max_escaped_fraction:
        raise GridCoverageError(
            f"{fraction:.2%} of paths left the controller window "
            f"(limit {max_escaped_fraction:.2%}); widen the solve"
        )
    return PathEnsemble(
        times=times,
        paths=paths,
        log_girsanov_weight=logw,
        seed=config.seed,
        escaped=escaped,
        cutoff_index=n_ctl,
        integrals=accum,
    )


# ---------------------------------------------------------------- averages

def representation_q(ensemble: PathEnsemble) -> EstimatorResult:
    """Cost as half the mean accumulated squared excess drift."""
    kept = ensemble.kept
    vals = 0.5 * ensemble.integrals["cost"][kept]
    n = int(vals.size)
    return EstimatorResult(
        name="cost_representation",
        estimate=float(np.mean(vals)),
        std_error=float(np.std(vals, ddof=1) / math.sqrt(n)),
        n=n,
        extra={"escaped_fraction": 1.0 - n / ensemble.paths.shape[0]},
    )


def representation_dq(ensemble: PathEnsemble) -> dict[str, EstimatorResult]:
    """Both slope representations plus their drift-weighted sum identity."""
    kept = ensemble.kept
    span = float(ensemble.times[-1] - ensemble.times[0])
    n = int(np.count_nonzero(kept))
    out = {}
    for key, sign, scale in (
        ("slope_y", -1.0, span),
        ("slope_x", 1.0, span),
        ("slope_sum", -1.0, 1.0),
    ):
        vals = sign * ensemble.integrals[key][kept] / scale
        out[key] = EstimatorResult(
            name=f"{key}_representation",
            estimate=float(np.mean(vals)),
            std_error=float(np.std(vals, ddof=1) / math.sqrt(n)),
            n=n,
        )
    return out


def importance_sampling(
    spec: DriftSpec,
    controller: ControllerField,
    y0: float,
    x: float,
    t: float,
    epsilon: float,
    config: SimConfig,
) -> EstimatorResult:
    """Exceedance probability under the plain law via steered proposals.

    Reweights steered paths by exp(log dP/dQ); the effective sample size
    of the weights is reported, with a warning when it collapses.
    """
    ens = simulate_controlled(spec, controller, y0, t, epsilon, config)
    kept = ens.kept
    weights = np.exp(ens.log_girsanov_weight[kept])
    hits = (ens.paths[kept, -1] > x).astype(float)
    vals = weights * hits
    n = int(vals.size)
    estimate = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n))
    wsum = float(np.sum(weights))
    ess = wsum * wsum / float(np.dot(weights, weights)) if wsum > 0 else 0.0
    if ess < 10.0:
        warnings.warn(f"importance weights collapsed: ESS {ess:.2f}", RuntimeWarning)
    # what a plain binomial estimator of the same mass would spend per path
    naive_var = estimate * (1.0 - estimate) / n
    return EstimatorResult(
        name="exceedance_steered",
        estimate=estimate,
        std_error=se,
        n=n,
        extra={
            "ess": ess,
            "mean_weight": float(np.mean(weights)),
            "escaped_fraction": 1.0 - n / config.n_paths,
            "variance_ratio": naive_var / se**2 if se > 0.0 else math.inf,
        },
    )


# -------------------------------------------------------------- pinned pull

def simulate_pinned_pull(
    mu: float,
    z0: float,
    t: float,
    horizon_T: float,
    sample_time: float,
    epsilon: float,
    config: SimConfig,
) -> np.ndarray:
    """Samples of dZ = -mu Z/(T - s) ds + sqrt(eps) dW at a fixed time.

    The pull drives Z toward zero at the horizon; sample_time must stay
    strictly short of it so the coefficient remains bounded.
    """
    if not t < sample_time < horizon_T:
        raise ValueError("need t < sample_time < horizon_T")
    span = sample_time - t
    n_steps = _check_dt(config.dt, span)
    times = np.linspace(t, sample_time, n_steps + 1)
    rng = _generator(config.seed)
    z = np.full(config.n_paths, float(z0))
    for k in range(n_steps):
        h = times[k + 1] - times[k]
        z = z - mu * z / (horizon_T - times[k]) * h + math.sqrt(
            epsilon * h
        ) * rng.standard_normal(config.n_paths)
    return z


# ------------------------------------------------------------------ export

def ensemble_rows(
    ensemble: PathEnsemble, path_stride: int = 1, time_stride: int = 1
) -> Iterator[tuple[int, float, float]]:
    """(path_id, s, y) rows for the CSV exporter."""
    for pid in range(0, ensemble.paths.shape[0], path_stride):
        for k in range(0, ensemble.times.size, time_stride):
            yield pid, float(ensemble.times[k]), float(ensemble.paths[pid, k])


def ensemble_header(ensemble: PathEnsemble, epsilon: float) -> dict:
    return {
        "seed": ensemble.seed,
        "n_paths": int(ensemble.paths.shape[0]),
        "n_times": int(ensemble.times.size),
        "t_start": float(ensemble.times[0]),
        "t_end": float(ensemble.times[-1]),
        "epsilon": epsilon,
        "escaped": int(0 if ensemble.escaped is None else np.count_nonzero(ensemble.escaped)),
    }
