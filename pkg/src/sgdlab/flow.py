"""Gradient flow, interpolated SGD paths and the pseudotrajectory deviation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .objectives import Objective


class FlowIntegrationError(RuntimeError):
    def __init__(self, message, last_state=None, last_time=None):
        super().__init__(message)
        self.last_state = last_state
        self.last_time = last_time


@dataclass(frozen=True)
class FlowMap:
    """Time-t solution map of dz/dt = -grad f(z).

    ``direction=-1`` gives the backward flow. Objectives that declare a
    ``flow_field`` (pseudo-gradient dynamics) use it instead of ``-grad f``.
    Integration is classical RK4 with step ``min(h_int, 0.1 / L_local)``; each
    call is repeated at half the step and Richardson-extrapolated, and the
    step is halved again while the difference exceeds ``tol`` per unit time.
    """

    obj: Objective
    h_int: float = 0.01
    tol: float = 1e-9
    direction: int = 1
    method: str = "rk4"
    h_min: float = 1e-7

    def field(self, x: np.ndarray) -> np.ndarray:
        if self.obj.flow_field is not None:
            v = self.obj.flow_field(x)
        else:
            v = -self.obj.grad(x)
        return v if self.direction > 0 else -v

    def reversed(self) -> "FlowMap":
        return FlowMap(self.obj, self.h_int, self.tol, -self.direction, self.method, self.h_min)

    def base_step(self, x: np.ndarray) -> float:
        L = self.obj.smooth_L
        if not math.isfinite(L):
            H = self.obj.hess(np.asarray(x, dtype=float).reshape(-1, self.obj.dim))
            L = float(np.max(np.linalg.norm(H, ord=2, axis=(-2, -1))))
        return min(self.h_int, 0.1 / L) if L > 0 else self.h_int


def _rk4_path(field, x, rel_times, h_max):
    """States at the increasing offsets ``rel_times`` (first entry 0)."""
    out = np.empty((len(rel_times),) + x.shape)
    out[0] = x
    y = x
    for i in range(1, len(rel_times)):
        span = rel_times[i] - rel_times[i - 1]
        if span > 0:
            nsub = max(1, int(math.ceil(span / h_max - 1e-12)))
            h = span / nsub
            for _ in range(nsub):
                k1 = field(y)
                k2 = field(y + 0.5 * h * k1)
                k3 = field(y + 0.5 * h * k2)
                k4 = field(y + h * k3)
                y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(y)):
                return out[:i], rel_times[i - 1]
        out[i] = y
    return out, None


def flow_orbit(fm: FlowMap, x0, times: Sequence[float]) -> np.ndarray:
    """Phi_t(x0) for every t in ``times`` (nondecreasing, t >= 0).

    ``x0`` may carry leading batch axes; the result has shape
    ``(len(times),) + x0.shape``.
    """
    x0 = np.asarray(x0, dtype=float)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("times must be a nonempty 1-d sequence")
    if times[0] < 0 or np.any(np.diff(times) < 0):
        raise ValueError("times must be nonnegative and nondecreasing")
    rel = np.concatenate([[0.0], times])
    t_end = float(times[-1])
    if t_end == 0:
        return np.broadcast_to(x0, (times.size,) + x0.shape).copy()
    h = fm.base_step(x0)
    while True:
        coarse, fail_c = _rk4_path(fm.field, x0, rel, h)
        fine, fail_f = _rk4_path(fm.field, x0, rel, 0.5 * h)
        if fail_c is None and fail_f is None:
            diff = fine - coarse
            err = float(np.max(np.linalg.norm(diff, axis=-1))) / 15.0
            scale = 1.0 + float(np.max(np.linalg.norm(fine, axis=-1)))
            if err <= fm.tol * max(1.0, t_end) * scale:
                return (fine + diff / 15.0)[1:]
        h *= 0.5
        if h < fm.h_min:
            raise FlowIntegrationError(
                "flow integration failed: step size underflow",
                last_state=fine[-1],
                last_time=fail_f,
            )


def integrate_flow(fm: FlowMap, x0, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("t must be nonnegative")
    x0 = np.asarray(x0, dtype=float)
    if t == 0:
        return x0.copy()
    return flow_orbit(fm, x0, [t])[0]


class InterpolatedPath:
    """Piecewise-linear path through ``points[k]`` at ``times[k]``.

    ``points`` has shape ``(K, d)`` or ``(K, R, d)`` for R paths sharing the
    same knot times (runs of one schedule always do).
    """

    def __init__(self, times, points):
        self.times = np.asarray(times, dtype=float)
        self.points = np.asarray(points, dtype=float)
        if self.times.ndim != 1 or self.times.size < 2:
            raise ValueError("need at least two knots")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if self.points.shape[0] != self.times.size:
            raise ValueError("one point per knot time")

    @classmethod
    def from_trajectory(cls, traj) -> "InterpolatedPath":
        if traj.iterates is None:
            raise ValueError("trajectory stores no iterates")
        return cls(traj.proper_times, traj.iterates)

    @classmethod
    def from_trajectories(cls, trajs) -> "InterpolatedPath":
        first = trajs[0]
        for t in trajs[1:]:
            if t.indices.shape != first.indices.shape or np.any(t.indices != first.indices):
                raise ValueError("trajectories must share recorded indices")
        return cls(first.proper_times, np.stack([t.iterates for t in trajs], axis=1))

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if np.any(t < self.t_min) or np.any(t > self.t_max):
            raise ValueError("time outside the path's range")
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t_lo, t_hi = self.times[k], self.times[k + 1]
        w = (t - t_lo) / (t_hi - t_lo)
        w = w.reshape(w.shape + (1,) * (self.points.ndim - 1))
        lo, hi = self.points[k], self.points[k + 1]
        out = lo + w * (hi - lo)
        return out[0] if scalar else out

    def knots_between(self, a: float, b: float) -> np.ndarray:
        return self.times[(self.times > a) & (self.times < b)]


def probe_grid(path: InterpolatedPath, t0: float, T: float, n_probe: int) -> np.ndarray:
    """Offsets h in [0, T]: a uniform grid joined with the knots inside the window."""
    grid = np.linspace(0.0, T, n_probe)
    knots = path.knots_between(t0, t0 + T) - t0
    return np.unique(np.concatenate([grid, knots[(knots > 0) & (knots < T)]]))


def apt_deviation(path: InterpolatedPath, fm: FlowMap, t0: float, T: float, n_probe: int = 64):
    """max_h |A(t0 + h) - Phi_h(A(t0))| over the probe grid.

    The sup is taken over a finite grid, so it is approximated from below;
    the uniform part has resolution T / (n_probe - 1). Returns a float, or an
    array with one value per path when the path is batched.
    """
    if n_probe < 16:
        raise ValueError("n_probe must be at least 16")
    if T <= 0:
        raise ValueError("window length must be positive")
    if t0 < path.t_min or t0 + T > path.t_max:
        raise ValueError(
            f"window [{t0}, {t0 + T}] exceeds the path's range [{path.t_min}, {path.t_max}]"
        )
    h = probe_grid(path, t0, T, n_probe)
    start = path(t0)
    flow = flow_orbit(fm, start, h)
    along = path(t0 + h)
    dev = np.max(np.linalg.norm(along - flow, axis=-1), axis=0)
    return float(dev) if np.ndim(dev) == 0 else dev


def apt_profile(path: InterpolatedPath, fm: FlowMap, T: float, t0_list, n_probe: int = 64):
    return [(float(t0), apt_deviation(path, fm, float(t0), T, n_probe)) for t0 in t0_list]


@dataclass
class LyapunovReport:
    times: np.ndarray
    f_values: np.ndarray
    max_residual: float
    residual_tol: float
    max_increase: float
    terminal_point: np.ndarray
    terminal_distance: float

    @property
    def monotone(self) -> bool:
        return self.max_increase <= 1e-9

    @property
    def ok(self) -> bool:
        return self.monotone and self.max_residual <= self.residual_tol


def lyapunov_check(fm: FlowMap, x0, t_max: float, tol: Optional[float] = None) -> LyapunovReport:
    """Check df/dt = <grad f, dz/dt> (= -|grad f|^2 for gradient flows) along the orbit.

    Nodes are spaced by the integrator's base step. Over each pair of
    intervals the change in f is compared with Simpson's rule applied to the
    rate, so the residual is O(step^4) for smooth orbits.
    """
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    x0 = np.asarray(x0, dtype=float)
    h = fm.base_step(x0)
    n = max(16, int(math.ceil(t_max / h)))
    n += n % 2
    times = np.linspace(0.0, t_max, n + 1)
    states = np.concatenate([x0[None], flow_orbit(fm, x0, times[1:])])
    obj = fm.obj
    f = obj.eval(states)
    rate = np.sum(obj.grad(states) * fm.field(states), axis=-1)
    span = times[2::2] - times[:-2:2]
    simpson_rate = (rate[:-2:2] + 4.0 * rate[1:-1:2] + rate[2::2]) / 6.0
    resid = np.abs((f[2::2] - f[:-2:2]) / span - simpson_rate)
    if tol is None:
        tol = 1e-4 * (1.0 + float(np.max(np.abs(rate))))
    end = states[-1]
    dists = [float(feat.distance(end)) for feat in obj.critical_set]
    return LyapunovReport(
        times=times,
        f_values=f,
        max_residual=float(np.max(resid)),
        residual_tol=float(tol),
        max_increase=float(np.max(np.diff(f), initial=-math.inf)),
        terminal_point=end,
        terminal_distance=min(dists) if dists else math.inf,
    )
