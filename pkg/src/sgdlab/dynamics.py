"""SGD recursion, step-size schedules and trajectory recording.

Indexing: ``x_0`` is the initial point and the step that produces ``x_n``
(n >= 1) uses step size ``gamma_n`` and signal ``V_n = grad f(x_{n-1}) + xi_n``:

    x_n = x_{n-1} - gamma_n V_n,    tau_n = gamma_1 + ... + gamma_n.

This is the usual ``X_{n+1} = X_n - gamma_n V_n`` with the start labelled 0,
and it makes the interpolated path pass through ``x_n`` at time ``tau_n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .objectives import Objective
from .oracle import NoiseModel
from .seeding import make_rng

SCHEDULE_KINDS = ("power_law", "constant", "cooldown")
RECORD_POLICIES = ("full", "thinned", "diagnostics_only")

# noise is drawn in fixed-size blocks per run, so a run's stream does not
# depend on how many runs share a batch
NOISE_BLOCK = 1024


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "power_law"
    gamma: float = 1.0
    offset_m: int = 0
    exponent_p: float = 1.0
    switch_iter: Optional[int] = None
    # coefficient of the 1/k phase of a cooldown schedule; defaults to gamma
    cooldown_gamma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.offset_m < 0 or int(self.offset_m) != self.offset_m:
            raise ValueError("offset_m must be a nonnegative integer")
        if not 0 < self.exponent_p <= 1:
            raise ValueError("exponent_p must lie in (0, 1]")
        if self.kind == "cooldown":
            if self.switch_iter is None or self.switch_iter < 1:
                raise ValueError("cooldown schedule needs switch_iter >= 1")
            if self.cooldown_gamma is not None and not self.cooldown_gamma > 0:
                raise ValueError("cooldown_gamma must be positive")

    def steps(self, n) -> np.ndarray:
        """Vectorized gamma_n for integer n >= 1."""
        n = np.asarray(n, dtype=float)
        if self.kind == "constant":
            return np.full(n.shape, float(self.gamma))
        if self.kind == "power_law":
            return self.gamma / (n + self.offset_m) ** self.exponent_p
        cool = self.gamma if self.cooldown_gamma is None else self.cooldown_gamma
        k = np.maximum(n - self.switch_iter + 1.0, 1.0)
        return np.where(n < self.switch_iter, float(self.gamma), cool / k)


def step_size(sched: StepSchedule, n: int) -> float:
    if n < 1:
        raise ValueError("step index starts at 1")
    return float(sched.steps(np.array([n]))[0])


def admissible(sched: StepSchedule, q: float) -> bool:
    """Power law with p in (2/(q+2), 1]; q = inf lowers the bound to 0."""
    if not q >= 2:
        raise ValueError("moment order q must be >= 2")
    if sched.kind != "power_law":
        return False
    lower = 0.0 if math.isinf(q) else 2.0 / (q + 2.0)
    return lower < sched.exponent_p <= 1.0


def proper_times(sched: StepSchedule, n_iters: int) -> np.ndarray:
    """tau_0 = 0, ..., tau_N."""
    n = np.arange(n_iters + 1)
    if sched.kind == "constant":
        return n * float(sched.gamma)
    return np.concatenate([[0.0], np.cumsum(sched.steps(n[1:]))])


def thinned_indices(n_iters: int, dense: int = 1000) -> np.ndarray:
    """0..dense, then every ceil(n/dense)-th index, plus the last one."""
    parts = [np.arange(min(n_iters, dense) + 1)]
    s = 2
    while dense * (s - 1) < n_iters:
        lo = dense * (s - 1) + 1
        hi = min(dense * s, n_iters)
        first = -(-lo // s) * s
        parts.append(np.arange(first, hi + 1, s))
        s += 1
    idx = np.unique(np.concatenate(parts + [[n_iters]]))
    return idx[idx <= n_iters].astype(np.int64)


def log_grid(n_iters: int, per_decade: int = 20) -> np.ndarray:
    """0 plus roughly geometric integer indices up to n_iters."""
    if n_iters < 1:
        return np.array([0], dtype=np.int64)
    k = int(math.ceil(per_decade * math.log10(n_iters))) + 1
    pts = np.unique(np.round(np.logspace(0, math.log10(n_iters), k)).astype(np.int64))
    return np.unique(np.concatenate([[0], pts, [n_iters]]))


@dataclass(frozen=True)
class Monitor:
    """Distances and radii tracked at every step (not only at stored indices)."""

    r_enter: float = 0.1
    r_escape: float = 1.0
    r_max: float = 1e8
    track_features: bool = True


@dataclass
class Trajectory:
    indices: np.ndarray
    proper_times: np.ndarray
    step_sizes: np.ndarray
    iterates: Optional[np.ndarray]
    signals: Optional[np.ndarray]
    f_values: np.ndarray
    grad_norms: np.ndarray
    feature_distances: dict
    seed: Optional[int]
    schedule: StepSchedule
    n_iters: int
    final_iter: int
    final_point: np.ndarray
    diverged: bool = False
    sup_norm: float = 0.0
    entered: dict = field(default_factory=dict)
    escaped: dict = field(default_factory=dict)
    max_distance: dict = field(default_factory=dict)
    record_policy: str = "thinned"

    def __len__(self):
        return len(self.indices)


def run_sgd(
    obj: Objective,
    noise: NoiseModel,
    sched: StepSchedule,
    x0,
    n_iters: int,
    seed: int,
    record_policy: str = "thinned",
    monitor: Monitor = Monitor(),
    record_indices: Optional[np.ndarray] = None,
) -> Trajectory:
    """One seeded SGD run; see :func:`run_batch` for the recording rules."""
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    return run_batch(obj, noise, sched, x0, n_iters, [seed], record_policy, monitor, record_indices)[0]


def run_batch(
    obj: Objective,
    noise: NoiseModel,
    sched: StepSchedule,
    x0,
    n_iters: int,
    seeds: Sequence[int],
    record_policy: str = "thinned",
    monitor: Monitor = Monitor(),
    record_indices: Optional[np.ndarray] = None,
) -> list[Trajectory]:
    """Run ``len(seeds)`` independent SGD runs in lockstep.

    Every run owns a PCG64 generator seeded from its entry in ``seeds`` and
    draws one fresh error per step, so results do not depend on the batch a
    run is placed in. ``x0`` is either one point or one point per run.

    Records are kept at ``record_indices`` (default: :func:`thinned_indices`,
    or every index for ``record_policy="full"``). A run whose norm exceeds
    ``monitor.r_max`` or turns non-finite is frozen and its trajectory is
    truncated at that step with ``diverged=True``.
    """
    if record_policy not in RECORD_POLICIES:
        raise ValueError(f"unknown record_policy {record_policy!r}")
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    if noise.dim != obj.dim:
        raise ValueError(f"noise dim {noise.dim} != objective dim {obj.dim}")
    n_runs = len(seeds)
    d = obj.dim
    x = np.array(np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1, d), (n_runs, d)))
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")

    if record_policy == "full":
        rec = np.arange(n_iters + 1)
    elif record_indices is not None:
        rec = np.unique(np.asarray(record_indices, dtype=np.int64))
        rec = rec[(rec >= 0) & (rec <= n_iters)]
    else:
        rec = thinned_indices(n_iters)
    n_rec = rec.size
    keep_x = record_policy != "diagnostics_only"
    keep_v = record_policy == "full"

    feats = obj.critical_set if monitor.track_features else ()
    rec_x = np.empty((n_runs, n_rec, d)) if keep_x else None
    rec_v = np.full((n_runs, n_rec, d), np.nan) if keep_v else None
    rec_f = np.empty((n_runs, n_rec))
    rec_g = np.empty((n_runs, n_rec))
    rec_dist = {f.id: np.empty((n_runs, n_rec)) for f in obj.critical_set}
    rec_tau = np.empty(n_rec)
    rec_gamma = np.empty(n_rec)

    entered = {f.id: np.full(n_runs, -1, dtype=np.int64) for f in feats}
    escaped = {f.id: np.full(n_runs, -1, dtype=np.int64) for f in feats}
    max_dist = {f.id: np.zeros(n_runs) for f in feats}
    r_enter, r_escape = monitor.r_enter, monitor.r_escape
    r_max_sq = monitor.r_max**2

    active = np.ones(n_runs, dtype=bool)
    final_iter = np.full(n_runs, n_iters, dtype=np.int64)
    any_diverged = False
    sup_sq = np.einsum("ij,ij->i", x, x)

    rngs = [make_rng(s) for s in seeds]
    zero_noise = noise.is_zero
    buf = np.zeros((n_runs, NOISE_BLOCK, d))

    def track(n, xs):
        for f in feats:
            dist = f.distance(xs)
            np.maximum(max_dist[f.id], dist, out=max_dist[f.id])
            e = entered[f.id]
            new_in = (e < 0) & (dist < r_enter) & active
            if new_in.any():
                e[new_in] = n
            out = (e >= 0) & (escaped[f.id] < 0) & (dist > r_escape) & active
            if out.any():
                escaped[f.id][out] = n

    def store(k, n, xs, v, tau, gamma):
        rec_tau[k] = tau
        rec_gamma[k] = gamma
        if keep_x:
            rec_x[:, k] = xs
        if keep_v and v is not None:
            rec_v[:, k] = v
        rec_f[:, k] = obj.eval(xs)
        rec_g[:, k] = np.linalg.norm(obj.grad(xs), axis=-1)
        for f in obj.critical_set:
            rec_dist[f.id][:, k] = f.distance(xs)

    track(0, x)
    ptr = 0
    if rec[0] == 0:
        store(0, 0, x, None, 0.0, np.nan)
        ptr = 1
    tau = 0.0
    constant = sched.kind == "constant"
    n = 0
    while n < n_iters:
        block = min(NOISE_BLOCK, n_iters - n)
        if not zero_noise:
            for r in range(n_runs):
                buf[r] = noise.draw(rngs[r], NOISE_BLOCK)
        gammas = sched.steps(np.arange(n + 1, n + block + 1))
        for j in range(block):
            n += 1
            gamma = gammas[j]
            v = obj.grad(x) + buf[:, j]
            x_new = x - gamma * v
            tau = n * sched.gamma if constant else tau + gamma
            sq = np.einsum("ij,ij->i", x_new, x_new)
            bad = ~(sq <= r_max_sq) & active
            if bad.any():
                any_diverged = True
                active &= ~bad
                final_iter[bad] = n
            if any_diverged:
                frozen = ~active & ~bad
                x_new[frozen] = x[frozen]
                sq[frozen] = sup_sq[frozen]
            x = x_new
            np.maximum(sup_sq, np.where(active, sq, 0.0), out=sup_sq)
            if feats:
                track(n, x)
            if ptr < n_rec and rec[ptr] == n:
                store(ptr, n, x, v, tau, gamma)
                ptr += 1

    out = []
    for r in range(n_runs):
        last = int(final_iter[r])
        div = last < n_iters or not active[r]
        keep = rec <= last
        if div and not np.any(rec == last):
            keep = rec < last
        sl = np.nonzero(keep)[0]
        out.append(
            Trajectory(
                indices=rec[sl].copy(),
                proper_times=rec_tau[sl].copy(),
                step_sizes=rec_gamma[sl].copy(),
                iterates=rec_x[r, sl].copy() if keep_x else None,
                signals=rec_v[r, sl].copy() if keep_v else None,
                f_values=rec_f[r, sl].copy(),
                grad_norms=rec_g[r, sl].copy(),
                feature_distances={k: a[r, sl].copy() for k, a in rec_dist.items()},
                seed=int(seeds[r]),
                schedule=sched,
                n_iters=n_iters,
                final_iter=last,
                final_point=x[r].copy(),
                diverged=bool(div),
                sup_norm=float(np.sqrt(sup_sq[r])) if not div else math.inf,
                entered={k: (int(a[r]) if a[r] >= 0 else None) for k, a in entered.items()},
                escaped={k: (int(a[r]) if a[r] >= 0 else None) for k, a in escaped.items()},
                max_distance={k: float(a[r]) for k, a in max_dist.items()},
                record_policy=record_policy,
            )
        )
    return out
