"""Ensemble statistics over SGD runs: classification, rates, escape, energy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import simpson

from .dynamics import Monitor, Trajectory
from .flow import FlowMap, flow_orbit
from .objectives import CriticalFeature, Objective

LIMIT_CLASSES = (
    "converged_to_minimizer",
    "converged_to_saddle_feature",
    "diverged",
    "undecided",
)


@dataclass(frozen=True)
class Tolerances:
    g_tol: float = 1e-4
    d_tol: float = 1e-2
    r_enter: float = 0.1
    r_escape: float = 1.0
    u_radius: float = 1.0
    r_max: float = 1e8

    def monitor(self, track_features: bool = True) -> Monitor:
        return Monitor(self.r_enter, self.r_escape, self.r_max, track_features)


@dataclass
class RunSummary:
    run_index: int
    seed: Optional[int]
    limit_class: str
    limit_feature: Optional[str]
    final_distance: float
    final_grad_norm: float
    sup_norm: float
    entered: dict
    escape_times: dict
    stayed_in_U: Optional[bool]
    max_excursion: Optional[float]
    distance_series: Optional[np.ndarray] = None

    def escape_time(self, feature_id: str):
        """First escape step after entry, ``"never"`` otherwise."""
        t = self.escape_times.get(feature_id)
        return "never" if t is None else t


def wilson_interval(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    from statsmodels.stats.proportion import proportion_confint

    lo, hi = proportion_confint(k, n, alpha=alpha, method="wilson")
    # the closed-form endpoints are exactly 0 at k = 0 and 1 at k = n; rounding can miss them
    lo = 0.0 if k == 0 else max(float(lo), 0.0)
    hi = 1.0 if k == n else min(float(hi), 1.0)
    return lo, hi


def _primary_minimizer(obj: Objective) -> Optional[CriticalFeature]:
    mins = [f for f in obj.critical_set if f.kind == "hurwicz_minimizer"]
    return mins[0] if mins else None


def classify_run(
    traj: Trajectory, obj: Objective, tolerances: Tolerances = Tolerances(), run_index: int = 0
) -> RunSummary:
    """Classify the run's end state.

    A run counts as converged to a minimizer when its final point is within
    ``d_tol * scale`` of a local-minimum feature and the gradient there is at
    most ``g_tol``; it counts as converged to a saddle feature when the final
    point is within ``d_tol * scale`` of it. Divergence flags take precedence.
    """
    x = np.asarray(traj.final_point, dtype=float)
    star = _primary_minimizer(obj)
    series = None
    if star is not None and star.id in traj.feature_distances:
        series = np.column_stack([traj.indices, traj.feature_distances[star.id] ** 2])
    stayed = excursion = None
    if star is not None and star.id in traj.max_distance:
        excursion = traj.max_distance[star.id]
        stayed = bool(excursion < tolerances.u_radius) and not traj.diverged

    cls, which = "undecided", None
    final_dist = math.inf
    gnorm = math.inf
    if traj.diverged:
        cls = "diverged"
    else:
        gnorm = float(np.linalg.norm(obj.grad(x)))
        if obj.critical_set:
            dists = [float(f.distance(x)) for f in obj.critical_set]
            k = int(np.argmin(dists))
            feat, final_dist = obj.critical_set[k], dists[k]
            close = final_dist <= tolerances.d_tol * feat.scale
            if feat.is_local_min:
                if close and gnorm <= tolerances.g_tol:
                    cls, which = "converged_to_minimizer", feat.id
            elif close:
                cls, which = "converged_to_saddle_feature", feat.id
    return RunSummary(
        run_index=run_index,
        seed=traj.seed,
        limit_class=cls,
        limit_feature=which,
        final_distance=final_dist,
        final_grad_norm=gnorm,
        sup_norm=traj.sup_norm,
        entered=dict(traj.entered),
        escape_times=dict(traj.escaped),
        stayed_in_U=stayed,
        max_excursion=excursion,
        distance_series=series,
    )


@dataclass
class RateFit:
    exponent: float
    coefficient: float
    stderr: float
    n_points: int
    window: tuple
    regime: str = "power_law"


@dataclass
class EnsembleStats:
    n_runs: int
    class_counts: dict
    frequencies: dict
    intervals: dict
    curve_n: np.ndarray
    curve_mean: np.ndarray
    curve_stderr: np.ndarray
    n_conditioned: int
    uncond_mean: np.ndarray
    uncond_stderr: np.ndarray
    escape_quantiles: dict = field(default_factory=dict)
    rate: Optional[RateFit] = None


def ensemble_stats(runs: Sequence[RunSummary]) -> EnsembleStats:
    """Aggregate summaries; order-independent because runs are sorted first."""
    if not runs:
        raise ValueError("no runs")
    runs = sorted(runs, key=lambda r: r.run_index)
    n = len(runs)
    counts = {c: 0 for c in LIMIT_CLASSES}
    for r in runs:
        counts[r.limit_class] += 1
    freqs = {c: counts[c] / n for c in LIMIT_CLASSES}
    intervals = {c: wilson_interval(counts[c], n) for c in LIMIT_CLASSES}

    series = [r.distance_series for r in runs if r.distance_series is not None and not _diverged(r)]
    curve_n = np.array([], dtype=np.int64)
    mean = stderr = umean = ustderr = np.array([])
    n_cond = 0
    if series:
        grid = series[0][:, 0]
        if all(s.shape == series[0].shape and np.array_equal(s[:, 0], grid) for s in series):
            curve_n = grid.astype(np.int64)
            all_sq = np.stack([s[:, 1] for s in series])
            umean, ustderr = _mean_stderr(all_sq)
            cond = np.array(
                [bool(r.stayed_in_U) for r in runs if r.distance_series is not None and not _diverged(r)]
            )
            n_cond = int(cond.sum())
            if n_cond:
                mean, stderr = _mean_stderr(all_sq[cond])

    quantiles = {}
    ids = sorted({k for r in runs for k in r.escape_times})
    for fid in ids:
        times = [r.escape_times[fid] for r in runs if r.escape_times.get(fid) is not None]
        if times:
            q = np.quantile(np.array(times, dtype=float), [0.1, 0.5, 0.9])
            quantiles[fid] = {"q10": float(q[0]), "median": float(q[1]), "q90": float(q[2])}
    return EnsembleStats(
        n_runs=n,
        class_counts=counts,
        frequencies=freqs,
        intervals=intervals,
        curve_n=curve_n,
        curve_mean=mean,
        curve_stderr=stderr,
        n_conditioned=n_cond,
        uncond_mean=umean,
        uncond_stderr=ustderr,
        escape_quantiles=quantiles,
    )


def _diverged(r: RunSummary) -> bool:
    return r.limit_class == "diverged"


def _mean_stderr(a: np.ndarray):
    m = a.mean(axis=0)
    if a.shape[0] < 2:
        return m, np.full_like(m, np.nan)
    return m, a.std(axis=0, ddof=1) / math.sqrt(a.shape[0])


def fit_power_law(n, y, window: tuple) -> RateFit:
    """Least-squares line through (log n, log y) for n in the window."""
    n_lo, n_hi = window
    if not (n_lo > 0 and n_hi >= 100 * n_lo):
        raise ValueError("fit window must span at least two decades")
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    sel = (n >= n_lo) & (n <= n_hi)
    n, y = n[sel], y[sel]
    if n.size < 3:
        raise ValueError("fewer than three curve points inside the window")
    if np.all(y == 0):
        raise ValueError("all distances are zero")
    floor = 1e-300
    if np.any(~(y > floor)):
        return RateFit(-math.inf, 0.0, math.nan, int(n.size), (n_lo, n_hi), "below_noise_floor")
    ln, ly = np.log(n), np.log(y)
    X = np.column_stack([np.ones_like(ln), ln])
    beta, *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - X @ beta
    dof = max(n.size - 2, 1)
    s2 = float(resid @ resid) / dof
    se = math.sqrt(s2 / float(np.sum((ln - ln.mean()) ** 2)))
    regime = "power_law"
    # a power law has one slope across the window; superpolynomial decay steepens
    mid = math.sqrt(n_lo * n_hi)
    halves = [(ln <= math.log(mid)), (ln >= math.log(mid))]
    if all(h.sum() >= 2 for h in halves):
        s1, s2_ = (np.polyfit(ln[h], ly[h], 1)[0] for h in halves)
        if s2_ < s1 - max(0.5, 0.5 * abs(s1)):
            regime = "below_noise_floor"
    return RateFit(float(beta[1]), float(math.exp(beta[0])), se, int(n.size), (n_lo, n_hi), regime)


def fit_rate(stats: EnsembleStats, n_window: tuple, conditioned: bool = True) -> RateFit:
    """Slope of log E|x_n - x*|^2 against log n over the window (runs in E_U)."""
    y = stats.curve_mean if conditioned else stats.uncond_mean
    if conditioned and stats.n_conditioned == 0:
        raise ValueError("no run stayed in U; conditioned curve is empty")
    if stats.curve_n.size == 0:
        raise ValueError("ensemble has no distance curve")
    fit = fit_power_law(stats.curve_n, y, n_window)
    stats.rate = fit
    return fit


@dataclass
class EscapeStats:
    feature_id: str
    n_runs: int
    n_entered: int
    n_converged_to_saddle: int
    fraction: float
    wilson_ci: tuple
    n_escaped: int
    escape_quantiles: dict


def escape_statistics(runs: Sequence[RunSummary], feature_id: str, min_runs: int = 30) -> EscapeStats:
    entered = [r for r in runs if r.entered.get(feature_id) is not None]
    if not entered:
        raise ValueError(f"no run entered the neighborhood of {feature_id!r}")
    if len(entered) < min_runs:
        raise ValueError(f"only {len(entered)} runs entered {feature_id!r}; need {min_runs}")
    k = sum(
        1
        for r in entered
        if r.limit_class == "converged_to_saddle_feature" and r.limit_feature == feature_id
    )
    times = np.array([r.escape_times[feature_id] for r in entered if r.escape_times.get(feature_id) is not None])
    quant = {}
    if times.size:
        q = np.quantile(times.astype(float), [0.1, 0.5, 0.9])
        quant = {"q10": float(q[0]), "median": float(q[1]), "q90": float(q[2])}
    return EscapeStats(
        feature_id=feature_id,
        n_runs=len(runs),
        n_entered=len(entered),
        n_converged_to_saddle=k,
        fraction=k / len(entered),
        wilson_ci=wilson_interval(k, len(entered)),
        n_escaped=int(times.size),
        escape_quantiles=quant,
    )


def stay_probability(runs: Sequence[RunSummary], U_radius: float) -> tuple[float, tuple]:
    """Fraction of runs whose whole path stayed within U_radius of the minimizer."""
    if not runs:
        raise ValueError("no runs")
    if any(r.max_excursion is None for r in runs):
        raise ValueError("runs carry no excursion data for a minimizer")
    k = sum(1 for r in runs if r.limit_class != "diverged" and r.max_excursion < U_radius)
    return k / len(runs), wilson_interval(k, len(runs))


@dataclass
class ChungResult:
    n: np.ndarray
    a: np.ndarray
    normalized: np.ndarray
    n0: int
    limit: float
    predicted: float
    rel_increment: float
    converged: bool


def chung_oracle(
    P: float,
    R: float,
    p: float,
    r: float,
    m: int = 0,
    a0: float = 0.0,
    n_max: int = 10**6,
    tol: float = 1e-3,
    n_keep: int = 400,
) -> ChungResult:
    """Iterate a_{n+1} = (1 - P/(n+m)^p) a_n + R/(n+m)^(p+r) from the first n0
    where the bracket is positive, and track a_n n^r.

    The sequence is kept at about ``n_keep`` geometrically spaced indices.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if not (r > 0 and P > 0 and R >= 0):
        raise ValueError("need r > 0, P > 0, R >= 0")
    if p == 1 and not P > r:
        raise ValueError("p = 1 requires P > r")
    if m < 0 or a0 < 0:
        raise ValueError("m and a0 must be nonnegative")
    n = 1
    while P / (n + m) ** p >= 1.0:
        n += 1
    n0 = n
    if n_max <= n0:
        raise ValueError("n_max must exceed the start index")
    keep = set(np.unique(np.round(np.geomspace(n0, n_max, n_keep)).astype(np.int64)).tolist())
    keep.add(n_max)
    keep.add(n_max // 2)
    ns, vals = [], []
    a = float(a0)
    pr = p + r
    while True:
        if n in keep:
            ns.append(n)
            vals.append(a)
        if n >= n_max:
            break
        nm = n + m
        a = (1.0 - P / nm**p) * a + R / nm**pr
        n += 1
    ns = np.array(ns, dtype=np.int64)
    vals = np.array(vals)
    norm = vals * ns.astype(float) ** r
    predicted = R / P if p < 1 else R / (P - r)
    half = norm[ns == n_max // 2][0]
    last = norm[-1]
    inc = abs(last - half) / abs(last) if last != 0 else (0.0 if half == 0 else math.inf)
    return ChungResult(ns, vals, norm, n0, float(last), predicted, float(inc), bool(inc < tol))


# ---------------------------------------------------------------------------
# energy function near an analytic saddle


def _saddle_feature(obj: Objective, feature_id: Optional[str]) -> CriticalFeature:
    feats = [f for f in obj.critical_set if f.unstable_distance is not None]
    if feature_id is not None:
        feats = [f for f in feats if f.id == feature_id]
    if not feats:
        raise ValueError(f"{obj.name} carries no analytic center-stable manifold data")
    return feats[0]


def energy(
    obj: Objective,
    x,
    tau: float = 1.0,
    feature_id: Optional[str] = None,
    n_nodes: int = 257,
    fm: Optional[FlowMap] = None,
):
    """Lambda(x) = integral over [0, tau] of zeta(Phi_{-t}(x)) dt.

    zeta is the distance to the center-stable manifold along the unstable
    directions; the backward orbit is integrated numerically and the integral
    is taken with Simpson's rule.
    """
    feat = _saddle_feature(obj, feature_id)
    x = np.asarray(x, dtype=float)
    back = (fm or FlowMap(obj)).reversed() if (fm is None or fm.direction > 0) else fm
    nodes = np.linspace(0.0, tau, n_nodes)
    states = np.concatenate([x[None], flow_orbit(back, x, nodes[1:])])
    zeta = feat.unstable_distance(states)
    return simpson(zeta, x=nodes, axis=0)


@dataclass
class EnergyReport:
    tau: float
    beta_fit: float
    beta_required: float
    growth_times: np.ndarray
    growth_values: np.ndarray
    n_gradient_points: int
    n_gradient_violations: int
    max_gradient_ratio: float
    manifold_max: float
    sgd_mean_residual: Optional[float] = None
    sgd_stderr: Optional[float] = None
    sgd_allowance: Optional[float] = None
    sgd_n_steps: int = 0

    @property
    def ok(self) -> bool:
        sgd_ok = self.sgd_mean_residual is None or (
            self.sgd_mean_residual >= -3 * self.sgd_stderr - self.sgd_allowance
        )
        return (
            self.beta_fit > self.beta_required
            and self.n_gradient_violations == 0
            and self.manifold_max <= 1e-12
            and sgd_ok
        )


def energy_growth_check(
    obj: Objective,
    tau: float = 1.0,
    flow_start=None,
    t_span: float = 3.0,
    feature_id: Optional[str] = None,
    n_points: int = 200,
    radius: float = 0.5,
    trajectories: Optional[Sequence[Trajectory]] = None,
    near_radius: float = 0.5,
    seed: int = 0,
) -> EnergyReport:
    """Empirical geometric growth of the energy function near a strict saddle.

    * along the flow from ``flow_start``, beta is the least-squares slope of
      log Lambda against t and must exceed half the declared spectral gap;
    * at random points off the manifold, <grad Lambda, grad f> <= -beta Lambda
      with beta = c_minus / 2 (gradient by central differences);
    * for fully recorded SGD trajectories, steps started within
      ``near_radius`` of the saddle satisfy
      E[Lambda(x_n) - Lambda(x_{n-1})] >= beta gamma_n Lambda(x_{n-1}) - O(gamma_n^2),
      reported as the mean of (dLambda - beta gamma Lambda) / gamma with an
      O(gamma) allowance of mean(gamma |V|^2).
    """
    feat = _saddle_feature(obj, feature_id)
    fm = FlowMap(obj)
    beta_req = 0.5 * feat.spectrum_bounds[0]
    if flow_start is None:
        base = feat.stable_point if feat.stable_point is not None else feat.point
        flow_start = np.array(base, dtype=float)
        flow_start[1] += 0.01
    flow_start = np.asarray(flow_start, dtype=float)

    ts = np.linspace(0.0, t_span, 31)
    orbit = np.concatenate([flow_start[None], flow_orbit(fm, flow_start, ts[1:])])
    lam = energy(obj, orbit, tau, feat.id)
    beta_fit = float(np.polyfit(ts, np.log(lam), 1)[0])

    rng = np.random.default_rng(seed)
    d = obj.dim
    u = rng.normal(size=(n_points, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    pts = feat.point + radius * rng.random(n_points)[:, None] ** (1.0 / d) * u
    pts = pts[feat.unstable_distance(pts) > 1e-3]
    h = 1e-5
    steps = h * np.eye(d)
    lam_pts = energy(obj, pts, tau, feat.id)
    grad_lam = np.stack(
        [
            (energy(obj, pts + steps[i], tau, feat.id) - energy(obj, pts - steps[i], tau, feat.id)) / (2 * h)
            for i in range(d)
        ],
        axis=-1,
    )
    inner = np.sum(grad_lam * obj.grad(pts), axis=-1)
    slack = 1e-6 * (1.0 + lam_pts)
    violations = int(np.sum(inner > -beta_req * lam_pts + slack))
    ratio = float(np.max(inner / lam_pts)) if lam_pts.size else math.nan

    on_m = pts.copy()
    on_m[:, 1] = 0.0
    manifold_max = float(np.max(np.abs(energy(obj, on_m, tau, feat.id))))

    report = EnergyReport(
        tau=tau,
        beta_fit=beta_fit,
        beta_required=beta_req,
        growth_times=ts,
        growth_values=lam,
        n_gradient_points=int(pts.shape[0]),
        n_gradient_violations=violations,
        max_gradient_ratio=ratio,
        manifold_max=manifold_max,
    )
    if trajectories:
        resid, allow = [], []
        for tr in trajectories:
            if tr.signals is None or tr.iterates is None:
                raise ValueError("energy increments need fully recorded trajectories")
            x_prev, x_next = tr.iterates[:-1], tr.iterates[1:]
            gam = tr.step_sizes[1:]
            v = tr.signals[1:]
            near = feat.distance(x_prev) < near_radius
            if not near.any():
                continue
            lp = energy(obj, x_prev[near], tau, feat.id)
            ln = energy(obj, x_next[near], tau, feat.id)
            g = gam[near]
            resid.append((ln - lp - beta_req * g * lp) / g)
            allow.append(g * np.sum(v[near] ** 2, axis=-1))
        if resid:
            res = np.concatenate(resid)
            report.sgd_mean_residual = float(res.mean())
            report.sgd_stderr = float(res.std(ddof=1) / math.sqrt(res.size)) if res.size > 1 else math.inf
            report.sgd_allowance = float(np.concatenate(allow).mean())
            report.sgd_n_steps = int(res.size)
    return report
