"""Seeded ensemble orchestration for each experiment kind."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..analysis import (
    RunSummary,
    chung_oracle,
    classify_run,
    ensemble_stats,
    escape_statistics,
    fit_rate,
    stay_probability,
)
from ..dynamics import StepSchedule, admissible, log_grid, proper_times, run_batch
from ..flow import FlowMap, InterpolatedPath, apt_profile, integrate_flow
from ..objectives import Objective
from ..oracle import NoiseModel, builtin_noise
from ..seeding import make_rng, run_seed, splitmix64
from .config import ConfigError, ExperimentConfig, validate

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentReport:
    kind: str
    config: ExperimentConfig
    summary: dict
    curve_header: tuple = ()
    curve: list = field(default_factory=list)
    runs_header: tuple = ()
    runs: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


RUNS_HEADER = (
    "run_index",
    "seed",
    "limit_class",
    "limit_feature",
    "final_distance",
    "final_grad_norm",
    "sup_norm",
    "stayed_in_U",
    "escape_time",
)


def resolve_x0(cfg: ExperimentConfig, obj: Objective, seeds) -> np.ndarray:
    """One starting point per run, shape (n_runs, d)."""
    spec = cfg.x0
    n = len(seeds)
    if spec is None:
        star = obj.minimizers()
        base = star[0].point if star else np.zeros(obj.dim)
        return np.tile(base, (n, 1))
    if isinstance(spec, (list, tuple)):
        x = np.asarray(spec, dtype=float).reshape(-1)
        if x.size != obj.dim:
            raise ConfigError(f"x0 has {x.size} coordinates, objective has dim {obj.dim}")
        return np.tile(x, (n, 1))
    if isinstance(spec, str):
        head, _, arg = spec.partition(":")
        if head in ("on_stable_manifold", "on_feature"):
            try:
                feat = obj.feature(arg)
            except KeyError as exc:
                raise ConfigError(str(exc)) from None
            base = feat.stable_point if head == "on_stable_manifold" else feat.point
            if base is None:
                raise ConfigError(f"feature {arg!r} declares no stable-manifold point")
            return np.tile(base, (n, 1))
        if head == "ball":
            radius = float(arg)
            star = obj.minimizers()
            center = star[0].point if star else np.zeros(obj.dim)
            out = np.empty((n, obj.dim))
            for i, s in enumerate(seeds):
                rng = make_rng(splitmix64(s ^ 0x5EED))
                u = rng.standard_normal(obj.dim)
                u /= np.linalg.norm(u)
                out[i] = center + radius * rng.random() ** (1.0 / obj.dim) * u
            return out
    raise ConfigError(f"cannot interpret x0 spec {spec!r}")


def _ensemble(
    cfg: ExperimentConfig,
    obj: Objective,
    noise: NoiseModel,
    sched: StepSchedule,
    threads: int,
    record_indices: Optional[np.ndarray] = None,
    n_runs: Optional[int] = None,
):
    n_runs = cfg.n_runs if n_runs is None else n_runs
    seeds = [run_seed(cfg.base_seed, i) for i in range(n_runs)]
    x0 = resolve_x0(cfg, obj, seeds)
    policy = cfg.record_policy
    if record_indices is None and policy != "full":
        record_indices = log_grid(cfg.n_iters)
    monitor = cfg.tolerances.monitor()
    threads = max(1, min(int(threads), n_runs))
    bounds = np.linspace(0, n_runs, threads + 1).astype(int)

    def job(k):
        lo, hi = bounds[k], bounds[k + 1]
        return run_batch(obj, noise, sched, x0[lo:hi], cfg.n_iters, seeds[lo:hi], policy, monitor, record_indices)

    if threads == 1:
        trajs = job(0)
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(job, range(threads)))
        trajs = [t for part in parts for t in part]
    return seeds, trajs


def _summaries(trajs, obj, cfg) -> list[RunSummary]:
    return [classify_run(t, obj, cfg.tolerances, run_index=i) for i, t in enumerate(trajs)]


def _run_rows(runs: list[RunSummary], feature: Optional[str] = None) -> list[tuple]:
    rows = []
    for r in runs:
        esc = ""
        if feature is not None:
            esc = r.escape_time(feature)
        rows.append(
            (
                r.run_index,
                r.seed,
                r.limit_class,
                r.limit_feature or "",
                r.final_distance,
                r.final_grad_norm,
                r.sup_norm,
                "" if r.stayed_in_U is None else int(r.stayed_in_U),
                esc,
            )
        )
    return rows


def run_experiment(cfg: ExperimentConfig, threads: int = 1, out_dir: Optional[str] = None) -> ExperimentReport:
    """Execute ``cfg.n_runs`` runs (seed of run i: splitmix of base_seed and i)
    and build the kind's report; artifacts are written when an output
    directory is given here or in the config."""
    warnings = validate(cfg)
    for w in warnings:
        log.warning(w)
    handler = _HANDLERS[cfg.kind]
    report = handler(cfg, threads)
    report.warnings = warnings + report.warnings
    target = out_dir or cfg.output_dir
    if target:
        from .report import emit_report

        emit_report(report, target)
    return report


def _setup(cfg):
    obj = cfg.build_objective()
    noise = cfg.build_noise(obj.dim)
    sched = cfg.build_schedule()
    return obj, noise, sched


def _require_converging(runs, kind):
    if runs and all(r.limit_class == "diverged" for r in runs):
        raise ExperimentError(f"all runs diverged; a {kind} experiment needs converging runs")


def _rate(cfg: ExperimentConfig, threads: int) -> ExperimentReport:
    obj, noise, sched = _setup(cfg)
    star = [f for f in obj.critical_set if f.kind == "hurwicz_minimizer"]
    if not star:
        raise ConfigError(f"{obj.name} has no Hurwicz minimizer to measure a rate at")
    _, trajs = _ensemble(cfg, obj, noise, sched, threads, log_grid(cfg.n_iters))
    runs = _summaries(trajs, obj, cfg)
    _require_converging(runs, "rate")
    stats = ensemble_stats(runs)
    window = (cfg.options.get("n_lo", 1000), cfg.options.get("n_hi", cfg.n_iters))
    fit = fit_rate(stats, window)
    uncond = fit_rate(stats, window, conditioned=False)
    stats.rate = fit
    q_min = star[0].hurwicz_bounds[0]
    gamma, p = sched.gamma, sched.exponent_p
    var = noise.variance
    theory = None
    if sched.kind == "power_law":
        if p == 1 and 2 * q_min * gamma > 1:
            theory = gamma**2 * var / (2 * q_min * gamma - 1)
        elif p < 1:
            theory = gamma * var / (2 * q_min)
    prob, ci = stay_probability(runs, cfg.tolerances.u_radius)
    summary = {
        "exponent": fit.exponent,
        "coefficient": fit.coefficient,
        "stderr": fit.stderr,
        "regime": fit.regime,
        "p_declared": p,
        "coefficient_theory": theory,
        "unconditional_exponent": uncond.exponent,
        "window": list(window),
        "n_runs": len(runs),
        "n_conditioned": stats.n_conditioned,
        "stay_probability": prob,
        "stay_ci": list(ci),
        "admissible": admissible(sched, noise.moment_order_q),
    }
    curve = [
        (int(n), float(m), float(s), stats.n_conditioned)
        for n, m, s in zip(stats.curve_n, stats.curve_mean, stats.curve_stderr)
    ]
    return ExperimentReport(
        "rate",
        cfg,
        summary,
        ("n", "mean_sq_dist", "stderr", "n_conditioned"),
        curve,
        RUNS_HEADER,
        _run_rows(runs),
    )


def _avoidance(cfg: ExperimentConfig, threads: int) -> ExperimentReport:
    obj, noise, sched = _setup(cfg)
    saddles = [f for f in obj.critical_set if f.kind in ("strict_saddle_point", "strict_saddle_manifold")]
    fid = cfg.options.get("feature", saddles[0].id if saddles else None)
    if fid is None:
        raise ConfigError(f"{obj.name} has no strict saddle feature")
    if cfg.x0 is None:
        cfg = replace(cfg, x0=f"on_stable_manifold:{fid}")
    grid = np.array([0, cfg.n_iters])
    _, trajs = _ensemble(cfg, obj, noise, sched, threads, grid)
    runs = _summaries(trajs, obj, cfg)
    try:
        esc = escape_statistics(runs, fid, min_runs=min(30, cfg.n_runs))
    except ValueError as exc:
        raise ExperimentError(str(exc)) from None
    summary = {
        "feature": fid,
        "n_runs": esc.n_runs,
        "n_entered": esc.n_entered,
        "n_converged_to_saddle": esc.n_converged_to_saddle,
        "fraction": esc.fraction,
        "wilson_ci_lower": esc.wilson_ci[0],
        "wilson_ci_upper": esc.wilson_ci[1],
        "n_escaped": esc.n_escaped,
        "escape_quantiles": esc.escape_quantiles,
        "noise_q": noise.moment_order_q,
        "excitation_c": noise.excitation_c,
        "bounded_exciting_noise": bool(math.isinf(noise.moment_order_q) and (noise.excitation_c or 0) > 0),
    }
    if cfg.options.get("control", True):
        ctrl_noise = builtin_noise("zero", {"dim": obj.dim})
        _, ctrl = _ensemble(cfg, obj, ctrl_noise, sched, threads, grid)
        ctrl_runs = _summaries(ctrl, obj, cfg)
        try:
            ctrl_esc = escape_statistics(ctrl_runs, fid, min_runs=min(30, cfg.n_runs))
        except ValueError as exc:
            raise ExperimentError(f"zero-noise control: {exc}") from None
        summary["control_n_entered"] = ctrl_esc.n_entered
        summary["control_n_converged_to_saddle"] = ctrl_esc.n_converged_to_saddle
        summary["control_fraction"] = ctrl_esc.fraction
    return ExperimentReport("avoidance", cfg, summary, (), [], RUNS_HEADER, _run_rows(runs, fid))


def counterexample_path(t_end: float) -> InterpolatedPath:
    """The constant-height path A(t) = (t, 1), knots at integer times."""
    ts = np.arange(0.0, math.ceil(t_end) + 1.0)
    return InterpolatedPath(ts, np.column_stack([ts, np.ones_like(ts)]))


def _iterations_to_reach(sched: StepSchedule, t: float, n_done: int, tau_done: float, cap: int = 10**9):
    """Smallest n with tau_n >= t, continuing the sum past ``n_done`` in chunks."""
    n, tau = n_done, tau_done
    chunk = max(n_done, 1000)
    while n < cap:
        part = tau + np.cumsum(sched.steps(np.arange(n + 1, n + chunk + 1)))
        if part[-1] >= t:
            return n + int(np.searchsorted(part, t)) + 1
        n, tau = n + chunk, float(part[-1])
    return cap


def _apt(cfg: ExperimentConfig, threads: int) -> ExperimentReport:
    T = float(cfg.options.get("T", 2.0))
    t0_list = [float(t) for t in cfg.options.get("t0", [0.0, 1.0, 9.0, 99.0])]
    n_probe = int(cfg.options.get("n_probe", 64))
    path_kind = cfg.options.get("path", "analytic")
    obj = cfg.build_objective()
    fm = FlowMap(obj)
    if path_kind == "analytic":
        if obj.name != "apt_counterexample":
            raise ConfigError("the analytic path is defined for apt_counterexample only")
        path = counterexample_path(max(t0_list) + T)
        prof = apt_profile(path, fm, T, t0_list, n_probe)
        curve = [(t0, T, dev, T / (1 + t0), T / (1 + t0 + T)) for t0, dev in prof]
        flow_ends = {
            str(b): float(integrate_flow(fm, [0.0, b], 100.0)[1]) for b in cfg.options.get("b", [0.5, 1.0, 2.0])
        }
        summary = {
            "path": "analytic",
            "T": T,
            "profile": [[t0, dev] for t0, dev in prof],
            "max_abs_error_vs_exact": max(abs(dev - T / (1 + t0 + T)) for t0, dev in prof),
            "within_bound_T_over_1_plus_t0": all(dev <= T / (1 + t0) + 1e-12 for t0, dev in prof),
            "flow_z2_at_100": flow_ends,
            "path_limit_x2": 1.0,
        }
        return ExperimentReport(
            "apt", cfg, summary, ("t0", "T", "deviation", "bound_T_over_1_plus_t0", "exact"), curve
        )
    if path_kind != "sgd":
        raise ConfigError(f"unknown apt path {path_kind!r}")
    noise = cfg.build_noise(obj.dim)
    sched = cfg.build_schedule()
    taus = proper_times(sched, cfg.n_iters)
    need = max(t0_list) + T
    if taus[-1] < need:
        n_need = _iterations_to_reach(sched, need, cfg.n_iters, float(taus[-1]))
        raise ConfigError(f"run.n_iters too small: proper time {taus[-1]:.3g} < {need}; need about {n_need}")
    windows = []
    for t0 in t0_list:
        lo = max(int(np.searchsorted(taus, t0, side="right")) - 1, 0)
        hi = int(np.searchsorted(taus, t0 + T, side="left"))
        windows.append(np.arange(lo, hi + 1))
    rec = np.unique(np.concatenate(windows))
    # the windows are all of the path the deviation needs
    cfg_rec = replace(cfg, record_policy="thinned")
    _, trajs = _ensemble(cfg_rec, obj, noise, sched, threads, rec)
    ok = [t for t in trajs if not t.diverged]
    if not ok:
        raise ExperimentError("all runs diverged; apt profile needs complete paths")
    profiles = np.empty((len(trajs), len(t0_list)))
    profiles.fill(np.nan)
    idx_ok = [i for i, t in enumerate(trajs) if not t.diverged]
    for j, (t0, w) in enumerate(zip(t0_list, windows)):
        sel = np.searchsorted(ok[0].indices, w)
        times = ok[0].proper_times[sel]
        pts = np.stack([t.iterates[sel] for t in ok], axis=1)
        path = InterpolatedPath(times, pts)
        profiles[idx_ok, j] = np.atleast_1d(apt_profile(path, fm, T, [t0], n_probe)[0][1])
    decreasing = np.all(np.diff(profiles, axis=1) < 0, axis=1)
    median = np.nanmedian(profiles, axis=0)
    summary = {
        "path": "sgd",
        "T": T,
        "t0": t0_list,
        "median_deviation": median.tolist(),
        "n_runs": len(trajs),
        "n_decreasing": int(decreasing.sum()),
        "fraction_decreasing": float(decreasing.mean()),
        "admissible": admissible(sched, noise.moment_order_q),
        "q": noise.moment_order_q,
        "p": sched.exponent_p,
    }
    curve = [(t0, T, float(m)) for t0, m in zip(t0_list, median)]
    runs = [
        (i, trajs[i].seed, int(decreasing[i])) + tuple(float(v) for v in profiles[i]) for i in range(len(trajs))
    ]
    header = ("run_index", "seed", "decreasing") + tuple(f"dev_t0_{t0:g}" for t0 in t0_list)
    return ExperimentReport("apt", cfg, summary, ("t0", "T", "deviation"), curve, header, runs)


def _boundedness(cfg: ExperimentConfig, threads: int) -> ExperimentReport:
    obj, noise, sched = _setup(cfg)
    _, trajs = _ensemble(cfg, obj, noise, sched, threads, np.array([0, cfg.n_iters]))
    runs = _summaries(trajs, obj, cfg)
    sups = np.array([r.sup_norm for r in runs if r.limit_class != "diverged"])
    n_div = sum(r.limit_class == "diverged" for r in runs)
    summary = {
        "n_runs": len(runs),
        "n_diverged": int(n_div),
        "diverged_fraction": n_div / len(runs),
        "n_bounded": int(np.sum(sups < cfg.tolerances.r_max)) if sups.size else 0,
        "sup_norm_max": float(sups.max()) if sups.size else None,
        "sup_norm_median": float(np.median(sups)) if sups.size else None,
        "r_max": cfg.tolerances.r_max,
        "assumption_flags": {str(k): v for k, v in obj.assumption_flags.items()},
        "assumption_2_violation": not obj.assumption_flags[2],
        "assumption_3_violation": not obj.assumption_flags[3],
        "admissible": admissible(sched, noise.moment_order_q),
    }
    return ExperimentReport("boundedness", cfg, summary, (), [], RUNS_HEADER, _run_rows(runs))


def _cooldown(cfg: ExperimentConfig, threads: int) -> ExperimentReport:
    obj, noise, sched = _setup(cfg)
    if sched.kind != "cooldown":
        raise ConfigError("cooldown experiments need schedule.kind = \"cooldown\"")
    star = obj.minimizers()
    if not star:
        raise ConfigError(f"{obj.name} has no minimizer")
    switch = sched.switch_iter
    plateau_lo = int(cfg.options.get("plateau_lo", switch // 2))
    cool_steps = int(cfg.options.get("cooldown_steps", 1000))
    threshold = float(cfg.options.get("threshold", 0.2))
    n_after = switch - 1 + cool_steps
    if n_after > cfg.n_iters:
        raise ConfigError("run.n_iters ends before the cooldown window")
    rec = np.unique(np.concatenate([log_grid(cfg.n_iters), np.arange(plateau_lo, switch), [n_after]]))
    _, trajs = _ensemble(cfg, obj, noise, sched, threads, rec)
    runs = _summaries(trajs, obj, cfg)
    _require_converging(runs, "cooldown")
    ok = [t for t in trajs if not t.diverged]
    sq = np.stack([t.feature_distances[star[0].id] ** 2 for t in ok])
    mean = sq.mean(axis=0)
    stderr = sq.std(axis=0, ddof=1) / math.sqrt(sq.shape[0]) if sq.shape[0] > 1 else np.full_like(mean, np.nan)
    idx = ok[0].indices
    plateau_sel = (idx >= plateau_lo) & (idx < switch)
    plateau = float(mean[plateau_sel].mean())
    after = float(mean[idx == n_after][0])
    summary = {
        "plateau": plateau,
        "plateau_window": [plateau_lo, switch - 1],
        "after_cooldown": after,
        "cooldown_steps": cool_steps,
        "ratio": after / plateau,
        "threshold": threshold,
        "below_threshold": after <= threshold * plateau,
        "n_runs": len(runs),
        "n_used": len(ok),
    }
    show = np.isin(idx, log_grid(cfg.n_iters)) | (idx == n_after)
    curve = [(int(n), float(m), float(s), len(ok)) for n, m, s in zip(idx[show], mean[show], stderr[show])]
    return ExperimentReport(
        "cooldown",
        cfg,
        summary,
        ("n", "mean_sq_dist", "stderr", "n_conditioned"),
        curve,
        RUNS_HEADER,
        _run_rows(runs),
    )


def _chung(cfg: ExperimentConfig, threads: int) -> ExperimentReport:
    o = cfg.options
    try:
        res = chung_oracle(
            float(o.get("P", 2.0)),
            float(o.get("R", 1.0)),
            float(o.get("p", 1.0)),
            float(o.get("r", 1.0)),
            int(o.get("m", 0)),
            float(o.get("a0", 0.0)),
            int(o.get("n_max", 10**6)),
            float(o.get("tol", 1e-3)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    summary = {
        "limit": res.limit,
        "predicted": res.predicted,
        "rel_error": abs(res.limit - res.predicted) / res.predicted if res.predicted else None,
        "rel_increment": res.rel_increment,
        "converged": res.converged,
        "n0": res.n0,
        "n_max": int(res.n[-1]),
    }
    curve = [(int(n), float(a), float(v)) for n, a, v in zip(res.n, res.a, res.normalized)]
    return ExperimentReport("chung", cfg, summary, ("n", "a_n", "a_n_times_n_pow_r"), curve)


_HANDLERS = {
    "rate": _rate,
    "avoidance": _avoidance,
    "apt": _apt,
    "boundedness": _boundedness,
    "cooldown": _cooldown,
    "chung": _chung,
}
