import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgdlab.analysis import (
    LIMIT_CLASSES,
    EnsembleStats,
    Tolerances,
    chung_oracle,
    classify_run,
    energy,
    energy_growth_check,
    ensemble_stats,
    escape_statistics,
    fit_power_law,
    fit_rate,
    stay_probability,
    wilson_interval,
)
from sgdlab.dynamics import Monitor, StepSchedule, log_grid, run_batch, run_sgd
from sgdlab.objectives import builtin_objective
from sgdlab.oracle import builtin_noise
from sgdlab.seeding import run_seed


def _runs(obj, noise, sched, x0, n_iters, n_runs, base_seed=0, tol=Tolerances(), grid=None):
    seeds = [run_seed(base_seed, i) for i in range(n_runs)]
    trajs = run_batch(obj, noise, sched, x0, n_iters, seeds, "thinned", tol.monitor(), grid)
    return [classify_run(t, obj, tol, i) for i, t in enumerate(trajs)]


# -- classification ----------------------------------------------------------


def test_gd_on_quadratic_converges_to_minimizer():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    traj = run_sgd(obj, builtin_noise("zero"), StepSchedule("constant", 0.1), [1.0], 10**4, 0)
    s = classify_run(traj, obj)
    assert s.limit_class == "converged_to_minimizer" and s.limit_feature == "min"
    assert s.sup_norm == 1.0
    assert s.stayed_in_U is False  # x0 sits on the boundary of the unit ball U


def test_gd_on_stable_axis_converges_to_saddle():
    obj = builtin_objective("hyperbolic_saddle")
    traj = run_sgd(obj, builtin_noise("zero", {"dim": 2}), StepSchedule(), [1.0, 0.0], 10**4, 0)
    s = classify_run(traj, obj)
    assert s.limit_class == "converged_to_saddle_feature" and s.limit_feature == "saddle"
    assert s.escape_time("saddle") == "never"


def test_linear_divergent_run_is_diverged():
    obj = builtin_objective("linear_divergent")
    traj = run_sgd(obj, builtin_noise("gaussian"), StepSchedule(), [0.0], 10**4, 0, monitor=Monitor(r_max=3.0))
    assert classify_run(traj, obj).limit_class == "diverged"


def test_classification_is_pure():
    obj = builtin_objective("ridge")
    traj = run_sgd(obj, builtin_noise("sphere", {"sigma": 0.1, "dim": 3}), StepSchedule(), [1.0, 0.0, 0.0], 5000, 9)
    a, b = classify_run(traj, obj), classify_run(traj, obj)
    assert a.limit_class == b.limit_class and a.final_distance == b.final_distance


def test_minimizer_class_requires_both_tolerances():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    traj = run_sgd(obj, builtin_noise("zero"), StepSchedule("constant", 0.1), [1.0], 50, 0)
    # after 50 steps the distance is 0.9^50 ~ 5e-3: close enough in distance, not in gradient
    s = classify_run(traj, obj, Tolerances(g_tol=1e-4, d_tol=1e-2))
    assert s.limit_class == "undecided"
    s = classify_run(traj, obj, Tolerances(g_tol=1e-2, d_tol=1e-2))
    assert s.limit_class == "converged_to_minimizer"
    assert s.final_grad_norm <= 1e-2 and s.final_distance <= 1e-2


def test_ensemble_frequencies_sum_to_one():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    runs = _runs(obj, builtin_noise("gaussian", {"sigma": 0.3}), StepSchedule(gamma=1.0, offset_m=5), [0.5], 2000, 40)
    stats = ensemble_stats(runs)
    assert math.isclose(sum(stats.frequencies.values()), 1.0)
    assert set(stats.frequencies) == set(LIMIT_CLASSES)
    shuffled = ensemble_stats(list(reversed(runs)))
    assert shuffled.curve_mean.tobytes() == stats.curve_mean.tobytes()


def test_ensemble_requires_runs():
    with pytest.raises(ValueError):
        ensemble_stats([])


def test_wilson_interval_zero_of_thousand():
    lo, hi = wilson_interval(0, 1000)
    assert lo == 0.0 and 0.0038 < hi < 0.004


# -- escape statistics ---------------------------------------------------------


def test_escape_with_exciting_noise_and_deterministic_control():
    obj = builtin_objective("hyperbolic_saddle")
    sched = StepSchedule()
    grid = np.array([0, 20_000])
    noisy = _runs(obj, builtin_noise("sphere", {"sigma": 0.1, "dim": 2}), sched, [1.0, 0.0], 20_000, 200, 3, grid=grid)
    est = escape_statistics(noisy, "saddle")
    assert est.n_converged_to_saddle == 0 and est.fraction == 0.0
    # a run that is still near the saddle at the horizon has not escaped yet, but is
    # not within d_tol of it either
    assert est.n_escaped >= 0.95 * est.n_entered
    assert est.escape_quantiles["q10"] <= est.escape_quantiles["median"] <= est.escape_quantiles["q90"]
    ctrl = _runs(obj, builtin_noise("zero", {"dim": 2}), sched, [1.0, 0.0], 20_000, 40, 3, grid=grid)
    cst = escape_statistics(ctrl, "saddle")
    assert cst.fraction == 1.0 and cst.n_escaped == 0


def test_escape_statistics_needs_entered_runs():
    obj = builtin_objective("hyperbolic_saddle")
    runs = _runs(obj, builtin_noise("zero", {"dim": 2}), StepSchedule(), [0.0, 5.0], 100, 5)
    with pytest.raises(ValueError):
        escape_statistics(runs, "saddle")
    close = _runs(obj, builtin_noise("zero", {"dim": 2}), StepSchedule(), [1.0, 0.0], 1000, 5)
    with pytest.raises(ValueError):
        escape_statistics(close, "saddle", min_runs=30)


# -- rate fitting --------------------------------------------------------------


@settings(deadline=None)
@given(p=st.floats(0.05, 3.0), c=st.floats(1e-3, 1e3))
def test_fit_recovers_exact_power_law(p, c):
    n = log_grid(10**5)[1:]
    fit = fit_power_law(n, c / n.astype(float) ** p, (1000, 10**5))
    assert fit.exponent == pytest.approx(-p, abs=1e-10)
    assert fit.coefficient == pytest.approx(c, rel=1e-9)
    assert fit.regime == "power_law"


def test_fit_window_and_zero_errors():
    n = log_grid(10**5)[1:].astype(float)
    with pytest.raises(ValueError):
        fit_power_law(n, 1 / n, (1000, 10_000))
    with pytest.raises(ValueError):
        fit_power_law(n, np.zeros_like(n), (100, 10**5))


def test_exponential_decay_is_below_noise_floor():
    n = log_grid(10**5)[1:].astype(float)
    assert fit_power_law(n, np.exp(-n / 500.0), (100, 10**5)).regime == "below_noise_floor"
    assert fit_power_law(n, np.exp(-n / 5e3), (100, 10**5)).regime == "below_noise_floor"


def test_zero_noise_sgd_is_below_noise_floor():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    sched = StepSchedule(gamma=1.0, offset_m=10, exponent_p=0.7)
    runs = _runs(obj, builtin_noise("zero"), sched, [0.1], 10**5, 2, grid=log_grid(10**5))
    fit = fit_rate(ensemble_stats(runs), (1000, 10**5))
    assert fit.regime == "below_noise_floor"


def test_noisy_rate_small_ensemble():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    sched = StepSchedule(gamma=1.0, offset_m=10, exponent_p=1.0)
    runs = _runs(obj, builtin_noise("gaussian"), sched, [0.1], 20_000, 1000, grid=log_grid(20_000))
    stats = ensemble_stats(runs)
    fit = fit_rate(stats, (200, 20_000))
    assert fit.regime == "power_law"
    assert fit.exponent == pytest.approx(-1.0, abs=0.1)
    assert stats.n_conditioned <= len(runs)


def test_fit_rate_needs_conditioned_runs():
    empty = EnsembleStats(1, {}, {}, {}, np.arange(5), np.array([]), np.array([]), 0, np.ones(5), np.ones(5))
    with pytest.raises(ValueError):
        fit_rate(empty, (1, 100))


# -- Chung oracle --------------------------------------------------------------


def test_chung_fast_regime():
    res = chung_oracle(2.0, 1.0, 1.0, 1.0, m=10, n_max=10**6)
    assert res.predicted == 1.0
    assert res.limit == pytest.approx(1.0, rel=0.01)
    assert res.converged


def test_chung_slow_regime():
    res = chung_oracle(1.0, 3.0, 0.5, 0.5, n_max=10**6)
    assert res.predicted == 3.0
    assert res.limit == pytest.approx(3.0, rel=0.02)


def test_chung_without_forcing_decays_monotonically():
    res = chung_oracle(2.0, 0.0, 1.0, 1.0, a0=1.0, n_max=10**5)
    assert np.all(np.diff(res.a) <= 0)
    assert res.a[-1] < 1e-8


@settings(max_examples=30, deadline=None)
@given(
    P=st.floats(0.2, 5.0),
    R=st.floats(0.0, 5.0),
    p=st.floats(0.3, 1.0),
    r=st.floats(0.1, 1.0),
    a0=st.floats(0.0, 10.0),
)
def test_chung_sequence_is_nonnegative(P, R, p, r, a0):
    if p == 1.0 and P <= r:
        return
    res = chung_oracle(P, R, p, r, a0=a0, n_max=2000)
    assert np.all(res.a >= 0)


@pytest.mark.parametrize(
    "args",
    [(2.0, 1.0, 1.5, 1.0), (2.0, 1.0, 1.0, 0.0), (0.0, 1.0, 1.0, 1.0), (1.0, 1.0, 1.0, 1.0), (2.0, -1.0, 1.0, 1.0)],
)
def test_chung_domain_errors(args):
    with pytest.raises(ValueError):
        chung_oracle(*args, n_max=100)


# -- stay probability ----------------------------------------------------------


def test_stay_probability_grows_with_offset_on_paired_seeds():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    noise = builtin_noise("gaussian", {"sigma": 0.1})
    probs = []
    for m in (10, 1000):
        sched = StepSchedule(gamma=1.0, offset_m=m)
        runs = _runs(obj, noise, sched, [0.9], 5000, 400, base_seed=17, grid=np.array([0, 5000]))
        probs.append(stay_probability(runs, 1.0)[0])
    assert probs[0] <= probs[1]
    assert probs[1] == 1.0


def test_stay_probability_without_noise_is_one():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    runs = _runs(obj, builtin_noise("zero"), StepSchedule(), [0.5], 1000, 20)
    p, (lo, hi) = stay_probability(runs, 1.0)
    assert p == 1.0 and hi == 1.0


def test_stay_probability_with_huge_noise_is_near_zero():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    runs = _runs(obj, builtin_noise("gaussian", {"sigma": 100.0}), StepSchedule(), [0.0], 1000, 200)
    p, (lo, hi) = stay_probability(runs, 1.0)
    assert p < 0.05


def test_stay_probability_needs_runs():
    with pytest.raises(ValueError):
        stay_probability([], 1.0)


# -- energy --------------------------------------------------------------------


def test_energy_on_hyperbolic_saddle_uses_backward_flow():
    obj = builtin_objective("hyperbolic_saddle")
    # backward orbit (x e^t, y e^-t): the unstable coordinate shrinks
    assert energy(obj, [0.0, 0.5], 1.0) == pytest.approx(0.5 * (1 - math.exp(-1)), abs=1e-9)
    assert energy(obj, [3.0, -0.2], 2.0) == pytest.approx(0.2 * (1 - math.exp(-2)), abs=1e-9)


def test_energy_vanishes_on_stable_axis():
    obj = builtin_objective("hyperbolic_saddle")
    assert energy(obj, np.array([[0.7, 0.0], [-2.0, 0.0]]), 1.0) == pytest.approx([0.0, 0.0], abs=1e-15)


def test_energy_growth_on_hyperbolic_saddle():
    rep = energy_growth_check(builtin_objective("hyperbolic_saddle"), tau=1.0, flow_start=[1.0, 0.01])
    assert rep.beta_fit == pytest.approx(1.0, abs=0.02)
    assert rep.beta_fit > rep.beta_required
    assert rep.n_gradient_violations == 0
    assert rep.manifold_max <= 1e-12
    assert rep.ok


def test_energy_growth_on_ridge_with_sgd_increments():
    obj = builtin_objective("ridge")
    noise = builtin_noise("sphere", {"sigma": 0.1, "dim": 3})
    sched = StepSchedule(gamma=0.05, offset_m=0)
    trajs = run_batch(obj, noise, sched, [0.3, 0.0, 0.0], 300, [run_seed(4, i) for i in range(20)], "full")
    rep = energy_growth_check(obj, tau=1.0, flow_start=[1.0, 1e-4, 0.0], trajectories=trajs)
    assert rep.beta_fit == pytest.approx(1.0, abs=0.05)
    assert rep.n_gradient_violations == 0
    assert rep.sgd_n_steps > 0
    assert rep.ok


def test_energy_requires_manifold_data():
    with pytest.raises(ValueError):
        energy(builtin_objective("quadratic"), [0.1, 0.1])
