import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgdlab.dynamics import (
    Monitor,
    StepSchedule,
    admissible,
    log_grid,
    proper_times,
    run_batch,
    run_sgd,
    step_size,
    thinned_indices,
)
from sgdlab.objectives import builtin_objective
from sgdlab.oracle import builtin_noise
from sgdlab.seeding import run_seed


def test_step_size_examples():
    assert step_size(StepSchedule("power_law", 1.0, 0, 1.0), 10) == pytest.approx(0.1, rel=1e-15)
    assert step_size(StepSchedule("power_law", 2.0, 3, 0.5), 1) == 1.0
    cool = StepSchedule("cooldown", 0.1, switch_iter=100)
    assert step_size(cool, 105) == pytest.approx(0.1 / 6, rel=1e-15)
    assert step_size(cool, 99) == 0.1
    assert step_size(cool, 100) == 0.1


def test_cooldown_with_separate_coefficient():
    cool = StepSchedule("cooldown", 0.1, switch_iter=100, cooldown_gamma=1.0)
    assert step_size(cool, 99) == 0.1
    assert step_size(cool, 100) == 1.0
    assert step_size(cool, 109) == pytest.approx(0.1)


def test_step_index_starts_at_one():
    with pytest.raises(ValueError):
        step_size(StepSchedule(), 0)


@pytest.mark.parametrize(
    "kw",
    [
        {"kind": "exponential"},
        {"gamma": 0.0},
        {"offset_m": -1},
        {"exponent_p": 0.0},
        {"exponent_p": 1.5},
        {"kind": "cooldown"},
    ],
)
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        StepSchedule(**kw)


def test_admissible_examples():
    assert admissible(StepSchedule(exponent_p=0.5), 2.0) is False
    assert admissible(StepSchedule(exponent_p=0.51), 2.0) is True
    assert admissible(StepSchedule(exponent_p=0.1), math.inf) is True
    assert admissible(StepSchedule("constant", 0.1), math.inf) is False


@given(q=st.floats(2.0, 50.0), p=st.floats(0.01, 1.0))
def test_admissible_matches_open_interval(q, p):
    assert admissible(StepSchedule(exponent_p=p), q) == (2 / (q + 2) < p <= 1)


def test_admissible_rejects_small_q():
    with pytest.raises(ValueError):
        admissible(StepSchedule(), 1.5)


@given(
    gamma=st.floats(0.01, 10.0),
    m=st.integers(0, 100),
    p=st.floats(0.05, 1.0),
    n=st.integers(1, 10**6),
)
def test_power_law_formula_and_monotone(gamma, m, p, n):
    sched = StepSchedule("power_law", gamma, m, p)
    # vectorized and scalar pow may round differently in the last place
    assert step_size(sched, n) == pytest.approx(gamma / (n + m) ** p, rel=4.5e-16, abs=0)
    assert step_size(sched, n + 1) <= step_size(sched, n)


@given(gamma=st.floats(0.001, 5.0), n=st.integers(1, 10**5))
def test_constant_proper_time_is_exact(gamma, n):
    taus = proper_times(StepSchedule("constant", gamma), n)
    assert taus[n] == n * gamma
    assert taus[0] == 0.0


def test_proper_time_increments_are_step_sizes():
    sched = StepSchedule("power_law", 1.0, 10, 0.7)
    taus = proper_times(sched, 5000)
    assert np.all(np.diff(taus) > 0)
    # differencing a cumulative sum loses about eps * tau_n absolute precision
    err = np.abs(np.diff(taus) - sched.steps(np.arange(1, 5001)))
    assert np.all(err <= 4 * np.finfo(float).eps * taus[1:])


def _decade_sums(sched, power, N=10**7):
    terms = sched.steps(np.arange(1, N + 1)) ** power
    edges = [10**k for k in range(int(math.log10(N)) + 1)]
    return [math.fsum(terms[lo - 1 : 10 * lo - 1]) for lo in edges[:-1]], math.fsum(terms)


@pytest.mark.parametrize("q,p", [(4.0, 1.0), (2.0, 1.0), (math.inf, 0.3)])
def test_admissible_partial_sums_settle_within_1e6(q, p):
    sched = StepSchedule("power_law", 1.0, 0, p)
    assert admissible(sched, q)
    power = 1 + q / 2 if math.isfinite(q) else 8.0
    decades, total = _decade_sums(sched, power)
    assert decades[-1] / total < 1e-6
    # the steps themselves are not summable: every decade adds a non-shrinking amount
    plain, _ = _decade_sums(sched, 1.0)
    assert plain[-1] >= 0.5 * plain[-2] and plain[-1] > 1.0


@pytest.mark.parametrize("q,p", [(2.0, 0.6), (2.5, 0.8), (4.0, 0.5), (10.0, 0.2)])
def test_admissible_partial_sums_decay_geometrically(q, p):
    # near the boundary the series converges slowly: decade increments shrink by
    # 10^-(s-1) with s = (1 + q/2) p > 1, which proves boundedness even where the
    # last decade still carries more than 1e-6 of the total
    sched = StepSchedule("power_law", 1.0, 0, p)
    assert admissible(sched, q)
    s = (1 + q / 2) * p
    decades, _ = _decade_sums(sched, 1 + q / 2)
    ratios = np.array(decades[3:]) / np.array(decades[2:-1])
    assert np.allclose(ratios, 10 ** (1 - s), rtol=0.02)


@pytest.mark.parametrize("q,p", [(2.0, 0.5), (2.5, 0.4), (4.0, 0.3)])
def test_inadmissible_partial_sums_do_not_settle(q, p):
    sched = StepSchedule("power_law", 1.0, 0, p)
    assert not admissible(sched, q)
    decades, _ = _decade_sums(sched, 1 + q / 2)
    assert decades[-1] >= 0.99 * decades[-2]


def test_thinned_indices_layout():
    idx = thinned_indices(10**5)
    assert idx[0] == 0 and idx[-1] == 10**5
    assert np.array_equal(idx[:1001], np.arange(1001))
    assert np.all(np.diff(idx) > 0)
    assert idx.size < 10_000


def test_log_grid_layout():
    g = log_grid(10**5)
    assert g[0] == 0 and g[1] == 1 and g[-1] == 10**5
    assert np.all(np.diff(g) > 0)


def test_contraction_example():
    obj = builtin_objective("quadratic", {"lam": [1.0]})
    traj = run_sgd(obj, builtin_noise("zero"), StepSchedule("constant", 0.5), [1.0], 10, seed=0, record_policy="full")
    assert traj.iterates[1, 0] == 0.5
    assert traj.iterates[2, 0] == 0.25
    assert len(traj) == 11


def test_saddle_unstable_axis_grows_by_gamma():
    obj = builtin_objective("hyperbolic_saddle")
    traj = run_sgd(obj, builtin_noise("zero", {"dim": 2}), StepSchedule("constant", 0.1), [0.0, 1e-8], 50, 0, "full")
    y = traj.iterates[:, 1]
    assert np.allclose(y[1:] / y[:-1], 1.1, rtol=1e-14, atol=0)
    assert np.all(traj.iterates[:, 0] == 0)


def test_recursion_identity_is_exact_under_full_recording():
    obj = builtin_objective("rosenbrock")
    noise = builtin_noise("gaussian", {"sigma": 0.5, "dim": 2})
    sched = StepSchedule("power_law", 0.5, 5, 0.8)
    traj = run_sgd(obj, noise, sched, [-0.5, 0.5], 3000, seed=7, record_policy="full")
    x, v, g = traj.iterates, traj.signals, traj.step_sizes
    assert np.all(np.isnan(v[0]))
    assert np.array_equal(x[1:], x[:-1] - g[1:, None] * v[1:])
    assert np.array_equal(g[1:], sched.steps(np.arange(1, 3001)))


def test_linear_divergent_is_flagged_and_truncated():
    obj = builtin_objective("linear_divergent")
    noise = builtin_noise("gaussian", {"sigma": 1.0})
    traj = run_sgd(obj, noise, StepSchedule("power_law", 1.0, 0, 1.0), [0.0], 10**5, 3, monitor=Monitor(r_max=5.0))
    assert traj.diverged
    assert traj.final_iter < 10**5
    assert traj.indices[-1] <= traj.final_iter
    assert math.isinf(traj.sup_norm)
    assert abs(traj.final_point[0]) > 5.0


def test_non_finite_iterates_become_a_divergence_flag():
    obj = builtin_objective("monkey_saddle")
    with np.errstate(over="ignore", invalid="ignore"):
        traj = run_sgd(obj, builtin_noise("zero", {"dim": 2}), StepSchedule("constant", 1.0), [-2.0, 0.0], 100, 0)
    assert traj.diverged


def test_reproducible_bitwise():
    obj = builtin_objective("ridge")
    noise = builtin_noise("sphere", {"sigma": 0.1, "dim": 3})
    sched = StepSchedule("power_law", 1.0, 0, 1.0)
    a = run_sgd(obj, noise, sched, [1.0, 0.0, 0.0], 5000, seed=11)
    b = run_sgd(obj, noise, sched, [1.0, 0.0, 0.0], 5000, seed=11)
    assert a.iterates.tobytes() == b.iterates.tobytes()
    assert a.f_values.tobytes() == b.f_values.tobytes()
    assert a.entered == b.entered and a.escaped == b.escaped


def test_run_does_not_depend_on_batch_composition():
    obj = builtin_objective("quadratic", {"lam": [1.0, 2.0]})
    noise = builtin_noise("gaussian", {"sigma": 1.0, "dim": 2})
    sched = StepSchedule("power_law", 1.0, 10, 1.0)
    seeds = [run_seed(5, i) for i in range(6)]
    together = run_batch(obj, noise, sched, [0.1, 0.1], 2500, seeds)
    alone = run_sgd(obj, noise, sched, [0.1, 0.1], 2500, seeds[4])
    assert together[4].iterates.tobytes() == alone.iterates.tobytes()


def test_feature_events_are_tracked_every_step():
    obj = builtin_objective("hyperbolic_saddle")
    noise = builtin_noise("sphere", {"sigma": 0.1, "dim": 2})
    traj = run_sgd(obj, noise, StepSchedule("power_law", 1.0, 0, 1.0), [1.0, 0.0], 20_000, 1, "diagnostics_only")
    n_in, n_out = traj.entered["saddle"], traj.escaped["saddle"]
    assert n_in is not None and n_out is not None and n_out > n_in
    assert traj.iterates is None


def test_run_rejects_bad_arguments():
    obj = builtin_objective("quadratic")
    noise = builtin_noise("zero", {"dim": 2})
    with pytest.raises(ValueError):
        run_sgd(obj, noise, StepSchedule(), [0.0, 0.0], 0, 0)
    with pytest.raises(ValueError):
        run_sgd(obj, noise, StepSchedule(), [np.inf, 0.0], 10, 0)
    with pytest.raises(ValueError):
        run_sgd(obj, builtin_noise("zero", {"dim": 3}), StepSchedule(), [0.0, 0.0], 10, 0)
    with pytest.raises(ValueError):
        run_sgd(obj, noise, StepSchedule(), [0.0, 0.0], 10, 0, record_policy="sparse")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**63), n=st.integers(1, 3000))
def test_trajectory_length_and_time_monotone(seed, n):
    obj = builtin_objective("gaussian_well")
    noise = builtin_noise("gaussian", {"sigma": 0.5})
    traj = run_sgd(obj, noise, StepSchedule("power_law", 0.5, 1, 0.9), [0.2], n, seed, "full")
    assert len(traj) == n + 1
    assert np.all(np.diff(traj.proper_times) > 0)
