import math

import numpy as np
import pytest

from sgdlab.objectives import builtin_objective
from sgdlab.oracle import CATALOG, builtin_noise, estimate_excitation, sample

N = 10**6

MODELS = [
    ("gaussian", {"sigma": 1.0, "dim": 2}),
    ("gaussian", {"sigma": 0.3, "dim": 3, "q": 6}),
    ("sphere", {"sigma": 0.1, "dim": 2}),
    ("sphere", {"sigma": 2.0, "dim": 3}),
    ("ball", {"sigma": 1.0, "dim": 2}),
    ("student_t", {"nu": 3.0, "scale": 1.0, "dim": 2}),
    ("student_t", {"nu": 6.0, "scale": 0.5, "dim": 1}),
]
FIXED_POINTS = [(0.0, 0.0), (1.0, 1.0), (-3.0, 0.5), (10.0, -10.0), (0.1, 7.0)]


def _ids(models):
    return [f"{n}-{'-'.join(f'{k}{v}' for k, v in p.items())}" for n, p in models]


@pytest.mark.parametrize("name,params", MODELS, ids=_ids(MODELS))
def test_zero_mean_at_fixed_points(name, params):
    model = builtin_noise(name, params)
    # the catalog's errors do not depend on the query point; one stream per point
    for k, _ in enumerate(FIXED_POINTS):
        xi = model.draw(np.random.default_rng(100 + k), N)
        assert np.all(np.abs(xi.mean(axis=0)) <= 5 * model.moment_bound_sigma / math.sqrt(N))


@pytest.mark.parametrize("name,params", MODELS, ids=_ids(MODELS))
def test_declared_moment_bound(name, params):
    model = builtin_noise(name, params)
    norms = np.linalg.norm(model.draw(np.random.default_rng(11), N), axis=1)
    q, sigma = model.moment_order_q, model.moment_bound_sigma
    if math.isinf(q):
        # a few ulps of rounding in the normalization
        assert norms.max() <= sigma * (1 + 4e-16)
    else:
        assert np.mean(norms**q) ** (1 / q) <= 1.05 * sigma


@pytest.mark.parametrize("name,params", MODELS, ids=_ids(MODELS))
def test_declared_variance(name, params):
    model = builtin_noise(name, params)
    sq = np.sum(model.draw(np.random.default_rng(12), N) ** 2, axis=1)
    # heavy tails make the sample variance of |xi|^2 large, so use a loose relative band
    assert sq.mean() == pytest.approx(model.variance, rel=0.05)


def test_zero_noise_signal_on_saddle():
    obj = builtin_objective("hyperbolic_saddle")
    s = sample(builtin_noise("zero", {"dim": 2}), obj, [1.0, 1.0], np.random.default_rng(0))
    assert np.array_equal(s.signal, [1.0, -1.0])
    assert np.array_equal(s.error, [0.0, 0.0])


def test_signal_minus_error_is_gradient():
    obj = builtin_objective("rosenbrock")
    model = builtin_noise("gaussian", {"sigma": 1.0, "dim": 2})
    rng = np.random.default_rng(13)
    for x in rng.normal(size=(50, 2)):
        s = sample(model, obj, x, rng)
        g = obj.grad(x)
        # the signal is the rounded sum g + xi, so subtracting xi recovers g up to one rounding
        bound = np.finfo(float).eps * (np.abs(g) + np.abs(s.error))
        assert np.all(np.abs(s.signal - s.error - g) <= bound)
        assert np.array_equal(s.signal, g + s.error)


def test_gaussian_second_moment():
    model = builtin_noise("gaussian", {"sigma": 1.0, "dim": 2})
    xi = model.draw(np.random.default_rng(14), N)
    assert np.mean(np.sum(xi**2, axis=1)) == pytest.approx(2.0, rel=0.01)


def test_sphere_draws_have_exact_radius():
    model = builtin_noise("sphere", {"sigma": 0.1, "dim": 2})
    norms = np.linalg.norm(model.draw(np.random.default_rng(15), N), axis=1)
    assert np.allclose(norms, 0.1, rtol=4e-16, atol=0)


def test_sample_rejects_non_finite_point_and_gradient():
    obj = builtin_objective("quadratic")
    model = builtin_noise("zero", {"dim": 2})
    with pytest.raises(ValueError):
        sample(model, obj, [np.nan, 0.0], np.random.default_rng(0))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        sample(model, builtin_objective("monkey_saddle"), [1e200, 0.0], np.random.default_rng(0))


@pytest.mark.parametrize(
    "name,params,expected",
    [
        ("gaussian", {"sigma": 1.0, "dim": 2}, 1 / math.sqrt(2 * math.pi)),
        ("sphere", {"sigma": 1.0, "dim": 2}, 1 / math.pi),
    ],
)
def test_excitation_matches_closed_form(name, params, expected):
    model = builtin_noise(name, params)
    assert model.excitation_c == pytest.approx(expected, rel=1e-12)
    est = estimate_excitation(model, np.zeros(2), 200_000, 1, np.random.default_rng(16))
    assert abs(est.value - expected) <= 3 * est.stderr


@pytest.mark.parametrize("name,params", MODELS, ids=_ids(MODELS))
def test_excitation_direction_independent(name, params):
    model = builtin_noise(name, params)
    rng = np.random.default_rng(17)
    d = model.dim
    for _ in range(5):
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        proj = np.maximum(model.draw(rng, 200_000) @ u, 0.0)
        se = proj.std(ddof=1) / math.sqrt(proj.size)
        assert abs(proj.mean() - model.excitation_c) <= 3 * se + 1e-12


def test_zero_noise_excitation_is_zero():
    est = estimate_excitation(builtin_noise("zero", {"dim": 3}), np.zeros(3), 10_000, 8, np.random.default_rng(0))
    assert est.value == 0.0


def test_excitation_requires_enough_samples():
    with pytest.raises(ValueError):
        estimate_excitation(builtin_noise("gaussian"), np.zeros(1), 999, 4, np.random.default_rng(0))


def test_same_seed_same_stream():
    for name in CATALOG:
        model = builtin_noise(name, {"dim": 3})
        a = model.draw(np.random.default_rng(42), 1000)
        b = model.draw(np.random.default_rng(42), 1000)
        assert a.tobytes() == b.tobytes()


def test_bounded_models_declare_infinite_q():
    for name in ("sphere", "ball", "zero"):
        assert math.isinf(builtin_noise(name, {"dim": 2}).moment_order_q)


def test_student_t_declared_order():
    model = builtin_noise("student_t", {"nu": 3.0})
    assert model.moment_order_q == 2.5
    with pytest.raises(ValueError):
        builtin_noise("student_t", {"nu": 2.2})


def test_unknown_noise_and_bad_params():
    with pytest.raises(KeyError):
        builtin_noise("cauchy")
    with pytest.raises(ValueError):
        builtin_noise("gaussian", {"sigma": -1.0})
    with pytest.raises(ValueError):
        builtin_noise("sphere", {"radius": 1.0})
