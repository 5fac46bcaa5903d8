"""Test objectives with analytically known critical structure.

Every objective is vectorized over leading axes: ``eval`` maps ``(..., d)`` to
``(...)``, ``grad`` maps ``(..., d)`` to ``(..., d)`` and ``hess`` maps
``(..., d)`` to ``(..., d, d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]

KINDS = ("hurwicz_minimizer", "strict_saddle_point", "strict_saddle_manifold", "degenerate")


@dataclass(frozen=True)
class CriticalFeature:
    """A connected piece of the critical set.

    ``distance`` maps points ``(..., d)`` to their distance from the locus.
    ``unstable_distance`` (saddles only) is the distance to the center-stable
    manifold measured along the unstable directions; it is what the energy
    function integrates.
    """

    id: str
    kind: str
    point: np.ndarray
    distance: ArrayFn
    spectrum_bounds: tuple[float, float] = (0.0, 0.0)
    hurwicz_bounds: Optional[tuple[float, float]] = None
    neighborhood_radius: float = 0.0
    is_local_min: bool = False
    scale: float = 1.0
    locus_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    unstable_distance: Optional[ArrayFn] = None
    stable_point: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown critical feature kind {self.kind!r}")

    def sample_locus(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.locus_sampler is None:
            return np.repeat(self.point[None, :], n, axis=0)
        return self.locus_sampler(rng, n)


@dataclass(frozen=True)
class Objective:
    name: str
    dim: int
    eval: ArrayFn
    grad: ArrayFn
    hess: ArrayFn
    lipschitz_G: float
    smooth_L: float
    assumption_flags: dict
    critical_set: tuple = ()
    params: dict = field(default_factory=dict)
    # Optional replacement for -grad as the continuous-time vector field
    # (pseudo-gradient flows).
    flow_field: Optional[ArrayFn] = None
    notes: tuple = ()

    def feature(self, feature_id: str) -> CriticalFeature:
        for feat in self.critical_set:
            if feat.id == feature_id:
                return feat
        raise KeyError(f"{self.name} has no critical feature {feature_id!r}")

    def minimizers(self) -> list[CriticalFeature]:
        return [f for f in self.critical_set if f.is_local_min]

    def distances(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {f.id: f.distance(x) for f in self.critical_set}


def _as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _point_distance(center) -> ArrayFn:
    center = np.asarray(center, dtype=float)

    def dist(x):
        return np.linalg.norm(_as_points(x) - center, axis=-1)

    return dist


# ---------------------------------------------------------------------------
# catalog


def _quadratic(lam=(1.0, 1.0)) -> Objective:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("quadratic: 'lam' must be a nonempty list of curvatures")
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise ValueError("quadratic: curvatures must be positive and finite")
    d = lam.size
    origin = np.zeros(d)
    q_min, q_max = float(lam.min()), float(lam.max())
    minimizer = CriticalFeature(
        id="min",
        kind="hurwicz_minimizer",
        point=origin,
        distance=_point_distance(origin),
        spectrum_bounds=(0.0, q_min),
        hurwicz_bounds=(q_min, q_max),
        neighborhood_radius=1.0,
        is_local_min=True,
    )
    return Objective(
        name="quadratic",
        dim=d,
        eval=lambda x: 0.5 * np.sum(lam * _as_points(x) ** 2, axis=-1),
        grad=lambda x: lam * _as_points(x),
        hess=lambda x: np.broadcast_to(np.diag(lam), _as_points(x).shape[:-1] + (d, d)).copy(),
        lipschitz_G=math.inf,
        smooth_L=q_max,
        assumption_flags={1: False, 2: True, 3: True},
        critical_set=(minimizer,),
        params={"lam": lam.tolist()},
        notes=("Assumption 1 fails globally (unbounded gradient), holds on compact sets",),
    )


def _hyperbolic_saddle() -> Objective:
    signs = np.array([1.0, -1.0])
    origin = np.zeros(2)
    saddle = CriticalFeature(
        id="saddle",
        kind="strict_saddle_point",
        point=origin,
        distance=_point_distance(origin),
        spectrum_bounds=(1.0, 1.0),
        unstable_distance=lambda x: np.abs(_as_points(x)[..., 1]),
        stable_point=np.array([1.0, 0.0]),
    )
    return Objective(
        name="hyperbolic_saddle",
        dim=2,
        eval=lambda x: 0.5 * np.sum(signs * _as_points(x) ** 2, axis=-1),
        grad=lambda x: signs * _as_points(x),
        hess=lambda x: np.broadcast_to(np.diag(signs), _as_points(x).shape[:-1] + (2, 2)).copy(),
        lipschitz_G=math.inf,
        smooth_L=1.0,
        assumption_flags={1: False, 2: False, 3: True},
        critical_set=(saddle,),
    )


def _ridge(dim=3) -> Objective:
    """f = x^2/2 - y^2/2 + y^4/4, constant in the remaining coordinates.

    The set {x = 0, y = 0} is a line (hyperplane for dim > 3) of strict
    saddles; {x = 0, y = +-1} are flat valleys of degenerate minimizers.
    """
    dim = int(dim)
    if dim < 3:
        raise ValueError("ridge: dim must be >= 3")

    def f(x):
        x = _as_points(x)
        return 0.5 * x[..., 0] ** 2 - 0.5 * x[..., 1] ** 2 + 0.25 * x[..., 1] ** 4

    def g(x):
        x = _as_points(x)
        out = np.zeros_like(x)
        out[..., 0] = x[..., 0]
        out[..., 1] = -x[..., 1] + x[..., 1] ** 3
        return out

    def h(x):
        x = _as_points(x)
        out = np.zeros(x.shape + (dim,))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = -1.0 + 3.0 * x[..., 1] ** 2
        return out

    def line_dist(offset):
        def dist(x):
            x = _as_points(x)
            return np.hypot(x[..., 0], x[..., 1] - offset)

        return dist

    def line_sampler(offset):
        def sample(rng, n):
            pts = np.zeros((n, dim))
            pts[:, 1] = offset
            pts[:, 2:] = rng.uniform(-1.0, 1.0, size=(n, dim - 2))
            return pts

        return sample

    stable = np.zeros(dim)
    stable[0] = 1.0
    saddle_line = CriticalFeature(
        id="ridge",
        kind="strict_saddle_manifold",
        point=np.zeros(dim),
        distance=line_dist(0.0),
        spectrum_bounds=(1.0, 1.0),
        locus_sampler=line_sampler(0.0),
        unstable_distance=lambda x: np.abs(_as_points(x)[..., 1]),
        stable_point=stable,
    )
    valleys = tuple(
        CriticalFeature(
            id=name,
            kind="degenerate",
            point=np.eye(dim)[1] * off,
            distance=line_dist(off),
            spectrum_bounds=(0.0, 1.0),
            is_local_min=True,
            locus_sampler=line_sampler(off),
        )
        for name, off in (("valley_plus", 1.0), ("valley_minus", -1.0))
    )
    return Objective(
        name="ridge",
        dim=dim,
        eval=f,
        grad=g,
        hess=h,
        lipschitz_G=math.inf,
        smooth_L=math.inf,
        assumption_flags={1: False, 2: False, 3: False},
        critical_set=(saddle_line,) + valleys,
        params={"dim": dim},
    )


def _monkey_saddle() -> Objective:
    def f(x):
        x = _as_points(x)
        return x[..., 0] ** 3 - 3.0 * x[..., 0] * x[..., 1] ** 2

    def g(x):
        x = _as_points(x)
        return np.stack(
            [3.0 * x[..., 0] ** 2 - 3.0 * x[..., 1] ** 2, -6.0 * x[..., 0] * x[..., 1]], axis=-1
        )

    def h(x):
        x = _as_points(x)
        a, b = 6.0 * x[..., 0], -6.0 * x[..., 1]
        return np.stack([np.stack([a, b], -1), np.stack([b, -a], -1)], -2)

    origin = np.zeros(2)
    feat = CriticalFeature(
        id="monkey", kind="degenerate", point=origin, distance=_point_distance(origin)
    )
    return Objective(
        name="monkey_saddle",
        dim=2,
        eval=f,
        grad=g,
        hess=h,
        lipschitz_G=math.inf,
        smooth_L=math.inf,
        assumption_flags={1: False, 2: False, 3: True},
        critical_set=(feat,),
        notes=("degenerate critical point; outside the strict-saddle theory",),
    )


def _rosenbrock(b=1.0) -> Objective:
    """f = (1 - x)^2/2 + b (y - x^2)^2 / 2 with unique minimizer (1, 1)."""
    b = float(b)
    if b <= 0:
        raise ValueError("rosenbrock: b must be positive")

    def f(x):
        x = _as_points(x)
        return 0.5 * (1.0 - x[..., 0]) ** 2 + 0.5 * b * (x[..., 1] - x[..., 0] ** 2) ** 2

    def g(x):
        x = _as_points(x)
        r = x[..., 1] - x[..., 0] ** 2
        return np.stack([x[..., 0] - 1.0 - 2.0 * b * x[..., 0] * r, b * r], axis=-1)

    def h(x):
        x = _as_points(x)
        r = x[..., 1] - x[..., 0] ** 2
        hxx = 1.0 - 2.0 * b * r + 4.0 * b * x[..., 0] ** 2
        hxy = -2.0 * b * x[..., 0]
        hyy = np.full_like(hxx, b)
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)

    star = np.array([1.0, 1.0])
    # Hessian eigenvalues over the radius-0.1 ball lie in [0.118, 7.07] for b=1;
    # the declared bounds scale the margins with b.
    q_bounds = (0.1, 7.5) if b == 1.0 else _hessian_bounds(h, star, 0.1)
    minimizer = CriticalFeature(
        id="min",
        kind="hurwicz_minimizer",
        point=star,
        distance=_point_distance(star),
        spectrum_bounds=(0.0, q_bounds[0]),
        hurwicz_bounds=q_bounds,
        neighborhood_radius=0.1,
        is_local_min=True,
    )
    return Objective(
        name="rosenbrock",
        dim=2,
        eval=f,
        grad=g,
        hess=h,
        lipschitz_G=math.inf,
        smooth_L=math.inf,
        assumption_flags={1: False, 2: True, 3: True},
        critical_set=(minimizer,),
        params={"b": b},
        notes=("Assumption 1 fails globally (unbounded gradient), holds on compact sets",),
    )


def _hessian_bounds(hess: ArrayFn, center: np.ndarray, radius: float, n: int = 20000):
    rng = np.random.default_rng(0)
    u = rng.normal(size=(n, center.size))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / center.size)
    eig = np.linalg.eigvalsh(hess(center + r[:, None] * u))
    lo, hi = float(eig[:, 0].min()), float(eig[:, -1].max())
    if lo <= 0:
        raise ValueError("minimizer neighborhood is not positive definite")
    return (0.8 * lo, 1.1 * hi)


def _apt_counterexample() -> Objective:
    def f(x):
        x = _as_points(x)
        return 0.5 * x[..., 1] ** 2 - x[..., 0]

    def g(x):
        x = _as_points(x)
        return np.stack([-np.ones_like(x[..., 0]), x[..., 1]], axis=-1)

    def h(x):
        x = _as_points(x)
        out = np.zeros(x.shape + (2,))
        out[..., 1, 1] = 1.0
        return out

    def field(x):
        x = _as_points(x)
        return np.stack([np.ones_like(x[..., 0]), -x[..., 1] / (1.0 + x[..., 0])], axis=-1)

    return Objective(
        name="apt_counterexample",
        dim=2,
        eval=f,
        grad=g,
        hess=h,
        lipschitz_G=math.inf,
        smooth_L=1.0,
        assumption_flags={1: False, 2: False, 3: True},
        critical_set=(),
        flow_field=field,
        notes=("continuous-time dynamics use the pseudo-gradient field (1, -x2/(1+x1))",),
    )


def _linear_divergent() -> Objective:
    return Objective(
        name="linear_divergent",
        dim=1,
        eval=lambda x: -_as_points(x)[..., 0],
        grad=lambda x: -np.ones_like(_as_points(x)),
        hess=lambda x: np.zeros(_as_points(x).shape + (1,)),
        lipschitz_G=1.0,
        smooth_L=0.0,
        assumption_flags={1: True, 2: False, 3: True},
        critical_set=(),
        notes=("unbounded below: sublevel sets are unbounded",),
    )


def _gaussian_well(dim=1) -> Objective:
    dim = int(dim)
    if dim < 1:
        raise ValueError("gaussian_well: dim must be >= 1")

    def f(x):
        return -np.exp(-np.sum(_as_points(x) ** 2, axis=-1))

    def g(x):
        x = _as_points(x)
        return 2.0 * x * np.exp(-np.sum(x**2, axis=-1))[..., None]

    def h(x):
        x = _as_points(x)
        e = np.exp(-np.sum(x**2, axis=-1))[..., None, None]
        return e * (2.0 * np.eye(dim) - 4.0 * x[..., :, None] * x[..., None, :])

    origin = np.zeros(dim)
    # <grad f(x), x> = 2 exp(-|x|^2) |x|^2, so on the radius-1/2 ball the
    # ratio lies in [2 exp(-1/4), 2].
    minimizer = CriticalFeature(
        id="min",
        kind="hurwicz_minimizer",
        point=origin,
        distance=_point_distance(origin),
        spectrum_bounds=(0.0, 2.0),
        hurwicz_bounds=(2.0 * math.exp(-0.25), 2.0),
        neighborhood_radius=0.5,
        is_local_min=True,
    )
    return Objective(
        name="gaussian_well",
        dim=dim,
        eval=f,
        grad=g,
        hess=h,
        lipschitz_G=math.sqrt(2.0) * math.exp(-0.5),
        smooth_L=2.0,
        assumption_flags={1: True, 2: True, 3: False},
        critical_set=(minimizer,),
        params={"dim": dim},
        notes=("near-critical behavior at infinity: gradient vanishes as |x| grows",),
    )


CATALOG: dict[str, Callable[..., Objective]] = {
    "quadratic": _quadratic,
    "hyperbolic_saddle": _hyperbolic_saddle,
    "ridge": _ridge,
    "monkey_saddle": _monkey_saddle,
    "rosenbrock": _rosenbrock,
    "apt_counterexample": _apt_counterexample,
    "linear_divergent": _linear_divergent,
    "gaussian_well": _gaussian_well,
}


def builtin_objective(name: str, params: Optional[dict] = None) -> Objective:
    """Instantiate a catalog objective by name."""
    if name not in CATALOG:
        raise KeyError(f"unknown objective {name!r}; available: {sorted(CATALOG)}")
    params = dict(params or {})
    try:
        return CATALOG[name](**params)
    except TypeError as exc:
        raise ValueError(f"invalid parameters for {name!r}: {exc}") from None


# ---------------------------------------------------------------------------
# checks


@dataclass
class AssumptionReport:
    objective: str
    domain_radius: float
    empirical_G: float
    empirical_L: float
    declared_G: float
    declared_L: float
    flags: dict
    notes: list

    def holds(self, k: int) -> bool:
        return bool(self.flags[k])


def check_assumptions(
    obj: Objective, domain_radius: float, n_samples: int = 20000, seed: int = 0
) -> AssumptionReport:
    """Sample gradient size and gradient Lipschitz ratios on [-R, R]^d.

    The cube's corners are always included so the sampled sup of a radially
    growing gradient is attained exactly.
    """
    if domain_radius <= 0:
        raise ValueError("domain_radius must be positive")
    rng = np.random.default_rng(seed)
    d = obj.dim
    pts = rng.uniform(-domain_radius, domain_radius, size=(n_samples, d))
    if d <= 12:
        corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * d, indexing="ij")).reshape(d, -1).T
        pts = np.vstack([pts, domain_radius * corners])
    grads = obj.grad(pts)
    emp_G = float(np.max(np.linalg.norm(grads, axis=-1)))

    other = rng.uniform(-domain_radius, domain_radius, size=pts.shape)
    # short-range pairs resolve local curvature, long-range pairs the global modulus
    near = pts + 1e-3 * domain_radius * rng.normal(size=pts.shape)
    ratios = []
    for q in (other, near):
        dx = np.linalg.norm(q - pts, axis=-1)
        dg = np.linalg.norm(obj.grad(q) - grads, axis=-1)
        ok = dx > 0
        ratios.append(dg[ok] / dx[ok])
    emp_L = float(np.max(np.concatenate(ratios)))

    notes = list(obj.notes)
    if not obj.assumption_flags[1]:
        if math.isinf(obj.lipschitz_G) or math.isinf(obj.smooth_L):
            notes.append("Assumption 1 fails globally (unbounded gradient), holds locally")
        else:
            notes.append("Assumption 1 fails")
    if not obj.assumption_flags[2]:
        notes.append("Assumption 2 fails: sublevel sets are unbounded")
    if not obj.assumption_flags[3]:
        notes.append("Assumption 3 fails: near-critical behavior at infinity")
    if emp_G > obj.lipschitz_G * (1 + 1e-9):
        notes.append("sampled gradient norm exceeds declared G")
    if emp_L > obj.smooth_L * (1 + 1e-6):
        notes.append("sampled Lipschitz ratio exceeds declared L")
    return AssumptionReport(
        objective=obj.name,
        domain_radius=float(domain_radius),
        empirical_G=emp_G,
        empirical_L=emp_L,
        declared_G=obj.lipschitz_G,
        declared_L=obj.smooth_L,
        flags=dict(obj.assumption_flags),
        notes=notes,
    )


def fd_gradient(f: ArrayFn, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a scalar field at a single point."""
    x = np.asarray(x, dtype=float)
    steps = h * np.eye(x.size)
    return (f(x + steps) - f(x - steps)) / (2.0 * h)


def fd_hessian(grad: ArrayFn, x: np.ndarray, h: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    steps = h * np.eye(x.size)
    jac = (grad(x + steps) - grad(x - steps)) / (2.0 * h)
    return 0.5 * (jac + jac.T)


def check_qbounds(obj: Objective, feature: CriticalFeature, n: int = 10_000, seed: int = 0):
    """Return the extreme ratios <grad f(x), x - x*> / |x - x*|^2 sampled on K."""
    if feature.hurwicz_bounds is None:
        raise ValueError(f"feature {feature.id!r} declares no Hurwicz bounds")
    rng = np.random.default_rng(seed)
    d = obj.dim
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = feature.neighborhood_radius * rng.random(n) ** (1.0 / d)
    r = np.maximum(r, 1e-6 * feature.neighborhood_radius)
    diff = r[:, None] * u
    ratio = np.sum(obj.grad(feature.point + diff) * diff, axis=1) / np.sum(diff**2, axis=1)
    return float(ratio.min()), float(ratio.max())
