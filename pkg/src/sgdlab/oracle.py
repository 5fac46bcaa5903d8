"""Stochastic first-order oracle: gradient plus zero-mean error."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .objectives import Objective

Drawer = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class NoiseModel:
    """Error distribution of the oracle.

    ``draw(rng, n)`` returns an ``(n, dim)`` block of independent errors.
    Consecutive blocks from one generator form a single stream: a run's noise
    depends only on its generator, never on how the block sizes were chosen by
    the caller, as long as callers use the same block size.
    """

    name: str
    dim: int
    draw: Optional[Drawer]
    moment_order_q: float
    moment_bound_sigma: float
    excitation_c: Optional[float]
    params: dict

    def sampler(self, x, rng: np.random.Generator) -> np.ndarray:
        if self.draw is None:
            raise ValueError(f"noise model {self.name!r} has no sampler")
        return self.draw(rng, 1)[0]

    @property
    def variance(self) -> float:
        """E|xi|^2."""
        return float(self.params.get("_variance", 0.0))

    @property
    def is_zero(self) -> bool:
        return self.moment_bound_sigma == 0.0


@dataclass(frozen=True)
class OracleSample:
    signal: np.ndarray
    error: np.ndarray


def _chi_moment(d: int, q: float) -> float:
    """E|Z|^q for Z ~ N(0, I_d)."""
    return math.exp(0.5 * q * math.log(2.0) + math.lgamma(0.5 * (d + q)) - math.lgamma(0.5 * d))


def _half_sphere_mean(d: int) -> float:
    """E[<u, e>^+] for u uniform on the unit sphere of R^d."""
    return math.exp(math.lgamma(0.5 * d) - math.lgamma(0.5 * (d + 1))) / (2.0 * math.sqrt(math.pi))


def gaussian(sigma: float = 1.0, dim: int = 1, q: float = 4.0) -> NoiseModel:
    """Isotropic Gaussian with per-component standard deviation ``sigma``.

    All moments are finite; ``q`` only selects which one is declared.
    """
    sigma, dim, q = float(sigma), int(dim), float(q)
    if sigma < 0 or dim < 1 or q < 2 or math.isinf(q):
        raise ValueError("gaussian: need sigma >= 0, dim >= 1, finite q >= 2")

    def draw(rng, n):
        return sigma * rng.standard_normal((n, dim))

    return NoiseModel(
        name="gaussian",
        dim=dim,
        draw=draw,
        moment_order_q=q,
        moment_bound_sigma=sigma * _chi_moment(dim, q) ** (1.0 / q),
        excitation_c=sigma / math.sqrt(2.0 * math.pi),
        params={"sigma": sigma, "dim": dim, "q": q, "_variance": dim * sigma**2},
    )


def sphere(sigma: float = 1.0, dim: int = 2) -> NoiseModel:
    """Uniform on the sphere of radius ``sigma``."""
    sigma, dim = float(sigma), int(dim)
    if sigma < 0 or dim < 1:
        raise ValueError("sphere: need sigma >= 0, dim >= 1")

    def draw(rng, n):
        z = rng.standard_normal((n, dim))
        return sigma * z / np.linalg.norm(z, axis=1, keepdims=True)

    return NoiseModel(
        name="sphere",
        dim=dim,
        draw=draw,
        moment_order_q=math.inf,
        moment_bound_sigma=sigma,
        excitation_c=sigma * _half_sphere_mean(dim),
        params={"sigma": sigma, "dim": dim, "_variance": sigma**2},
    )


def ball(sigma: float = 1.0, dim: int = 2) -> NoiseModel:
    """Uniform in the ball of radius ``sigma``.

    Drawn as the first ``dim`` coordinates of a uniform point on the unit
    sphere of R^(dim+2), which is uniform in the unit ball of R^dim.
    """
    sigma, dim = float(sigma), int(dim)
    if sigma < 0 or dim < 1:
        raise ValueError("ball: need sigma >= 0, dim >= 1")

    def draw(rng, n):
        z = rng.standard_normal((n, dim + 2))
        return sigma * z[:, :dim] / np.linalg.norm(z, axis=1, keepdims=True)

    return NoiseModel(
        name="ball",
        dim=dim,
        draw=draw,
        moment_order_q=math.inf,
        moment_bound_sigma=sigma,
        excitation_c=sigma * dim / (dim + 1.0) * _half_sphere_mean(dim),
        params={"sigma": sigma, "dim": dim, "_variance": sigma**2 * dim / (dim + 2.0)},
    )


def student_t(nu: float = 3.0, scale: float = 1.0, dim: int = 1) -> NoiseModel:
    """Multivariate Student-t: ``scale * Z / sqrt(W / nu)``, W ~ chi^2_nu.

    E|xi|^q is finite iff q < nu; the declared order is nu - 1/2.
    """
    nu, scale, dim = float(nu), float(scale), int(dim)
    if nu < 2.5:
        raise ValueError("student_t: nu must be >= 2.5 so that the declared q = nu - 0.5 >= 2")
    if scale < 0 or dim < 1:
        raise ValueError("student_t: need scale >= 0, dim >= 1")
    q = nu - 0.5

    def draw(rng, n):
        z = rng.standard_normal((n, dim))
        w = rng.chisquare(nu, size=n)
        return scale * z / np.sqrt(w / nu)[:, None]

    # E|xi|^q = scale^q E|Z|^q nu^(q/2) E[W^(-q/2)]
    log_inv_w = -0.5 * q * math.log(2.0) + math.lgamma(0.5 * (nu - q)) - math.lgamma(0.5 * nu)
    moment = scale**q * _chi_moment(dim, q) * nu ** (0.5 * q) * math.exp(log_inv_w)
    # <xi, u> ~ scale * t_nu; E[t^+] = E|t| / 2
    abs_t = (
        2.0
        * math.sqrt(nu)
        * math.exp(math.lgamma(0.5 * (nu + 1)) - math.lgamma(0.5 * nu))
        / (math.sqrt(math.pi) * (nu - 1.0))
    )
    return NoiseModel(
        name="student_t",
        dim=dim,
        draw=draw,
        moment_order_q=q,
        moment_bound_sigma=moment ** (1.0 / q),
        excitation_c=0.5 * scale * abs_t,
        params={"nu": nu, "scale": scale, "dim": dim, "_variance": dim * scale**2 * nu / (nu - 2.0)},
    )


def zero(dim: int = 1) -> NoiseModel:
    dim = int(dim)

    def draw(rng, n):
        return np.zeros((n, dim))

    return NoiseModel(
        name="zero",
        dim=dim,
        draw=draw,
        moment_order_q=math.inf,
        moment_bound_sigma=0.0,
        excitation_c=0.0,
        params={"dim": dim, "_variance": 0.0},
    )


CATALOG = {
    "gaussian": gaussian,
    "sphere": sphere,
    "ball": ball,
    "student_t": student_t,
    "zero": zero,
}


def builtin_noise(name: str, params: Optional[dict] = None) -> NoiseModel:
    if name not in CATALOG:
        raise KeyError(f"unknown noise model {name!r}; available: {sorted(CATALOG)}")
    try:
        return CATALOG[name](**dict(params or {}))
    except TypeError as exc:
        raise ValueError(f"invalid parameters for {name!r}: {exc}") from None


def sample(model: NoiseModel, obj: Objective, x, rng: np.random.Generator) -> OracleSample:
    """Query the oracle once at ``x``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("query point must be finite")
    g = obj.grad(x)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient at {x}")
    err = model.sampler(x, rng)
    return OracleSample(signal=g + err, error=err)


@dataclass(frozen=True)
class ExcitationEstimate:
    value: float
    stderr: float
    direction: np.ndarray


def estimate_excitation(
    model: NoiseModel, x, n_samples: int, n_directions: int, rng: np.random.Generator
) -> ExcitationEstimate:
    """Minimum over random unit directions u of the Monte Carlo mean of <xi, u>^+."""
    if model.draw is None:
        raise ValueError(f"noise model {model.name!r} has no sampler")
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    if n_directions < 1:
        raise ValueError("n_directions must be positive")
    u = rng.standard_normal((n_directions, model.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    xi = model.draw(rng, n_samples)
    proj = np.maximum(xi @ u.T, 0.0)
    means = proj.mean(axis=0)
    k = int(np.argmin(means))
    stderr = float(proj[:, k].std(ddof=1) / math.sqrt(n_samples))
    return ExcitationEstimate(value=float(means[k]), stderr=stderr, direction=u[k])
