"""
Parameter objects, RNG streams and exact increment samplers.

Normalisation contract: Y_t has characteristic function e^{-t|xi|^alpha},
Z_t is Brownian motion with generator the Laplacian (variance 2t), and the
Levy measure of Y is levy_constant(params) * |u|^{-d-alpha} du.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from django.core.exceptions import ImproperlyConfigured
from scipy import integrate, special

from .conf import get_setting
from .exceptions import GeometryError

logger = logging.getLogger(__name__)

ArrayOrFloat = Union[float, np.ndarray]


@dataclass(frozen=True)
class StableParams:
    """
    Spatial dimension and stability index of the horizontal process.

    Attributes:
        d (int): Spatial dimension, d >= 1.
        alpha (float): Stability index in the open interval (0, 2).
    """

    d: int
    alpha: float

    def __post_init__(self):
        if isinstance(self.d, bool) or not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ImproperlyConfigured(f"d={self.d!r} must be a positive integer.")
        if not (0.0 < float(self.alpha) < 2.0):
            raise ImproperlyConfigured(f"alpha={self.alpha!r} is outside (0, 2).")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def subordinator_index(self) -> float:
        return self.alpha / 2.0


@dataclass(frozen=True)
class SpaceTimePoint:
    """
    A point (x, t) of the closed upper half-space; t = 0 is the boundary.
    """

    x: Tuple[float, ...]
    t: float

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "t", float(self.t))
        if self.t < 0:
            raise GeometryError(f"t={self.t} lies below the half-space.")

    @property
    def d(self) -> int:
        return len(self.x)

    @property
    def on_boundary(self) -> bool:
        return self.t == 0.0

    def position(self) -> np.ndarray:
        return np.asarray(self.x, dtype=float)


class RngStream:
    """
    Counter-based random stream keyed by (master_seed, stream_id).

    Each stream owns a Philox generator whose 128-bit key is derived from a
    SeedSequence over the master seed and the stream's spawn key, so equal
    keys replay equal variates and distinct keys give independent streams.

    Attributes:
        master_seed (int): 64-bit experiment seed.
        stream_id (int): Stream index (one per path or task).
        path (tuple): Child indices below stream_id, see child().
    """

    def __init__(self, master_seed: int, stream_id: int = 0, path: Tuple[int, ...] = ()):
        if not (0 <= int(master_seed) < 2**64):
            raise ImproperlyConfigured(f"seed={master_seed} is not an unsigned 64-bit integer.")
        if int(stream_id) < 0:
            raise ImproperlyConfigured(f"stream_id={stream_id} must be nonnegative.")
        self.master_seed = int(master_seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(k) for k in path)
        sequence = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_id,) + self.path
        )
        key = sequence.generate_state(2, dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, index: int) -> "RngStream":
        """
        Returns the independent stream for sub-task `index` of this stream.
        """
        return RngStream(self.master_seed, self.stream_id, self.path + (index,))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id}, path={self.path})"


def levy_constant(params: StableParams) -> float:
    """
    The constant c(d, alpha) for which c|u|^{-d-alpha} du is the Levy measure
    of the process with exponent |xi|^alpha.

    c = alpha 2^{alpha-1} Gamma((d+alpha)/2) / (pi^{d/2} Gamma(1-alpha/2))
    """
    d, alpha = params.d, params.alpha
    log_c = (
        math.log(alpha)
        + (alpha - 1.0) * math.log(2.0)
        + special.gammaln((d + alpha) / 2.0)
        - (d / 2.0) * math.log(math.pi)
        - special.gammaln(1.0 - alpha / 2.0)
    )
    return math.exp(log_c)


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def levy_tail_mass(params: StableParams, radius: float) -> float:
    """
    Levy measure of {|u| > radius}: c(d, alpha) omega_d radius^{-alpha} / alpha.
    """
    if radius <= 0:
        raise ValueError("radius must be positive.")
    return levy_constant(params) * sphere_area(params.d) * radius ** (-params.alpha) / params.alpha


def _check_beta(beta: float):
    if not (0.0 < beta < 1.0):
        raise ImproperlyConfigured(f"beta={beta!r} is outside (0, 1).")


def _check_dt(dt: float):
    if not dt > 0:
        raise ValueError(f"dt={dt!r} must be positive.")


def sample_subordinator_increment(
    beta: float, dt: float, rng: RngStream, size: Optional[int] = None
) -> ArrayOrFloat:
    """
    Exact draw(s) of a one-sided beta-stable subordinator increment with
    E[exp(-lam S)] = exp(-dt lam^beta).

    Uses the Chambers-Mallows-Stuck angular transform in Kanter's form:

        S = dt^{1/beta} sin(beta U) / sin(U)^{1/beta}
            * (sin((1-beta) U) / E)^{(1-beta)/beta}

    with U uniform on (0, pi) and E standard exponential. Evaluated in log
    space so that small beta does not overflow.

    Args:
        beta (float): Index in (0, 1).
        dt (float): Time increment, dt > 0.
        rng (RngStream): Source of randomness.
        size (int, optional): Number of draws. A float is returned when None.

    Returns:
        float or np.ndarray: Strictly positive draw(s).
    """
    _check_beta(beta)
    _check_dt(dt)
    generator = rng.generator
    u = math.pi * (1.0 - generator.random(size))
    e = np.maximum(generator.standard_exponential(size), np.finfo(float).tiny)
    log_s = (
        math.log(dt) / beta
        + np.log(np.sin(beta * u))
        - np.log(np.sin(u)) / beta
        + (1.0 - beta) / beta * (np.log(np.sin((1.0 - beta) * u)) - np.log(e))
    )
    draws = np.exp(log_s)
    if size is None:
        return float(draws)
    return draws


def sample_stable_increment(
    params: StableParams, dt: float, rng: RngStream, size: Optional[int] = None
) -> np.ndarray:
    """
    Exact draw(s) of Y_dt - Y_0 for the isotropic law with characteristic
    function exp(-dt |xi|^alpha).

    Gaussian subordination: Y = sqrt(2 S) N with S an alpha/2 subordinator
    draw at time dt and N a standard d-dimensional Gaussian, so that
    E exp(i xi.Y) = E exp(-S |xi|^2) = exp(-dt |xi|^alpha).

    Returns:
        np.ndarray: shape (d,) when size is None, otherwise (size, d).
    """
    _check_dt(dt)
    s = sample_subordinator_increment(params.subordinator_index, dt, rng, size)
    if size is None:
        normal = rng.generator.standard_normal(params.d)
        return math.sqrt(2.0 * s) * normal
    normal = rng.generator.standard_normal((size, params.d))
    return np.sqrt(2.0 * s)[:, None] * normal


def sample_brownian_increment(
    dt: float, rng: RngStream, size: Optional[int] = None
) -> ArrayOrFloat:
    """
    Gaussian draw(s) with mean 0 and variance 2 dt (generator = Laplacian).
    """
    _check_dt(dt)
    draws = rng.generator.normal(0.0, math.sqrt(2.0 * dt), size)
    if size is None:
        return float(draws)
    return draws


def _angular_exponent(beta: float, u: float, log_x: float) -> float:
    # z(u) = A(u) x^{-beta/(1-beta)} with A from the angular representation
    log_a = (
        math.log(math.sin((1.0 - beta) * u))
        + beta / (1.0 - beta) * math.log(math.sin(beta * u))
        - math.log(math.sin(u)) / (1.0 - beta)
    )
    return math.exp(min(log_a - beta / (1.0 - beta) * log_x, 700.0))


def subordinator_cdf(beta: float, dt: float, s: float, atol: Optional[float] = None) -> float:
    """
    P(S_dt <= s) for the beta-stable subordinator, by quadrature of

        (1/pi) int_0^pi exp(-A(u) x^{-beta/(1-beta)}) du,  x = s dt^{-1/beta}.

    For beta = 1/2 this is erfc(dt / (2 sqrt(s))).
    """
    _check_beta(beta)
    _check_dt(dt)
    if s <= 0:
        return 0.0
    atol = atol or get_setting("QUAD_ATOL")
    log_x = math.log(s) - math.log(dt) / beta
    value, _ = integrate.quad(
        lambda u: math.exp(-_angular_exponent(beta, u, log_x)),
        0.0,
        math.pi,
        epsabs=atol * 1e-2,
        epsrel=1e-12,
        limit=200,
    )
    return min(max(value / math.pi, 0.0), 1.0)


def subordinator_density(beta: float, dt: float, s: float, atol: Optional[float] = None) -> float:
    """
    Density g_beta(dt, s) of the beta-stable subordinator at s > 0.

    Differentiates the angular CDF representation:
    g = beta / ((1-beta) pi s) int_0^pi z(u) exp(-z(u)) du.
    """
    _check_beta(beta)
    _check_dt(dt)
    if s <= 0:
        return 0.0
    atol = atol or get_setting("QUAD_ATOL")
    log_x = math.log(s) - math.log(dt) / beta

    def integrand(u):
        z = _angular_exponent(beta, u, log_x)
        return z * math.exp(-z)

    value, _ = integrate.quad(integrand, 0.0, math.pi, epsabs=atol * 1e-4, epsrel=1e-12, limit=200)
    return beta / ((1.0 - beta) * math.pi * s) * value


def characteristic_probe(samples: np.ndarray, xi: Sequence[float]) -> Tuple[float, float]:
    """
    Monte Carlo mean and standard error of cos(xi . Y) over samples of shape (n, d).
    """
    values = np.cos(np.asarray(samples) @ np.asarray(xi, dtype=float))
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(len(values)))
