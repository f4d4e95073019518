"""
Deterministic kernels and grid operators.

Densities p(s, r) of the isotropic stable law, the vertical exit law mu_t,
the harmonic-extension kernel q_t, and spectral application of Q_t and of
the product semigroup on padded periodic lattices.
"""
import csv
import io
import math
import struct
from dataclasses import dataclass
from typing import ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft as sfft
from scipy import integrate, interpolate, spatial, special

from .conf import get_setting, info
from .exceptions import InsufficientPadding, ToleranceNotReached
from .stable_core import StableParams, levy_constant, sphere_area, subordinator_density

GRID_MAGIC = b"STLGRID1"
TABLE_MAGIC = b"STLKTAB1"

PadSpec = Union[str, int]


# ---------------------------------------------------------------------------
# Grid carrier
# ---------------------------------------------------------------------------


@dataclass
class GridFunction:
    """
    A function sampled on a uniform d-dimensional lattice, optionally
    stacked over an ascending list of heights.

    Attributes:
        origin (np.ndarray): Coordinates of lattice index (0, ..., 0).
        spacing (float): Lattice spacing h, shared by every axis.
        values (np.ndarray): Shape `extent`, or (len(heights), *extent).
        heights (np.ndarray, optional): Ascending heights of the slices.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray
    heights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origin = np.atleast_1d(np.asarray(self.origin, dtype=float))
        self.spacing = float(self.spacing)
        self.values = np.asarray(self.values, dtype=float)
        if not self.spacing > 0:
            raise ValueError(f"spacing={self.spacing} must be positive.")
        expected_ndim = self.d if self.heights is None else self.d + 1
        if self.values.ndim != expected_ndim:
            raise ValueError(
                f"values has {self.values.ndim} axes, expected {expected_ndim} for d={self.d}."
            )
        if self.heights is not None:
            self.heights = np.asarray(self.heights, dtype=float)
            if self.heights.ndim != 1 or len(self.heights) != self.values.shape[0]:
                raise ValueError("heights must list one height per value slice.")
            if len(self.heights) > 1 and np.any(np.diff(self.heights) <= 0):
                raise ValueError("heights must be strictly ascending.")

    @property
    def d(self) -> int:
        return len(self.origin)

    @property
    def extent(self) -> Tuple[int, ...]:
        return tuple(self.values.shape[-self.d:])

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.d

    @property
    def lattice_axes(self) -> Tuple[int, ...]:
        offset = 0 if self.heights is None else 1
        return tuple(range(offset, offset + self.d))

    @classmethod
    def centered(cls, d: int, half_width: float, spacing: float, func=None) -> "GridFunction":
        """
        Lattice symmetric about the origin with 2m+1 points per axis,
        m = round(half_width / spacing). Values from func(*mesh) or zeros.
        """
        m = int(round(half_width / spacing))
        origin = np.full(d, -m * spacing)
        grid = cls(origin, spacing, np.zeros((2 * m + 1,) * d))
        if func is not None:
            grid.values = np.asarray(func(*grid.mesh()), dtype=float) * np.ones(grid.extent)
        return grid

    def axes(self) -> List[np.ndarray]:
        return [self.origin[i] + self.spacing * np.arange(n) for i, n in enumerate(self.extent)]

    def mesh(self) -> List[np.ndarray]:
        return np.meshgrid(*self.axes(), indexing="ij")

    def points(self) -> np.ndarray:
        return np.stack([m.ravel() for m in self.mesh()], axis=1)

    def with_values(self, values: np.ndarray, heights: Optional[np.ndarray] = None) -> "GridFunction":
        return GridFunction(self.origin.copy(), self.spacing, values, heights)

    def slice_at(self, index: int) -> "GridFunction":
        if self.heights is None:
            raise ValueError("GridFunction has no height slices.")
        return GridFunction(self.origin.copy(), self.spacing, self.values[index])

    def riemann_sum(self) -> Union[float, np.ndarray]:
        total = self.values.sum(axis=self.lattice_axes) * self.cell_volume
        return float(total) if np.ndim(total) == 0 else total

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def interior_mask(self, margin_cells: int) -> np.ndarray:
        mask = np.zeros(self.extent, dtype=bool)
        index = tuple(slice(margin_cells, n - margin_cells) for n in self.extent)
        mask[index] = True
        return mask

    def crop(self, start: Sequence[int], shape: Sequence[int]) -> "GridFunction":
        """
        Sub-lattice beginning at lattice index `start` with the given shape.
        """
        index = tuple(slice(s, s + n) for s, n in zip(start, shape))
        if self.heights is not None:
            index = (slice(None),) + index
        origin = self.origin + self.spacing * np.asarray(start)
        return GridFunction(origin, self.spacing, self.values[index].copy(), self.heights)

    def interpolator(self):
        """
        Linear interpolator over (height, x) or x, zero outside the lattice.
        """
        grid_axes = self.axes()
        if self.heights is not None:
            grid_axes = [self.heights] + grid_axes
        return interpolate.RegularGridInterpolator(
            tuple(grid_axes), self.values, method="linear", bounds_error=False, fill_value=0.0
        )

    # ---- interchange --------------------------------------------------

    def to_csv(self) -> str:
        """
        CSV with a commented header and one row per lattice value:
        [height_index,] i_1..i_d, value. Doubles use 17 significant digits.
        """
        buffer = io.StringIO()
        buffer.write(f"# d={self.d}\n")
        buffer.write("# origin=" + ",".join(format(v, ".17g") for v in self.origin) + "\n")
        buffer.write(f"# spacing={format(self.spacing, '.17g')}\n")
        buffer.write("# extent=" + ",".join(str(n) for n in self.extent) + "\n")
        if self.heights is not None:
            buffer.write("# heights=" + ",".join(format(v, ".17g") for v in self.heights) + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        index_names = [f"i_{k + 1}" for k in range(self.d)]
        if self.heights is not None:
            index_names = ["k"] + index_names
        writer.writerow(index_names + ["value"])
        for index in np.ndindex(self.values.shape):
            writer.writerow(list(index) + [format(float(self.values[index]), ".17g")])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GridFunction":
        header = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                header[key] = value
            elif line:
                rows.append(line)
        d = int(header["d"])
        origin = np.array([float(v) for v in header["origin"].split(",")])
        spacing = float(header["spacing"])
        extent = tuple(int(v) for v in header["extent"].split(","))
        heights = None
        shape = extent
        if "heights" in header:
            heights = np.array([float(v) for v in header["heights"].split(",")])
            shape = (len(heights),) + extent
        values = np.zeros(shape)
        reader = csv.reader(rows[1:])
        for row in reader:
            index = tuple(int(v) for v in row[:-1])
            values[index] = float(row[-1])
        if len(origin) != d:
            raise ValueError("origin length does not match d.")
        return cls(origin, spacing, values, heights)

    def to_bytes(self) -> bytes:
        """
        Compact binary: 8-byte magic, little-endian int64 header
        (d, n_heights, extent...), then float64 origin, spacing, heights, values.
        """
        n_heights = 0 if self.heights is None else len(self.heights)
        header = struct.pack(f"<{2 + self.d}q", self.d, n_heights, *self.extent)
        body = np.concatenate(
            [
                self.origin,
                [self.spacing],
                self.heights if self.heights is not None else np.empty(0),
                self.values.ravel(),
            ]
        ).astype("<f8")
        return GRID_MAGIC + header + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GridFunction":
        if data[:8] != GRID_MAGIC:
            raise ValueError("Not a GridFunction binary (bad magic).")
        (d, n_heights) = struct.unpack_from("<2q", data, 8)
        extent = struct.unpack_from(f"<{d}q", data, 24)
        body = np.frombuffer(data, dtype="<f8", offset=24 + 8 * d)
        origin = body[:d]
        spacing = float(body[d])
        heights = body[d + 1 : d + 1 + n_heights].copy() if n_heights else None
        shape = ((n_heights,) if n_heights else ()) + tuple(extent)
        values = body[d + 1 + n_heights :].reshape(shape).copy()
        return cls(origin.copy(), spacing, values, heights)


# ---------------------------------------------------------------------------
# Stable densities
# ---------------------------------------------------------------------------


def cauchy_density(d: int, s: float, r: float) -> float:
    """
    Closed-form alpha = 1 density: s c_d / (s^2 + r^2)^{(d+1)/2},
    c_d = Gamma((d+1)/2) / pi^{(d+1)/2}.
    """
    c_d = math.gamma((d + 1) / 2.0) / math.pi ** ((d + 1) / 2.0)
    return s * c_d / (s * s + r * r) ** ((d + 1) / 2.0)


def _density_at_origin(d: int, alpha: float) -> float:
    # p(1, 0) = 2 Gamma(d/alpha) / (alpha Gamma(d/2) (4 pi)^{d/2})
    return math.exp(
        math.log(2.0)
        + special.gammaln(d / alpha)
        - math.log(alpha)
        - special.gammaln(d / 2.0)
        - (d / 2.0) * math.log(4.0 * math.pi)
    )


def _series_sum(terms, atol: float, convergent: bool, max_terms: int = 600):
    """
    Sums terms given as (log_envelope, coefficient) until the envelope
    drops below atol / 100. Returns (value, error) or None.

    For asymptotic series the summation stops, unsuccessfully, as soon as
    the envelope starts to grow.
    """
    total = 0.0
    peak = 0.0
    previous = math.inf
    eps = np.finfo(float).eps
    for k in range(max_terms):
        log_env, coefficient = terms(k)
        if log_env > 700:
            return None
        envelope = math.exp(log_env)
        peak = max(peak, envelope)
        if k >= 2 and envelope < atol * 1e-2:
            error = envelope + 8 * eps * peak
            return (total, error) if error < atol else None
        if not convergent and k >= 2 and envelope > previous:
            return None
        total += coefficient * envelope
        previous = envelope
    return None


def _small_radius_series(d: int, alpha: float, r: float, atol: float):
    # p(1,r) = (1/(alpha pi^{d/2})) sum_m (-1)^m Gamma((2m+d)/alpha) / (m! Gamma(m+d/2)) (r/2)^{2m}
    log_half_r = math.log(r / 2.0)
    base = -math.log(alpha) - (d / 2.0) * math.log(math.pi)

    def terms(m):
        log_env = (
            base
            + special.gammaln((2 * m + d) / alpha)
            - special.gammaln(m + 1)
            - special.gammaln(m + d / 2.0)
            + 2 * m * log_half_r
        )
        return log_env, (-1.0) ** m

    return _series_sum(terms, atol, convergent=alpha > 1.0)


def _large_radius_series(d: int, alpha: float, r: float, atol: float):
    # p(1,r) = pi^{-d/2-1} sum_k (-1)^{k+1}/k! Gamma(k alpha/2 + 1) Gamma((k alpha + d)/2)
    #          sin(pi k alpha / 2) 2^{k alpha} r^{-k alpha - d}
    log_r = math.log(r)
    base = -(d / 2.0 + 1.0) * math.log(math.pi)

    def terms(j):
        k = j + 1
        log_env = (
            base
            + special.gammaln(k * alpha / 2.0 + 1.0)
            + special.gammaln((k * alpha + d) / 2.0)
            - special.gammaln(k + 1)
            + k * alpha * math.log(2.0)
            - (k * alpha + d) * log_r
        )
        return log_env, (-1.0) ** (k + 1) * math.sin(math.pi * k * alpha / 2.0)

    return _series_sum(terms, atol, convergent=alpha < 1.0)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)
_GL_NODES_LOW, _GL_WEIGHTS_LOW = np.polynomial.legendre.leggauss(12)


def _hankel_density(d: int, alpha: float, r: float, atol: float, max_panels: int = 400000):
    """
    p(1, r) = (2 pi)^{-d/2} r^{-nu} int_0^K exp(-k^alpha) k^{d/2} J_nu(k r) dk,
    nu = d/2 - 1, with K chosen so the truncated tail is below 1e-21.

    The first half-period goes to adaptive quadrature (algebraic behaviour
    at k = 0), the rest to 24-point Gauss-Legendre panels of width pi / r,
    checked against 12-point panels for the error estimate.
    """
    nu = d / 2.0 - 1.0
    k_max = 50.0 ** (1.0 / alpha)
    prefactor = (2.0 * math.pi) ** (-d / 2.0) * r ** (-nu)

    def integrand(k):
        return np.exp(-np.power(k, alpha)) * np.power(k, d / 2.0) * special.jv(nu, k * r)

    width = math.pi / r
    if k_max <= 8 * width:
        value, err = integrate.quad(
            integrand, 0.0, k_max, epsabs=atol * 1e-2 / prefactor, epsrel=1e-13, limit=500
        )
        return prefactor * value, prefactor * err

    head, head_err = integrate.quad(
        integrand, 0.0, width, epsabs=atol * 1e-3 / prefactor, epsrel=1e-13, limit=200
    )
    n_panels = int(math.ceil((k_max - width) / width))
    if n_panels > max_panels:
        raise ToleranceNotReached(
            f"Fourier inversion needs {n_panels} panels at scaled radius {r:.3g}", math.inf
        )
    edges = width + width * np.arange(n_panels + 1)
    edges[-1] = k_max
    lower, upper = edges[:-1], edges[1:]
    half = (upper - lower) / 2.0
    mid = (upper + lower) / 2.0
    body = np.sum(half * (integrand(mid[:, None] + half[:, None] * _GL_NODES) @ _GL_WEIGHTS))
    body_low = np.sum(
        half * (integrand(mid[:, None] + half[:, None] * _GL_NODES_LOW) @ _GL_WEIGHTS_LOW)
    )
    value = head + body
    error = head_err + abs(body - body_low)
    return prefactor * value, prefactor * error


def _unit_density(d: int, alpha: float, r: float, atol: float) -> Tuple[float, float]:
    if r < 1e-12:
        return _density_at_origin(d, alpha), 0.0
    if r < 1.0:
        result = _small_radius_series(d, alpha, r, atol)
        if result is not None:
            return result
    if r >= 0.5:
        result = _large_radius_series(d, alpha, r, atol)
        if result is not None:
            return result
    return _hankel_density(d, alpha, r, atol)


def stable_density(
    params: StableParams, s: float, r: float, atol: Optional[float] = None, with_error: bool = False
):
    """
    Transition density p(s, x, y) of the isotropic stable process at
    r = |x - y|.

    Reduced to s = 1 by scaling, p(s, r) = s^{-d/alpha} p(1, r s^{-1/alpha}),
    then evaluated by the convergent or optimally truncated power series
    around r = 0 or r = infinity when they reach the tolerance, and by
    Hankel-reduced Fourier inversion otherwise.

    Args:
        params (StableParams): Dimension and index.
        s (float): Time, s > 0.
        r (float): Radius, r >= 0.
        atol (float, optional): Absolute tolerance. Defaults to KERNEL_ATOL.
        with_error (bool): Also return the error estimate.

    Raises:
        ValueError: If s <= 0 or r < 0.
        ToleranceNotReached: If no route reaches the tolerance.
    """
    if not s > 0:
        raise ValueError(f"s={s} must be positive.")
    if r < 0:
        raise ValueError(f"r={r} must be nonnegative.")
    atol = atol or get_setting("KERNEL_ATOL")
    d, alpha = params.d, params.alpha
    scale = s ** (-d / alpha)
    value, error = _unit_density(d, alpha, r * s ** (-1.0 / alpha), atol / max(scale, 1e-300))
    value, error = scale * value, scale * error
    if error > atol:
        raise ToleranceNotReached(
            f"stable_density(d={d}, alpha={alpha}, s={s}, r={r})", error
        )
    value = max(value, 0.0)
    return (value, error) if with_error else value


def stable_density_profile(params: StableParams, s: float, radii: Sequence[float], atol=None) -> np.ndarray:
    return np.array([stable_density(params, s, float(r), atol) for r in np.ravel(radii)]).reshape(
        np.shape(radii)
    )


def stable_density_mixture(params: StableParams, s: float, r: float, atol: Optional[float] = None) -> float:
    """
    p(s, r) through the subordinator mixture

        int_0^inf (4 pi u)^{-d/2} exp(-r^2 / (4u)) g_{alpha/2}(s, u) du,

    integrated in log u. Independent of the series and Fourier routes.
    """
    if not s > 0:
        raise ValueError(f"s={s} must be positive.")
    atol = atol or get_setting("KERNEL_ATOL")
    d, beta = params.d, params.subordinator_index

    def integrand(v):
        u = math.exp(v)
        g = subordinator_density(beta, s, u, atol=get_setting("QUAD_ATOL") * 1e-2)
        if g == 0.0:
            return 0.0
        return (4.0 * math.pi * u) ** (-d / 2.0) * math.exp(-r * r / (4.0 * u)) * g * u

    centre = math.log(s) / beta
    left, _ = integrate.quad(integrand, -np.inf, centre, epsabs=atol * 1e-2, epsrel=1e-10, limit=400)
    right, _ = integrate.quad(integrand, centre, np.inf, epsabs=atol * 1e-2, epsrel=1e-10, limit=400)
    return left + right


def density_envelope_ratio(params: StableParams, s: float, r: float) -> float:
    """
    p(s, r) / min(s^{-d/alpha}, s r^{-d-alpha}).
    """
    d, alpha = params.d, params.alpha
    envelope = s ** (-d / alpha)
    if r > 0:
        envelope = min(envelope, s * r ** (-d - alpha))
    return stable_density(params, s, r) / envelope


def envelope_constants(
    params: StableParams, s_grid: Sequence[float], r_grid: Sequence[float]
) -> Tuple[float, float]:
    """
    Empirical (c1, c2) with c1 <= density_envelope_ratio <= c2 on the scan grid.
    """
    ratios = np.array([[density_envelope_ratio(params, s, r) for r in r_grid] for s in s_grid])
    return float(ratios.min()), float(ratios.max())


# ---------------------------------------------------------------------------
# Vertical exit law and the harmonic kernel
# ---------------------------------------------------------------------------


def exit_density_mu(t, s):
    """
    Density of T_0 from height t: (t / (2 sqrt(pi))) exp(-t^2 / (4s)) s^{-3/2}.

    Evaluated in log space; vectorised over t and s.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t <= 0) or np.any(s <= 0):
        raise ValueError("exit_density_mu needs t > 0 and s > 0.")
    log_mu = np.log(t) - math.log(2.0 * math.sqrt(math.pi)) - t * t / (4.0 * s) - 1.5 * np.log(s)
    value = np.exp(log_mu)
    return float(value) if value.ndim == 0 else value


def exit_cdf_mu(t: float, S: float) -> float:
    """
    int_0^S mu_t(ds) = erfc(t / (2 sqrt(S))).
    """
    if S <= 0:
        return 0.0
    return float(special.erfc(t / (2.0 * math.sqrt(S))))


def _log_mu_integrand(t):
    return lambda v: exit_density_mu(t, math.exp(v)) * math.exp(v)


def exit_cdf_mu_quadrature(t: float, S: float, atol: Optional[float] = None) -> float:
    """
    Quadrature of mu_t over (0, S] in log s; oracle for exit_cdf_mu.
    """
    if S <= 0:
        return 0.0
    atol = atol or get_setting("QUAD_ATOL")
    value, _ = integrate.quad(
        _log_mu_integrand(t), -np.inf, math.log(S), epsabs=atol * 1e-3, epsrel=1e-12, limit=400
    )
    return value


def exit_mass_mu(t: float) -> float:
    """
    Total mass of mu_t by quadrature (1 up to quadrature error).
    """
    pivot = math.log(t * t / 6.0)
    integrand = _log_mu_integrand(t)
    left, _ = integrate.quad(integrand, -np.inf, pivot, epsabs=1e-14, epsrel=1e-13, limit=400)
    right, _ = integrate.quad(integrand, pivot, np.inf, epsabs=1e-14, epsrel=1e-13, limit=400)
    return left + right


def harmonic_kernel(
    params: StableParams, t: float, r: float, method: str = "mixture", atol: Optional[float] = None
) -> float:
    """
    The harmonic-extension kernel q_t(x) = int_0^inf p(s, x, 0) mu_t(ds) at |x| = r.

    Args:
        method (str): "mixture" integrates p(s, r) against mu_t(ds) in log s.
            "stable" uses the identity q_t = density of the alpha/2 stable law
            at time t (its Fourier transform is exp(-t |xi|^{alpha/2})).

    Raises:
        ValueError: If t <= 0 or the method is unknown.
        ToleranceNotReached: Propagated from stable_density.
    """
    if not t > 0:
        raise ValueError(f"t={t} must be positive.")
    atol = atol or get_setting("KERNEL_ATOL")
    if method == "stable":
        return stable_density(StableParams(params.d, params.alpha / 2.0), t, r, atol)
    if method != "mixture":
        raise ValueError(f"Unknown harmonic kernel method '{method}'. Your choices are ['mixture', 'stable']")

    def integrand(v):
        s = math.exp(v)
        return stable_density(params, s, r, atol * 1e-2) * exit_density_mu(t, s) * s

    pivot = math.log(t * t / 6.0)
    left, _ = integrate.quad(integrand, -np.inf, pivot, epsabs=atol * 1e-2, epsrel=1e-9, limit=300)
    right, _ = integrate.quad(integrand, pivot, np.inf, epsabs=atol * 1e-2, epsrel=1e-9, limit=300)
    return left + right


def harmonic_kernel_profile(params: StableParams, t: float, radii: Sequence[float]) -> np.ndarray:
    """
    q_t at many radii through the alpha/2 stable route.
    """
    return stable_density_profile(StableParams(params.d, params.alpha / 2.0), t, radii)


# ---------------------------------------------------------------------------
# Kernel tables
# ---------------------------------------------------------------------------


@dataclass
class KernelTable:
    """
    Tabulated p(s, r) with bilinear interpolation in (log s, r).

    Attributes:
        params (StableParams): Law of the table.
        s_grid (np.ndarray): Ascending positive times.
        r_grid (np.ndarray): Ascending nonnegative radii.
        values (np.ndarray): p(s, r), shape (len(s_grid), len(r_grid)).
        accuracy (float): Quadrature plus interpolation error bound.
        _table_list (dict): Class-level cache keyed by (d, alpha, s_grid, r_grid).
    """

    params: StableParams
    s_grid: np.ndarray
    r_grid: np.ndarray
    values: np.ndarray
    accuracy: float
    _table_list: ClassVar[Dict[tuple, "KernelTable"]] = {}

    def __post_init__(self):
        self.s_grid = np.asarray(self.s_grid, dtype=float)
        self.r_grid = np.asarray(self.r_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.s_grid), len(self.r_grid)):
            raise ValueError("values must have shape (len(s_grid), len(r_grid)).")
        if np.any(self.s_grid <= 0) or np.any(np.diff(self.s_grid) <= 0):
            raise ValueError("s_grid must be positive and ascending.")
        if np.any(self.r_grid < 0) or np.any(np.diff(self.r_grid) <= 0):
            raise ValueError("r_grid must be nonnegative and ascending.")

    @classmethod
    def build(cls, params: StableParams, s_grid: Sequence[float], r_grid: Sequence[float]) -> "KernelTable":
        """
        Builds (or returns the cached) table for the given grids.
        """
        key = (params.d, params.alpha, tuple(np.round(s_grid, 15)), tuple(np.round(r_grid, 15)))
        if key in cls._table_list:
            return cls._table_list[key]

        s_grid = np.asarray(s_grid, dtype=float)
        r_grid = np.asarray(r_grid, dtype=float)
        values = np.zeros((len(s_grid), len(r_grid)))
        quad_error = 0.0
        for i, s in enumerate(s_grid):
            for j, r in enumerate(r_grid):
                values[i, j], err = stable_density(params, s, r, with_error=True)
                quad_error = max(quad_error, err)

        table = cls(params, s_grid, r_grid, values, quad_error)
        table.accuracy = quad_error + table._interpolation_error()
        cls._table_list[key] = table
        info(f"Kernel table built: d={params.d} alpha={params.alpha} ({len(s_grid)}x{len(r_grid)})")
        return table

    def _interpolation_error(self) -> float:
        if len(self.s_grid) < 2 or len(self.r_grid) < 2:
            return 0.0
        rows = np.linspace(0, len(self.s_grid) - 2, min(4, len(self.s_grid) - 1)).astype(int)
        cols = np.linspace(0, len(self.r_grid) - 2, min(4, len(self.r_grid) - 1)).astype(int)
        worst = 0.0
        for i in rows:
            s_mid = math.sqrt(self.s_grid[i] * self.s_grid[i + 1])
            for j in cols:
                r_mid = 0.5 * (self.r_grid[j] + self.r_grid[j + 1])
                exact = stable_density(self.params, s_mid, r_mid)
                worst = max(worst, abs(float(self.interpolate(s_mid, r_mid)) - exact))
        return worst

    def interpolate(self, s, r):
        interpolator = interpolate.RegularGridInterpolator(
            (np.log(self.s_grid), self.r_grid), self.values, method="linear"
        )
        s, r = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(r, dtype=float))
        return interpolator(np.stack([np.log(s), r], axis=-1))

    def radial_mass(self) -> np.ndarray:
        """
        omega_d int_0^R p(s, r) r^{d-1} dr per s, plus the Levy tail beyond R.
        """
        d, alpha = self.params.d, self.params.alpha
        omega = sphere_area(d)
        body = omega * integrate.trapezoid(self.values * self.r_grid ** (d - 1), self.r_grid, axis=1)
        tail = levy_constant(self.params) * omega * self.s_grid * self.r_grid[-1] ** (-alpha) / alpha
        return body + tail

    def to_csv(self) -> str:
        buffer = io.StringIO()
        buffer.write(f"# d={self.params.d}\n")
        buffer.write(f"# alpha={format(self.params.alpha, '.17g')}\n")
        buffer.write(f"# accuracy={format(self.accuracy, '.17g')}\n")
        buffer.write("# s_grid=" + ",".join(format(v, ".17g") for v in self.s_grid) + "\n")
        buffer.write("# r_grid=" + ",".join(format(v, ".17g") for v in self.r_grid) + "\n")
        writer = csv.writer(buffer, lineterminator="\n")
        for row in self.values:
            writer.writerow([format(v, ".17g") for v in row])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "KernelTable":
        header = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                header[key] = value
            elif line:
                rows.append([float(v) for v in line.split(",")])
        params = StableParams(int(header["d"]), float(header["alpha"]))
        s_grid = [float(v) for v in header["s_grid"].split(",")]
        r_grid = [float(v) for v in header["r_grid"].split(",")]
        return cls(params, s_grid, r_grid, np.array(rows), float(header["accuracy"]))

    def to_bytes(self) -> bytes:
        header = struct.pack("<3q", self.params.d, len(self.s_grid), len(self.r_grid))
        body = np.concatenate(
            [[self.params.alpha, self.accuracy], self.s_grid, self.r_grid, self.values.ravel()]
        ).astype("<f8")
        return TABLE_MAGIC + header + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "KernelTable":
        if data[:8] != TABLE_MAGIC:
            raise ValueError("Not a KernelTable binary (bad magic).")
        d, ns, nr = struct.unpack_from("<3q", data, 8)
        body = np.frombuffer(data, dtype="<f8", offset=32)
        alpha, accuracy = float(body[0]), float(body[1])
        s_grid = body[2 : 2 + ns]
        r_grid = body[2 + ns : 2 + ns + nr]
        values = body[2 + ns + nr :].reshape(ns, nr)
        return cls(StableParams(d, alpha), s_grid.copy(), r_grid.copy(), values.copy(), accuracy)


# ---------------------------------------------------------------------------
# Spectral grid operators
# ---------------------------------------------------------------------------


def _frequency_norm(shape: Sequence[int], spacing: float) -> np.ndarray:
    """|xi| on the FFT frequency lattice of the given shape."""
    freqs = [2.0 * math.pi * sfft.fftfreq(n, d=spacing) for n in shape]
    mesh = np.meshgrid(*freqs, indexing="ij")
    return np.sqrt(sum(m * m for m in mesh))


def wrap_bound(tail: StableParams, time: float, l1_norm: float, margin: float) -> float:
    """
    Bound on what periodic images of a kernel with tail c t |z|^{-d-alpha}
    add to any window point when the data sit `margin` away from the
    neighbouring image.
    """
    if margin <= 0:
        return math.inf
    return 2 * tail.d * l1_norm * levy_constant(tail) * time * margin ** (-tail.d - tail.alpha)


def padding_cells(
    tail: StableParams, time: float, l1_norm: float, spacing: float, tol: Optional[float] = None
) -> int:
    """
    Padding (cells per side) so that wrap_bound falls below tol.

    Raises:
        InsufficientPadding: If the padding exceeds MAX_PAD_CELLS.
    """
    tol = tol or get_setting("PAD_TOL")
    max_cells = get_setting("MAX_PAD_CELLS")
    if l1_norm == 0.0 or time == 0.0:
        return 0
    margin = (2 * tail.d * l1_norm * levy_constant(tail) * time / tol) ** (1.0 / (tail.d + tail.alpha))
    cells = int(math.ceil(margin / spacing))
    if cells > max_cells:
        raise InsufficientPadding(
            f"padding of {cells} cells exceeds MAX_PAD_CELLS={max_cells}",
            wrap_bound(tail, time, l1_norm, max_cells * spacing),
        )
    return cells


def _resolve_pad(pad: PadSpec, tail: StableParams, time: float, grid: GridFunction, tol=None) -> int:
    if pad == "auto":
        l1 = float(np.max(np.sum(np.abs(grid.values), axis=grid.lattice_axes))) * grid.cell_volume
        return padding_cells(tail, time, l1, grid.spacing, tol)
    pad = int(pad)
    if pad < 0:
        raise ValueError("pad must be nonnegative.")
    return pad


def _check_total_cells(shape: Sequence[int]):
    total = int(np.prod(shape))
    if total > 2**26:
        raise InsufficientPadding(f"padded lattice of {total} cells is too large", math.inf)


def extend_grid(
    f: GridFunction, params: StableParams, t: float, pad: PadSpec = "auto", crop: bool = True
) -> GridFunction:
    """
    Harmonic extension Q_t f = f * q_t on the lattice.

    The data are zero-padded and convolved on the padded torus with the
    exact symbol exp(-t |xi|^{alpha/2}). pad="auto" chooses the padding from
    the kernel tail so the wrapped contribution stays below PAD_TOL; pad=0
    treats the window itself as a torus (periodic data).

    Args:
        f (GridFunction): Bounded boundary data (no height slices).
        params (StableParams): Law of the horizontal process.
        t (float): Height, t > 0.
        pad ("auto" or int): Padding cells per side.
        crop (bool): Return the original window (True) or the padded lattice.

    Raises:
        InsufficientPadding: Naming the escaped kernel mass.
    """
    return extension_stack(f, params, [t], pad=pad, crop=crop).slice_at(0)


def extension_stack(
    f: GridFunction, params: StableParams, heights: Sequence[float], pad: PadSpec = "auto", crop: bool = True
) -> GridFunction:
    """
    Q_t f for every t in heights, stacked as a GridFunction with heights.
    """
    if f.heights is not None:
        raise ValueError("extension expects boundary data without height slices.")
    heights = np.asarray(heights, dtype=float)
    if np.any(heights <= 0):
        raise ValueError("extension heights must be positive.")
    kernel = StableParams(params.d, params.alpha / 2.0)
    cells = _resolve_pad(pad, kernel, float(heights.max()), f)
    padded = np.pad(f.values, cells, mode="constant")
    _check_total_cells(padded.shape)
    spectrum = sfft.fftn(padded)
    symbol_base = _frequency_norm(padded.shape, f.spacing) ** (params.alpha / 2.0)
    slices = np.empty((len(heights),) + padded.shape)
    for k, t in enumerate(heights):
        slices[k] = sfft.ifftn(spectrum * np.exp(-t * symbol_base)).real
    origin = f.origin - cells * f.spacing
    stacked = GridFunction(origin, f.spacing, slices, heights)
    if crop and cells:
        return stacked.crop((cells,) * f.d, f.extent)
    return stacked


def evaluate_extension(
    f: GridFunction, params: StableParams, xs: np.ndarray, ts: Sequence[float], pad: PadSpec = "auto",
    batch: int = 64,
) -> np.ndarray:
    """
    Q_t f(x) at arbitrary points by summing the trigonometric interpolant of
    the padded data with the exact symbol. Exact harmonic values off the
    lattice, used where test boxes are finer than the grid.

    Args:
        xs (np.ndarray): Points, shape (m, d).
        ts (Sequence[float]): Heights, shape (m,), all > 0.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ts = np.asarray(ts, dtype=float).ravel()
    if xs.shape != (len(ts), f.d):
        raise ValueError("xs must have shape (len(ts), d).")
    if np.any(ts <= 0):
        raise ValueError("extension heights must be positive.")
    kernel = StableParams(params.d, params.alpha / 2.0)
    cells = _resolve_pad(pad, kernel, float(ts.max()), f)
    padded = np.pad(f.values, cells, mode="constant")
    _check_total_cells(padded.shape)
    origin = f.origin - cells * f.spacing
    spectrum = sfft.fftn(padded) / padded.size
    freqs = [2.0 * math.pi * sfft.fftfreq(n, d=f.spacing) for n in padded.shape]
    mesh = np.meshgrid(*freqs, indexing="ij")
    xi = np.stack([m.ravel() for m in mesh], axis=1)
    radial = np.sqrt(np.sum(xi * xi, axis=1)) ** (params.alpha / 2.0)
    coefficients = spectrum.ravel()
    scale = np.abs(coefficients).max()
    if scale == 0.0:
        return np.zeros(len(ts))
    keep = np.abs(coefficients) * np.exp(-ts.min() * radial) > 1e-18 * scale
    xi, radial, coefficients = xi[keep], radial[keep], coefficients[keep]
    # at most 2**22 phase entries per batch
    batch = max(1, min(batch, 2**22 // len(radial)))

    # the real part splits even-lattice Nyquist modes symmetrically
    out = np.empty(len(ts), dtype=complex)
    for start in range(0, len(ts), batch):
        stop = min(start + batch, len(ts))
        shifted = xs[start:stop] - origin
        phase = np.exp(1j * shifted @ xi.T)
        damping = np.exp(-np.outer(ts[start:stop], radial))
        out[start:stop] = (phase * damping) @ coefficients
    return out.real


# q_t on equispaced radii, keyed by (d, alpha, t, step)
_profile_cache: Dict[tuple, np.ndarray] = {}


def _radial_profile(params: StableParams, t: float, step: float, count: int) -> np.ndarray:
    key = (params.d, params.alpha, t, step)
    cached = _profile_cache.get(key)
    if cached is None or len(cached) < count:
        cached = harmonic_kernel_profile(params, t, step * np.arange(count))
        _profile_cache[key] = cached
    return cached[:count]


def lattice_extension(
    f: GridFunction, params: StableParams, xs: np.ndarray, ts: Sequence[float], oversample: int = 4
) -> np.ndarray:
    """
    Q_t f(x) at arbitrary points as the lattice sum

        h^d sum_j f(y_j) q_t(x - y_j)

    of the data extended by zero outside the window. No periodic images are
    involved, so heavy kernel tails need no padding; this is the route for
    high boxes, where the padded torus would exceed MAX_PAD_CELLS.

    q_t is tabulated once per distinct height on radii spaced
    spacing / oversample and interpolated with a cubic spline.

    Args:
        xs (np.ndarray): Points, shape (m, d).
        ts (Sequence[float]): Heights, shape (m,), all > 0.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ts = np.asarray(ts, dtype=float).ravel()
    if xs.shape != (len(ts), f.d):
        raise ValueError("xs must have shape (len(ts), d).")
    if np.any(ts <= 0):
        raise ValueError("extension heights must be positive.")
    weights = f.values.ravel() * f.cell_volume
    support = weights != 0.0
    lattice, weights = f.points()[support], weights[support]
    out = np.zeros(len(ts))
    if not weights.size:
        return out
    step = f.spacing / oversample
    for t in np.unique(ts):
        rows = np.flatnonzero(ts == t)
        dist = spatial.distance.cdist(xs[rows], lattice)
        count = int(math.ceil(dist.max() / step)) + 4
        profile = _radial_profile(params, float(t), step, count)
        spline = interpolate.CubicSpline(step * np.arange(count), profile)
        out[rows] = spline(dist) @ weights
    return out


class ProductSemigroup:
    """
    The product semigroup P_s (x) vertical heat semigroup on a lattice over
    R^d x heights, diagonalised once so that any s, or any weighted
    combination of s values, costs one inverse transform.

    Horizontal axes use the FFT with symbol exp(-s |xi|^alpha) on the padded
    torus. The vertical axis is zero-padded beyond the window by six standard
    deviations of the vertical motion at the horizon, on every open side.
    When killed it uses a sine series on heights 0 = t_0 < ... < t_N,
    absorbing at 0 only (the wall above the padding is out of reach);
    otherwise an FFT on the padded torus with symbol exp(-s omega^2).

    Attributes:
        grid (GridFunction): The input data with uniform heights.
        killed (bool): Absorb the vertical motion at height 0.
    """

    def __init__(
        self,
        grid: GridFunction,
        params: StableParams,
        killed: bool = True,
        horizon: float = 1.0,
        tail_time: Optional[float] = None,
        pad: PadSpec = "auto",
    ):
        if grid.heights is None or len(grid.heights) < 3:
            raise ValueError("the product semigroup needs at least three height slices.")
        steps = np.diff(grid.heights)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("the product semigroup needs uniformly spaced heights.")
        if killed and abs(grid.heights[0]) > 1e-12:
            raise ValueError("the killed product semigroup needs heights starting at 0.")
        self.grid = grid
        self.params = params
        self.killed = killed
        self.ht = float(steps[0])
        tail_time = horizon if tail_time is None else tail_time
        self.x_pad = _resolve_pad(pad, params, tail_time, grid)
        # zero rows beyond the window on each open side; six standard deviations at the horizon
        self.t_pad = int(math.ceil(6.0 * math.sqrt(2.0 * horizon) / self.ht))
        self.t_below = 0 if killed else self.t_pad

        data = grid.values
        x_width = [(0, 0)] + [(self.x_pad, self.x_pad)] * grid.d
        data = np.pad(data, x_width, mode="constant")
        if killed:
            data = data[1:]
        data = np.pad(data, [(self.t_below, self.t_pad)] + [(0, 0)] * grid.d, mode="constant")
        _check_total_cells(data.shape)
        self._shape = data.shape

        spectrum = sfft.fftn(data, axes=tuple(range(1, grid.d + 1)))
        horizontal = _frequency_norm(data.shape[1:], grid.spacing) ** params.alpha
        rows = data.shape[0]
        if killed:
            spectrum = sfft.dst(spectrum, type=1, axis=0, norm="ortho")
            omega = np.arange(1, rows + 1) * math.pi / ((rows + 1) * self.ht)
        else:
            spectrum = sfft.fft(spectrum, axis=0)
            omega = 2.0 * math.pi * sfft.fftfreq(rows, d=self.ht)
        self._spectrum = spectrum
        self.rates = horizontal[None, ...] + (omega ** 2).reshape((rows,) + (1,) * grid.d)

    def _invert(self, spectrum: np.ndarray) -> np.ndarray:
        axes = tuple(range(1, self.grid.d + 1))
        if self.killed:
            spectrum = sfft.idst(spectrum, type=1, axis=0, norm="ortho")
        else:
            spectrum = sfft.ifft(spectrum, axis=0)
        data = sfft.ifftn(spectrum, axes=axes).real
        if self.killed:
            data = np.concatenate([np.zeros((1,) + data.shape[1:]), data], axis=0)
        return data

    def _as_grid(self, data: np.ndarray, crop: bool) -> GridFunction:
        grid = self.grid
        heights = grid.heights
        lower = heights[0] - self.ht * np.arange(self.t_below, 0, -1)
        upper = heights[-1] + self.ht * np.arange(1, self.t_pad + 1)
        heights = np.concatenate([lower, heights, upper])
        origin = grid.origin - self.x_pad * grid.spacing
        result = GridFunction(origin, grid.spacing, data, heights)
        if not crop:
            return result
        rows = slice(self.t_below, self.t_below + len(grid.heights))
        result = GridFunction(result.origin, result.spacing, data[rows], grid.heights)
        if self.x_pad:
            result = result.crop((self.x_pad,) * grid.d, grid.extent)
        return result

    def apply(self, s: float, crop: bool = True) -> GridFunction:
        if s < 0:
            raise ValueError("s must be nonnegative.")
        return self._as_grid(self._invert(self._spectrum * np.exp(-s * self.rates)), crop)

    def integrate(self, nodes: np.ndarray, weights: np.ndarray, discount: float, crop: bool = True) -> GridFunction:
        """
        sum_i weights_i exp(-discount s_i) P_{s_i} f for nodes s_i, in one
        inverse transform.
        """
        multiplier = np.zeros(self.rates.shape)
        for s, w in zip(nodes, weights):
            multiplier += w * np.exp(-(discount + self.rates) * s)
        return self._as_grid(self._invert(self._spectrum * multiplier), crop)


def apply_heat_semigroup_product(
    f2: GridFunction, params: StableParams, s: float, killed: bool = True, pad: PadSpec = "auto", crop: bool = True
) -> GridFunction:
    """
    Applies the product transition operator at time s to data over
    R^d x heights: stable convolution in x, variance-2s Gaussian in t, with
    absorption at t = 0 when killed.

    Raises:
        InsufficientPadding: As for extend_grid.
    """
    if not s > 0:
        raise ValueError(f"s={s} must be positive.")
    semigroup = ProductSemigroup(f2, params, killed=killed, horizon=s, pad=pad)
    return semigroup.apply(s, crop=crop)


def killed_heat_kernel(a: float, b: float, s: float) -> float:
    """
    Image-charge density of variance-2s Brownian motion absorbed at 0.
    """
    scale = 1.0 / math.sqrt(4.0 * math.pi * s)
    return scale * (math.exp(-(a - b) ** 2 / (4.0 * s)) - math.exp(-(a + b) ** 2 / (4.0 * s)))
