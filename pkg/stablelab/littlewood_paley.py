"""
Carré du champ, Littlewood-Paley G-functions, the maximal function and
L^p ratio experiments on lattices.

Nonlocal difference integrals int [g(x+h) - g(x)]^2 |h|^{-d-alpha} dh are
evaluated as

    (w * g^2) - 2 g (w * g) + W g^2 + inner |grad g|^2 / d (+ tail terms)

with w the lattice cell weights (W their sum), the central cell handled by
the quadratic Taylor model. Windows are either zero-extended (data must
decay at the edge) or treated as a torus, on which the weights are
periodised over image cells.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import fft as sfft
from scipy import integrate, signal

from .conf import get_setting, info
from .exceptions import PositivityViolation, WindowTruncationError
from .kernels import GridFunction, _frequency_norm, extension_stack
from .stable_core import StableParams, levy_constant, sphere_area

logger = logging.getLogger(__name__)

DEFAULT_P_LIST = (1.25, 1.5, 1.75, 2.0, 3.0)


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass
class SquareFunctionField:
    """
    Attributes:
        gamma_part (GridFunction): Gamma_x(f_t, f_t) over (t-grid, x).
        vertical_part (GridFunction): (d f / d t)^2 over (t-grid, x).
    """

    gamma_part: GridFunction
    vertical_part: GridFunction
    levy_constant: float


@dataclass
class GFunctionResult:
    """
    Attributes:
        values (GridFunction): G(x) on the lattice.
        kind (str): vertical, horizontal-full, horizontal-truncated or general.
        p_norms (dict): p -> ||G||_p.
        tail_estimate (float): Bound on the t-integral outside the t-grid.
    """

    values: GridFunction
    kind: str
    p_norms: Dict[float, float] = field(default_factory=dict)
    tail_estimate: float = 0.0

    def p_norm(self, p: float) -> float:
        if p not in self.p_norms:
            self.p_norms[p] = lp_norm(self.values, p)
        return self.p_norms[p]


# ---------------------------------------------------------------------------
# Lattice weights
# ---------------------------------------------------------------------------


def _inner_factor(d: int, alpha: float, spacing: float, radius: float = math.inf) -> float:
    """
    int |u|^{2-d-alpha} du over the central cell, or over the ball of the
    given radius when that lies inside the cell.
    """
    if radius <= spacing / 2.0:
        return sphere_area(d) * radius ** (2.0 - alpha) / (2.0 - alpha)
    if d == 1:
        return 2.0 * (spacing / 2.0) ** (2.0 - alpha) / (2.0 - alpha)
    s = 32
    sub = (np.arange(s) + 0.5) / s - 0.5
    mesh = np.meshgrid(*([sub] * d), indexing="ij")
    norm = np.sqrt(sum(m * m for m in mesh))
    return float(spacing ** (2.0 - alpha) * np.sum(norm ** (2.0 - d - alpha)) / s ** d)


def _cell_weights(offsets: Sequence[np.ndarray], alpha: float, spacing: float) -> np.ndarray:
    """
    Weights of the lattice cells centred at k h (k the integer offsets):
    int_cell |u|^2 |u|^{-d-alpha} du / |k h|^2, so that a difference growing
    linearly across the cell is integrated exactly. Zero at k = 0.
    """
    d = len(offsets)
    k2 = sum(np.asarray(o, dtype=float) ** 2 for o in offsets)
    weights = np.zeros(k2.shape)
    nonzero = k2 > 0
    if d == 1:
        k = np.abs(np.asarray(offsets[0], dtype=float)[nonzero])
        weights[nonzero] = spacing ** (-alpha) * (
            (k + 0.5) ** (2.0 - alpha) - (k - 0.5) ** (2.0 - alpha)
        ) / ((2.0 - alpha) * k * k)
        return weights
    weights[nonzero] = spacing ** (-alpha) * k2[nonzero] ** (-(d + alpha) / 2.0)
    near = nonzero & (np.max(np.abs(np.stack(offsets)), axis=0) <= 2)
    s = 6
    sub = (np.arange(s) + 0.5) / s - 0.5
    sub_mesh = [m.ravel() for m in np.meshgrid(*([sub] * d), indexing="ij")]
    for index in zip(*np.nonzero(near)):
        centre = [float(o[index]) for o in offsets]
        v2 = sum((c + m) ** 2 for c, m in zip(centre, sub_mesh))
        weights[index] = spacing ** (-alpha) * np.sum(v2 ** ((2.0 - d - alpha) / 2.0)) / (s ** d * k2[index])
    return weights


@dataclass
class DifferenceWeights:
    """
    Cell weights for one lattice and integration radius.

    Attributes:
        weights (np.ndarray): Offset weights (centred array, or FFT order on a torus).
        total (float): Sum of the weights.
        inner (float): Central-cell Taylor factor.
        tail (float): Mass of |h|^{-d-alpha} beyond the offsets covered, inside the radius.
        periodic (bool): Torus weights (FFT order) or zero-extension weights.
    """

    weights: np.ndarray
    total: float
    inner: float
    tail: float
    periodic: bool

    @classmethod
    def build(
        cls, shape: Sequence[int], spacing: float, alpha: float, periodic: bool, radius: float = math.inf
    ) -> "DifferenceWeights":
        d = len(shape)
        inner = _inner_factor(d, alpha, spacing, radius)
        if radius <= spacing / 2.0:
            return cls(np.zeros((1,) * d), 0.0, inner, 0.0, periodic)

        if periodic:
            base = [((np.arange(n) + n // 2) % n) - n // 2 for n in shape]
            images = 64 if d == 1 else 2
            weights = np.zeros(tuple(shape))
            mesh = np.meshgrid(*base, indexing="ij")
            for shift in np.ndindex(*((2 * images + 1,) * d)):
                offsets = [m + (s - images) * n for m, s, n in zip(mesh, shift, shape)]
                cell = _cell_weights(offsets, alpha, spacing)
                centre = spacing * np.sqrt(sum(o.astype(float) ** 2 for o in offsets))
                weights += np.where(centre < radius, cell, 0.0)
            covered = (images + 0.5) * min(shape) * spacing
        else:
            axes = [np.arange(-(n - 1), n) for n in shape]
            offsets = np.meshgrid(*axes, indexing="ij")
            weights = _cell_weights(offsets, alpha, spacing)
            centre = spacing * np.sqrt(sum(o.astype(float) ** 2 for o in offsets))
            weights = np.where(centre < radius, weights, 0.0)
            covered = (min(shape) - 0.5) * spacing

        tail = 0.0
        if radius > covered:
            outer = 0.0 if math.isinf(radius) else radius ** (-alpha)
            tail = sphere_area(d) * (covered ** (-alpha) - outer) / alpha
        return cls(weights, float(weights.sum()), inner, tail, periodic)

    def correlate(self, values: np.ndarray) -> np.ndarray:
        """sum_k w_k g(x + k h), zero outside the window or periodic on the torus."""
        if self.weights.size == 1:
            return np.zeros_like(values)
        if self.periodic:
            return sfft.ifftn(sfft.fftn(values) * sfft.fftn(self.weights)).real
        return signal.fftconvolve(values, self.weights, mode="same")


def _gradient_norm_sq(values: np.ndarray, spacing: float, periodic: bool) -> np.ndarray:
    total = np.zeros_like(values)
    for axis in range(values.ndim):
        if periodic:
            derivative = (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * spacing)
        else:
            derivative = np.gradient(values, spacing, axis=axis)
        total += derivative * derivative
    return total


def difference_energy(values: np.ndarray, spacing: float, weights: DifferenceWeights) -> np.ndarray:
    """
    int [g(x+h) - g(x)]^2 |h|^{-d-alpha} dh (over the weights' radius) at
    every lattice point, without the Levy constant.
    """
    d = values.ndim
    energy = (
        weights.correlate(values * values)
        - 2.0 * values * weights.correlate(values)
        + weights.total * values * values
        + weights.inner * _gradient_norm_sq(values, spacing, weights.periodic) / d
    )
    if weights.tail:
        if weights.periodic:
            mean, mean_sq = values.mean(), (values * values).mean()
            energy += weights.tail * (mean_sq - 2.0 * values * mean + values * values)
        else:
            energy += weights.tail * values * values
    return np.maximum(energy, 0.0)


# ---------------------------------------------------------------------------
# Carré du champ
# ---------------------------------------------------------------------------


def carre_du_champ(
    f_t: GridFunction, params: StableParams, periodic: bool = False, window_tol: Optional[float] = None
) -> GridFunction:
    """
    Gamma_x(f_t, f_t) = (c / 2) int [f_t(x+h) - f_t(x)]^2 |h|^{-d-alpha} dh on the lattice,
    which is (L(f^2) - 2 f L f) / 2.

    Args:
        periodic (bool): Treat the window as a torus. Otherwise the data
            are extended by zero and must decay at the window edge.
        window_tol (float, optional): Defaults to WINDOW_TOL.

    Raises:
        WindowTruncationError: If the zero extension adds an edge
            contribution above window_tol.
    """
    if f_t.heights is not None:
        raise ValueError("carre_du_champ expects a single slice.")
    window_tol = window_tol or get_setting("WINDOW_TOL")
    c = levy_constant(params)
    weights = DifferenceWeights.build(f_t.extent, f_t.spacing, params.alpha, periodic)
    if not periodic:
        edge = _edge_sup(f_t.values)
        contribution = 0.5 * c * edge * edge * (weights.total + weights.tail)
        if contribution > window_tol:
            raise WindowTruncationError("data do not decay at the window edge", contribution)
    return f_t.with_values(0.5 * c * difference_energy(f_t.values, f_t.spacing, weights))


def carre_du_champ_spectral(f_t: GridFunction, params: StableParams) -> GridFunction:
    """
    (L(f^2) - 2 f L f) / 2 on the torus, with L the Fourier multiplier -|xi|^alpha.
    Equals carre_du_champ(..., periodic=True) for data resolved by the lattice.
    """
    norm = _frequency_norm(f_t.extent, f_t.spacing) ** params.alpha

    def generator(values):
        return sfft.ifftn(-norm * sfft.fftn(values)).real

    values = f_t.values
    return f_t.with_values(0.5 * generator(values * values) - values * generator(values))


def _edge_sup(values: np.ndarray) -> float:
    edge = 0.0
    for axis in range(values.ndim):
        edge = max(edge, float(np.abs(np.take(values, 0, axis=axis)).max()))
        edge = max(edge, float(np.abs(np.take(values, -1, axis=axis)).max()))
    return edge


# ---------------------------------------------------------------------------
# G-functions
# ---------------------------------------------------------------------------


def default_t_grid() -> np.ndarray:
    t_min, t_max, count = get_setting("T_GRID")
    return np.geomspace(t_min, t_max, int(count))


def _torus_pad(f: GridFunction, pad: Optional[int]) -> int:
    # default: the window sits in a torus three times its size
    return max(f.extent) if pad is None else int(pad)


def _torus_data(f: GridFunction, pad: int) -> GridFunction:
    values = np.pad(f.values, pad, mode="constant")
    return GridFunction(f.origin - pad * f.spacing, f.spacing, values)


def _t_integral(t_grid: np.ndarray, integrand: np.ndarray) -> np.ndarray:
    """int t * integrand dt as a trapezoid rule in log t."""
    weight = (t_grid * t_grid).reshape((-1,) + (1,) * (integrand.ndim - 1))
    return integrate.trapezoid(weight * integrand, np.log(t_grid), axis=0)


def _vertical_square(stack: GridFunction) -> np.ndarray:
    derivative = np.gradient(stack.values, stack.heights, axis=0)
    return derivative * derivative


def _tail_estimate(t_grid: np.ndarray, integrand: np.ndarray) -> float:
    # t-integral below t_min (integrand ~ constant) and above t_max (last
    # slice times log-width of one more decade)
    head = 0.5 * t_grid[0] ** 2 * float(np.abs(integrand[0]).max())
    tail = t_grid[-1] ** 2 * float(np.abs(integrand[-1]).max()) * math.log(10.0)
    return head + tail


def vertical_g(
    f: GridFunction, params: StableParams, t_grid: Optional[Sequence[float]] = None, pad: Optional[int] = None
) -> GFunctionResult:
    """
    G_up(x) = [int_0^inf t (d f_t / d t)^2 dt]^{1/2}, with f_t = Q_t f.

    The window sits in a zero-padded torus (pad cells per side); G and its
    norms live on that torus. d/dt is taken by centred differences across the
    t-slices.
    """
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    torus = _torus_data(f, _torus_pad(f, pad))
    stack = extension_stack(torus, params, t_grid, pad=0)
    integrand = _vertical_square(stack)
    values = np.sqrt(_t_integral(t_grid, integrand))
    return GFunctionResult(torus.with_values(values), "vertical", tail_estimate=_tail_estimate(t_grid, integrand))


def _horizontal_integrand(stack: GridFunction, alpha: float, truncated: bool) -> np.ndarray:
    integrand = np.empty_like(stack.values)
    full = None
    if not truncated:
        full = DifferenceWeights.build(stack.extent, stack.spacing, alpha, periodic=True)
    for k, t in enumerate(stack.heights):
        weights = full
        if truncated:
            weights = DifferenceWeights.build(
                stack.extent, stack.spacing, alpha, periodic=True, radius=t ** (2.0 / alpha)
            )
        integrand[k] = difference_energy(stack.values[k], stack.spacing, weights)
    return integrand


def horizontal_g(
    f: GridFunction,
    params: StableParams,
    t_grid: Optional[Sequence[float]] = None,
    truncated: bool = False,
    pad: Optional[int] = None,
) -> GFunctionResult:
    """
    Horizontal G-function: [int_0^inf t int [f_t(x+h) - f_t(x)]^2 |h|^{-d-alpha} dh dt]^{1/2},
    the h-integral over all h, or over |h| < t^{2/alpha} when truncated.
    """
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    torus = _torus_data(f, _torus_pad(f, pad))
    stack = extension_stack(torus, params, t_grid, pad=0)
    integrand = _horizontal_integrand(stack, params.alpha, truncated)
    logger.debug("horizontal G on a %s torus, truncated=%s", stack.extent, truncated)
    values = np.sqrt(_t_integral(t_grid, integrand))
    kind = "horizontal-truncated" if truncated else "horizontal-full"
    return GFunctionResult(torus.with_values(values), kind, tail_estimate=_tail_estimate(t_grid, integrand))


def square_function_field(
    f: GridFunction, params: StableParams, t_grid: Optional[Sequence[float]] = None, pad: Optional[int] = None
) -> SquareFunctionField:
    """
    g(x, t) = Gamma_x(f_t, f_t) + (d f_t / d t)^2, kept as its two parts.
    """
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    torus = _torus_data(f, _torus_pad(f, pad))
    stack = extension_stack(torus, params, t_grid, pad=0)
    c = levy_constant(params)
    gamma = 0.5 * c * _horizontal_integrand(stack, params.alpha, truncated=False)
    vertical = _vertical_square(stack)
    return SquareFunctionField(
        GridFunction(torus.origin, torus.spacing, gamma, t_grid),
        GridFunction(torus.origin, torus.spacing, vertical, t_grid),
        c,
    )


def general_g(square_field: SquareFunctionField) -> GFunctionResult:
    """
    G_f(x) = [int t (2 Gamma / c + (d f_t/dt)^2) dt]^{1/2}, so that
    G_f^2 = G_up^2 + G_horizontal^2.
    """
    heights = square_field.gamma_part.heights
    integrand = 2.0 * square_field.gamma_part.values / square_field.levy_constant + square_field.vertical_part.values
    values = np.sqrt(_t_integral(heights, integrand))
    template = square_field.gamma_part
    return GFunctionResult(
        GridFunction(template.origin, template.spacing, values), "general", tail_estimate=_tail_estimate(heights, integrand)
    )


# ---------------------------------------------------------------------------
# Maximal function and norms
# ---------------------------------------------------------------------------


def maximal_function(f: GridFunction) -> GridFunction:
    """
    Centred maximal function over lattice balls of radii 0, h, 2h, 4h, ...
    up to the window diameter; points outside the window count as zero.
    """
    values = np.abs(f.values)
    best = values.copy()
    diameter = max(f.extent)
    radius = 1
    while radius <= diameter:
        axis = np.arange(-radius, radius + 1)
        mesh = np.meshgrid(*([axis] * f.d), indexing="ij")
        ball = (sum(m * m for m in mesh) <= radius * radius).astype(float)
        average = signal.fftconvolve(values, ball, mode="same") / ball.sum()
        best = np.maximum(best, average)
        radius *= 2
    return f.with_values(best)


def lp_norm(g: GridFunction, p: float) -> float:
    """(h^d sum |g|^p)^{1/p}."""
    if p < 1:
        raise ValueError(f"p={p} must be at least 1.")
    return float((g.cell_volume * np.sum(np.abs(g.values) ** p)) ** (1.0 / p))


def maximal_domination_constant(
    f: GridFunction, params: StableParams, t_grid: Optional[Sequence[float]] = None, pad: Optional[int] = None
) -> float:
    """
    The smallest c with Q_t f <= c M f on the window for every t in the grid.
    """
    if np.any(f.values < 0):
        raise PositivityViolation("maximal domination needs nonnegative data.")
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    torus = _torus_data(f, _torus_pad(f, pad))
    maximal = maximal_function(torus).values
    stack = extension_stack(torus, params, t_grid, pad=0)
    positive = maximal > 1e-14 * maximal.max()
    ratios = stack.values[:, positive] / maximal[positive]
    return float(ratios.max())


# ---------------------------------------------------------------------------
# L^p experiments
# ---------------------------------------------------------------------------


def meyer_majorant_check(
    f: GridFunction,
    params: StableParams,
    p: float,
    t_grid: Optional[Sequence[float]] = None,
    epsilon: Optional[float] = None,
) -> Tuple[float, float]:
    """
    lhs = ||f||_p^p and

        rhs = int int_0^inf t int max(f_t(x), f_t(x+h))^{p-2}
              [f_t(x+h) - f_t(x)]^2 |h|^{-d-alpha} dh dt dx

    for positive data on a torus (the window itself).

    Raises:
        PositivityViolation: If f is not bounded below by epsilon (default:
            any positive bound).
    """
    if not 1.0 < p < 2.0:
        raise ValueError(f"p={p} is outside (1, 2).")
    low = float(f.values.min())
    if low <= 0 or (epsilon is not None and low < epsilon):
        raise PositivityViolation(f"data must be bounded below by a positive epsilon (min {low:.3g}).")
    t_grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    stack = extension_stack(f, params, t_grid, pad=0).values
    shape = f.extent
    lattice_axes = tuple(range(1, f.d + 1))
    weights = DifferenceWeights.build(shape, f.spacing, params.alpha, periodic=True)
    base = [((np.arange(n) + n // 2) % n) - n // 2 for n in shape]

    weighted = np.zeros_like(stack)
    unweighted = np.zeros_like(stack)
    for index in np.ndindex(*shape):
        offset = tuple(int(b[i]) for b, i in zip(base, index))
        if not any(offset):
            continue
        shifted = np.roll(stack, tuple(-o for o in offset), axis=lattice_axes)
        term = np.maximum(stack, shifted) ** (p - 2.0) * (shifted - stack) ** 2
        weighted += weights.weights[index] * term
        unweighted += term
    gradient = np.stack([_gradient_norm_sq(values, f.spacing, True) for values in stack])
    integrand = weighted + weights.inner * stack ** (p - 2.0) * gradient / f.d
    integrand += weights.tail * unweighted / np.prod(shape)
    rhs = float(np.sum(_t_integral(t_grid, integrand)) * f.cell_volume)
    lhs = lp_norm(f, p) ** p
    return lhs, rhs


def lp_test_family(template: GridFunction) -> List[Tuple[str, GridFunction]]:
    """
    L^p data on the template lattice: an indicator, Gaussian bumps, a
    difference of bumps and a heavy-tailed |x|^{-a} datum cut off inside
    the middle half of the window.
    """
    mesh = template.mesh()
    centre = template.origin + template.spacing * (np.array(template.extent) - 1) / 2.0
    span = float(template.spacing * (min(template.extent) - 1))
    width = span / 16.0

    def distance(shift: float = 0.0) -> np.ndarray:
        moved = [m - c for m, c in zip(mesh, centre)]
        moved[0] = moved[0] - shift
        return np.sqrt(sum(m * m for m in moved))

    radius = distance()
    sup_distance = np.max(np.abs(np.stack([m - c for m, c in zip(mesh, centre)])), axis=0)
    family = [
        ("indicator", (sup_distance <= width).astype(float)),
        ("bump", np.exp(-radius ** 2 / (2.0 * width ** 2))),
        ("narrow-bump", np.exp(-radius ** 2 / (0.5 * width ** 2))),
        (
            "bump-difference",
            np.exp(-distance(width) ** 2 / (2.0 * width ** 2)) - np.exp(-distance(-width) ** 2 / (2.0 * width ** 2)),
        ),
        ("heavy-tail", np.where(radius <= span / 4.0, (1.0 + radius / width) ** (-0.5 * template.d), 0.0)),
    ]
    return [(name, template.with_values(values)) for name, values in family]


def gf_ratio_experiment(
    family: Sequence[Tuple[str, GridFunction]],
    params: StableParams,
    p_list: Sequence[float] = (1.25, 1.5, 1.75),
    t_grid: Optional[Sequence[float]] = None,
    pad: Optional[int] = None,
) -> dict:
    """
    Ratios ||G||_p / ||f||_p for the truncated and full horizontal and the
    vertical G-functions, per datum and p. Only the truncated ratios are
    meant to be bounded for p < 2; the others are recorded.

    Returns:
        dict: {"rows": [...], "max_truncated": {p: ...}, "max_full": {p: ...}}
    """
    rows = []
    for name, f in family:
        truncated = horizontal_g(f, params, t_grid, truncated=True, pad=pad)
        full = horizontal_g(f, params, t_grid, truncated=False, pad=pad)
        vertical = vertical_g(f, params, t_grid, pad=pad)
        for p in p_list:
            f_norm = lp_norm(f, p)
            rows.append(
                {
                    "datum": name,
                    "p": float(p),
                    "f_norm": f_norm,
                    "truncated_ratio": truncated.p_norm(p) / f_norm,
                    "full_ratio": full.p_norm(p) / f_norm,
                    "vertical_ratio": vertical.p_norm(p) / f_norm,
                }
            )
        info(f"G-function ratios computed for datum '{name}'")
    max_truncated = {float(p): max(r["truncated_ratio"] for r in rows if r["p"] == p) for p in p_list}
    max_full = {float(p): max(r["full_ratio"] for r in rows if r["p"] == p) for p in p_list}
    return {"rows": rows, "max_truncated": max_truncated, "max_full": max_full}
