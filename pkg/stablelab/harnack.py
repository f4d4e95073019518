"""
Experiment drivers: confidence-interval estimates for exit times, hitting
probabilities, the hitting lower bound phi, Harnack ratios, oscillation
decay, resolvents and Hölder fits.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from django.core.exceptions import ImproperlyConfigured
from scipy import stats

from .conf import get_setting, info, warning
from .exceptions import GeometryError, PositivityViolation, TailBoundExceeded
from .kernels import GridFunction, ProductSemigroup, evaluate_extension, lattice_extension
from .simulator import (
    AnisotropicBox,
    DifferenceSet,
    Rectangle,
    UnionSet,
    simulate_boundary_hits,
    simulate_box_exits,
    simulate_hits,
    simulate_hits_coupled,
    simulate_jump_counts,
    simulate_path_integrals,
    FACE_HORIZONTAL,
)
from .stable_core import (
    RngStream,
    SpaceTimePoint,
    StableParams,
    levy_tail_mass,
    sample_stable_increment,
)
from .workers import ensemble_chunks, ordered_map

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimateCI:
    """
    A Monte Carlo estimate with its standard error and a two-sided interval.

    Attributes:
        mean (float): Point estimate.
        std_error (float): Standard error of the mean.
        n (int): Sample count.
        confidence (float): Interval level in (0, 1).
        lower (float): Lower interval end.
        upper (float): Upper interval end.
    """

    mean: float
    std_error: float
    n: int
    confidence: float
    lower: float
    upper: float

    @classmethod
    def from_samples(cls, samples: np.ndarray, confidence: Optional[float] = None) -> "EstimateCI":
        """Student-t interval for the mean of the samples."""
        confidence = confidence or get_setting("CONFIDENCE")
        samples = np.asarray(samples, dtype=float).ravel()
        n = len(samples)
        if n < 2:
            raise ValueError("At least two samples are needed for an interval.")
        mean = float(samples.mean())
        se = float(samples.std(ddof=1) / math.sqrt(n))
        half = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1)) * se
        return cls(mean, se, n, confidence, mean - half, mean + half)

    @classmethod
    def from_proportion(cls, successes: int, n: int, confidence: Optional[float] = None) -> "EstimateCI":
        """Wilson score interval for a binomial proportion."""
        confidence = confidence or get_setting("CONFIDENCE")
        if n <= 0:
            raise ValueError("n must be positive.")
        p = successes / n
        z = float(stats.norm.ppf(0.5 + confidence / 2.0))
        denom = 1.0 + z * z / n
        centre = (p + z * z / (2 * n)) / denom
        half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        return cls(p, math.sqrt(p * (1 - p) / n), n, confidence, max(centre - half, 0.0), min(centre + half, 1.0))

    def covers(self, value: float, width: float = 3.0) -> bool:
        """True when value lies within `width` standard errors of the mean."""
        return abs(self.mean - value) <= width * self.std_error

    def as_row(self) -> dict:
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n": self.n,
            "lower": self.lower,
            "upper": self.upper,
        }


@dataclass(frozen=True)
class HolderFit:
    gamma_hat: float
    c_hat: float
    residual: float


@dataclass
class OscillationProfile:
    """
    Attributes:
        theta (float): Box ratio in (0, 1/3].
        levels (list): (k, a_k, b_k) with a_k, b_k the inf and sup over D_{theta^k}.
        contracting (bool): Whether b_k - a_k never increased.
    """

    theta: float
    levels: List[Tuple[int, float, float]]
    contracting: bool = True

    @property
    def oscillations(self) -> np.ndarray:
        return np.array([b - a for _, a, b in self.levels])


@dataclass
class ScalingFit:
    radii: List[float]
    estimates: List[EstimateCI]
    slope: float
    slope_lower: float
    slope_upper: float


@dataclass
class HittingSweep:
    rows: List[dict]
    c_hat: float
    c_hat_lower: float


@dataclass
class StepHalvingCheck:
    """
    Attributes:
        coarse (EstimateCI): Hitting probability at step dt.
        fine (EstimateCI): The same paths stepped at dt / 2.
        change (float): |fine - coarse|.
        bound (float): The wider of the larger standard error and the floor.
    """

    coarse: EstimateCI
    fine: EstimateCI
    change: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.change < self.bound


@dataclass
class HarnackResult:
    max_ratio: float
    ratios: List[float]


@dataclass
class ComparabilityResult:
    probabilities: List[List[EstimateCI]]
    c_hat: float


# ---------------------------------------------------------------------------
# Exit times
# ---------------------------------------------------------------------------


def default_step(r: float) -> float:
    return r * r / 400.0


def estimate_mean_exit_time(
    params: StableParams,
    box: AnisotropicBox,
    start: SpaceTimePoint,
    n: int,
    dt: Optional[float],
    rng: RngStream,
    workers: Optional[int] = None,
) -> EstimateCI:
    """
    Sample mean and standard error of the first exit time from `box`.

    Raises:
        GeometryError: If the box leaves the half-space or start lies outside it.
    """
    box.require_half_space()
    if not box.contains_point(start):
        raise GeometryError(f"start {start} lies outside the box D_{box.r:g}.")
    dt = dt or default_step(box.r)
    exits = simulate_box_exits(params, box, start, n, dt, rng, workers=workers)
    finite = np.isfinite(exits.tau)
    if not finite.all():
        warning(f"{int((~finite).sum())} of {n} paths never left the box")
    return EstimateCI.from_samples(exits.tau[finite])


def fit_exit_scaling(
    params: StableParams,
    radii: Sequence[float],
    n: int,
    rng: RngStream,
    wide: bool = False,
    epsilon: float = 0.0,
    workers: Optional[int] = None,
) -> ScalingFit:
    """
    Mean exit times of D_r from its centre for each r, and the slope of
    log E tau against log r with its interval.

    Args:
        wide (bool): Use a huge horizontal half-width (vertical-only control).
    """
    estimates = []
    for i, r in enumerate(radii):
        center = SpaceTimePoint(np.zeros(params.d), float(r))
        box = AnisotropicBox(center, float(r), params.alpha, epsilon, 1e9 if wide else None)
        estimates.append(estimate_mean_exit_time(params, box, center, n, None, rng.child(i), workers))
        info(f"Exit time r={r:g}: {estimates[-1].mean:.6g} +- {estimates[-1].std_error:.2g}")
    if len(radii) < 2:
        return ScalingFit(list(radii), estimates, math.nan, math.nan, math.nan)
    fit = stats.linregress(np.log(radii), np.log([e.mean for e in estimates]))
    confidence = get_setting("CONFIDENCE")
    dof = max(len(radii) - 2, 1)
    half = float(stats.t.ppf(0.5 + confidence / 2.0, dof)) * fit.stderr
    return ScalingFit(list(radii), estimates, float(fit.slope), float(fit.slope - half), float(fit.slope + half))


# ---------------------------------------------------------------------------
# Hitting probabilities
# ---------------------------------------------------------------------------


def _rectangle_within(target: Rectangle, box: AnisotropicBox) -> bool:
    outer = Rectangle.from_box(box)
    return (
        all(lo >= olo - 1e-12 for lo, olo in zip(target.lower, outer.lower))
        and all(hi <= ohi + 1e-12 for hi, ohi in zip(target.upper, outer.upper))
        and target.t_low >= outer.t_low - 1e-12
        and target.t_high <= outer.t_high + 1e-12
    )


def _hitting_container(
    params: StableParams, target: Rectangle, start: SpaceTimePoint, center: SpaceTimePoint, container_scale: float
) -> AnisotropicBox:
    unit = AnisotropicBox(center, 1.0, params.alpha)
    unit.scaled(6.0).require_half_space("D_6")
    if not _rectangle_within(target, unit):
        raise GeometryError("target K is not contained in D_1.")
    if not unit.scaled(2.0).contains_point(start):
        raise GeometryError(f"start {start} lies outside D_2.")
    return unit.scaled(container_scale)


def estimate_box_hitting_probability(
    params: StableParams,
    target: Rectangle,
    start: SpaceTimePoint,
    center: SpaceTimePoint,
    n: int,
    dt: Optional[float],
    rng: RngStream,
    container_scale: float = 3.0,
    workers: Optional[int] = None,
) -> EstimateCI:
    """
    P(T_K < tau_{D_3}) for K = E x [a, b] inside D_1(center), start in D_2(center).

    Raises:
        GeometryError: If D_6(center) leaves the half-space, K is not inside
            D_1 or start is not inside D_2.
    """
    container = _hitting_container(params, target, start, center, container_scale)
    dt = dt or default_step(1.0)
    hits = simulate_hits(params, target, container, start, n, dt, rng, workers=workers)
    return EstimateCI.from_proportion(int(hits.sum()), n)


def box_hitting_step_check(
    params: StableParams,
    target: Rectangle,
    start: SpaceTimePoint,
    center: SpaceTimePoint,
    n: int,
    dt: Optional[float],
    rng: RngStream,
    container_scale: float = 3.0,
    floor: float = 1e-3,
    workers: Optional[int] = None,
) -> StepHalvingCheck:
    """
    estimate_box_hitting_probability at dt and dt / 2 on coupled paths. The
    discretisation is consistent when the two differ by less than
    max(standard error, floor).
    """
    container = _hitting_container(params, target, start, center, container_scale)
    dt = dt or default_step(1.0)
    coarse, fine = simulate_hits_coupled(params, target, container, start, n, dt, rng, workers=workers)
    coarse_ci = EstimateCI.from_proportion(int(coarse.sum()), n)
    fine_ci = EstimateCI.from_proportion(int(fine.sum()), n)
    bound = max(coarse_ci.std_error, fine_ci.std_error, floor)
    check = StepHalvingCheck(coarse_ci, fine_ci, abs(fine_ci.mean - coarse_ci.mean), bound)
    if not check.ok:
        warning(f"halving dt={dt:g} moves the hitting probability by {check.change:.2e} > {bound:.2e}")
    return check


def centred_target(center: SpaceTimePoint, horizontal_fraction: float, vertical_length: float) -> Rectangle:
    """
    E x [a, b] centred in D_1(center): E a cube covering horizontal_fraction
    of the side of D_1, b - a = vertical_length.
    """
    hx = 0.5 * horizontal_fraction
    c = center.position()
    return Rectangle(tuple(c - hx), tuple(c + hx), center.t - vertical_length / 2.0, center.t + vertical_length / 2.0)


def box_hitting_sweep(
    params: StableParams,
    center: SpaceTimePoint,
    start: SpaceTimePoint,
    sizes: Sequence[Tuple[float, float]],
    n: int,
    dt: Optional[float],
    rng: RngStream,
    workers: Optional[int] = None,
) -> HittingSweep:
    """
    Hitting probabilities over targets of shrinking size and the fitted
    lower-bound constant c_hat = min P / (m(E) (b - a)).

    Args:
        sizes: (horizontal_fraction, vertical_length) pairs.
    """
    rows = []
    for i, (fraction, length) in enumerate(sizes):
        target = centred_target(center, fraction, length)
        estimate = estimate_box_hitting_probability(params, target, start, center, n, dt, rng.child(i), workers=workers)
        size = target.horizontal_measure() * (target.t_high - target.t_low)
        rows.append(
            {
                "horizontal_fraction": fraction,
                "vertical_length": length,
                "size": size,
                "probability": estimate.mean,
                "std_error": estimate.std_error,
                "lower": estimate.lower,
                "ratio": estimate.mean / size,
            }
        )
    c_hat = min(row["ratio"] for row in rows)
    c_lower = min(row["lower"] / row["size"] for row in rows)
    return HittingSweep(rows, c_hat, c_lower)


def standard_shape_family(unit: AnisotropicBox, epsilon: float) -> List:
    """
    Compact sets inside D_1 occupying the fraction epsilon of its measure:
    a centred sub-box, two slabs at the ends of the first axis, and the
    annulus left by removing a centred box of fraction 1 - epsilon.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon={epsilon} is outside (0, 1].")
    d = unit.d
    outer = Rectangle.from_box(unit)
    c = unit.center.position()
    hx, ht = unit.half_widths

    def centred(fraction):
        k = fraction ** (1.0 / (d + 1))
        return Rectangle(tuple(c - k * hx), tuple(c + k * hx), unit.center.t - k * ht, unit.center.t + k * ht)

    width = epsilon * hx
    lower_left = np.array(outer.lower)
    upper_left = np.array(outer.upper)
    upper_left[0] = outer.lower[0] + width
    lower_right = np.array(outer.lower)
    lower_right[0] = outer.upper[0] - width
    upper_right = np.array(outer.upper)
    slabs = UnionSet(
        (
            Rectangle(tuple(lower_left), tuple(upper_left), outer.t_low, outer.t_high),
            Rectangle(tuple(lower_right), tuple(upper_right), outer.t_low, outer.t_high),
        )
    )
    annulus = DifferenceSet(outer, centred(1.0 - epsilon))
    return [centred(epsilon), slabs, annulus]


def estimate_phi(
    params: StableParams,
    epsilon_grid: Sequence[float],
    n: int,
    dt: Optional[float],
    rng: RngStream,
    shape_family: Optional[Callable] = None,
    center: Optional[SpaceTimePoint] = None,
    n_starts: int = 4,
    workers: Optional[int] = None,
) -> List[Tuple[float, EstimateCI]]:
    """
    Empirical phi(epsilon): the smallest P(T_A < tau_{D_3}) over the shape
    family at measure fraction epsilon and over starts drawn in D_2.

    Returns:
        list: (epsilon, EstimateCI of the minimising set and start).
    """
    center = center or SpaceTimePoint(np.zeros(params.d), 3.0)
    unit = AnisotropicBox(center, 1.0, params.alpha)
    container = unit.scaled(3.0)
    container.require_half_space("D_3")
    shape_family = shape_family or standard_shape_family
    dt = dt or default_step(1.0)
    xs, ts = unit.scaled(2.0).sample_uniform(rng.child(2**31), n_starts)
    # the centre is always among the starts
    xs[0], ts[0] = center.position(), center.t

    results = []
    for i, epsilon in enumerate(epsilon_grid):
        worst = None
        for j, shape in enumerate(shape_family(unit, epsilon)):
            for k in range(n_starts):
                start = SpaceTimePoint(tuple(xs[k]), ts[k])
                stream = rng.child(i).child(j).child(k)
                hits = simulate_hits(params, shape, container, start, n, dt, stream, workers=workers)
                estimate = EstimateCI.from_proportion(int(hits.sum()), n)
                if worst is None or estimate.mean < worst.mean:
                    worst = estimate
        results.append((float(epsilon), worst))
        info(f"phi({epsilon:g}) = {worst.mean:.4g} [{worst.lower:.4g}, {worst.upper:.4g}]")
    return results


def exit_distribution_comparability(
    params: StableParams,
    box: AnisotropicBox,
    starts: Sequence[SpaceTimePoint],
    targets: Sequence[Rectangle],
    n: int,
    dt: Optional[float],
    rng: RngStream,
    workers: Optional[int] = None,
) -> ComparabilityResult:
    """
    P^p(X_tau in F) for starts p in the margin box D^eps_r and targets F
    outside D_{2r}, with the spread C_hat = max_F max_p P / min_p P.

    `box` carries the margin epsilon; exits are taken from the full box D_r.

    Raises:
        GeometryError: If a start is outside the margin box or a target meets D_{2r}.
    """
    box.require_half_space()
    full = box.with_margin(0.0)
    double = Rectangle.from_box(box.scaled(2.0))
    for target in targets:
        separated = any(
            hi < dlo or lo > dhi for lo, hi, dlo, dhi in zip(target.lower, target.upper, double.lower, double.upper)
        ) or target.t_high < double.t_low or target.t_low > double.t_high
        if not separated:
            raise GeometryError("target set meets D_2r.")
    dt = dt or default_step(box.r)
    table = []
    for i, start in enumerate(starts):
        if not box.contains_point(start):
            raise GeometryError(f"start {start} lies outside the margin box.")
        exits = simulate_box_exits(params, full, start, n, dt, rng.child(i), workers=workers)
        row = []
        for target in targets:
            landed = target.contains(exits.positions, exits.heights) & (exits.faces == FACE_HORIZONTAL)
            row.append(EstimateCI.from_proportion(int(landed.sum()), n))
        table.append(row)
    spread = 1.0
    for j in range(len(targets)):
        column = [table[i][j].mean for i in range(len(starts))]
        if min(column) > 0:
            spread = max(spread, max(column) / min(column))
        elif max(column) > 0:
            spread = math.inf
    return ComparabilityResult(table, spread)


# ---------------------------------------------------------------------------
# Boundary law and Levy system
# ---------------------------------------------------------------------------


def _boundary_values(f: GridFunction) -> Callable[[np.ndarray], np.ndarray]:
    interpolator = f.interpolator()
    return lambda xs: interpolator(np.atleast_2d(xs))


def boundary_time_cdf(
    params: StableParams,
    height: float,
    probes: Sequence[float],
    n: int,
    dt: float,
    rng: RngStream,
    bridge: bool = True,
    workers: Optional[int] = None,
) -> List[Tuple[float, EstimateCI]]:
    """
    Empirical P(T_0 <= S) from `height` at each probe S.
    """
    start = SpaceTimePoint(np.zeros(params.d), height)
    hits = simulate_boundary_hits(
        params, start, n, dt, rng, max_time=max(probes) * 1.01, bridge=bridge, workers=workers
    )
    return [(float(S), EstimateCI.from_proportion(int((hits.times <= S).sum()), n)) for S in probes]


def estimate_boundary_expectation(
    params: StableParams,
    f: GridFunction,
    start: SpaceTimePoint,
    n: int,
    dt: float,
    rng: RngStream,
    workers: Optional[int] = None,
) -> EstimateCI:
    """
    Monte Carlo E f(Y_{T_0}) from `start`, the probabilistic harmonic extension.
    """
    hits = simulate_boundary_hits(params, start, n, dt, rng, workers=workers)
    return EstimateCI.from_samples(_boundary_values(f)(hits.positions))


def martingale_defect(
    params: StableParams,
    f: GridFunction,
    start: SpaceTimePoint,
    s: float,
    n: int,
    dt: float,
    rng: RngStream,
    pad="auto",
    workers: Optional[int] = None,
) -> EstimateCI:
    """
    u(X_{s ^ T_0}) - u(start) for the harmonic extension u of f. Its mean
    vanishes for a martingale.

    Survivors sit at distinct heights, so u is evaluated spectrally with the
    given padding.
    """
    hits = simulate_boundary_hits(params, start, n, dt, rng, max_time=s, complete=False, workers=workers)
    values = np.empty(n)
    absorbed = hits.absorbed
    if absorbed.any():
        values[absorbed] = _boundary_values(f)(hits.positions[absorbed])
    if (~absorbed).any():
        values[~absorbed] = evaluate_extension(f, params, hits.positions[~absorbed], hits.heights[~absorbed], pad=pad)
    u0 = evaluate_extension(f, params, start.position()[None, :], [start.t], pad=pad)[0]
    return EstimateCI.from_samples(values - u0)


def levy_system_check(
    params: StableParams,
    horizon: float,
    radii: Sequence[float],
    n: int,
    dt: float,
    rng: RngStream,
    workers: Optional[int] = None,
) -> List[Tuple[float, EstimateCI, float]]:
    """
    Mean number of jumps larger than R over [0, horizon] against
    horizon * (Levy measure of {|u| > R}).

    Returns:
        list: (R, EstimateCI of the count, expected count).
    """
    counts = simulate_jump_counts(params, horizon, dt, radii, n, rng, workers=workers)
    return [
        (float(R), EstimateCI.from_samples(counts[:, k]), horizon * levy_tail_mass(params, R))
        for k, R in enumerate(radii)
    ]


# ---------------------------------------------------------------------------
# Harnack and oscillation
# ---------------------------------------------------------------------------


def harnack_box(center: SpaceTimePoint, alpha: float, r: float = 1.0) -> AnisotropicBox:
    """
    The box around the fixed centre for the Harnack experiment.

    Raises:
        GeometryError: If the box 32 times larger leaves the half-space.
    """
    box = AnisotropicBox(center, r, alpha)
    if center.t - 16.0 * r < 0:
        raise GeometryError(
            f"D_32 box leaves the half-space (center.t - 16r = {center.t - 16.0 * r:g} < 0)"
        )
    return box


def box_sample_points(box: AnisotropicBox, per_axis: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor lattice of per_axis points along every axis of the closed box."""
    hx, ht = box.half_widths
    c = box.center.position()
    axes = [np.linspace(ci - hx, ci + hx, per_axis) for ci in c]
    axes.append(np.linspace(box.center.t - ht, box.center.t + ht, per_axis))
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    return points[:, :-1], points[:, -1]


def harnack_ratio_experiment(
    params: StableParams,
    data_family: Sequence[GridFunction],
    center: SpaceTimePoint,
    r: float = 1.0,
    per_axis: int = 7,
) -> HarnackResult:
    """
    sup h / inf h over the Harnack box for the exact extension h of each datum.

    Raises:
        GeometryError: If D_32 leaves the half-space.
        PositivityViolation: If an extension is not strictly positive on the box.
    """
    box = harnack_box(center, params.alpha, r)
    xs, ts = box_sample_points(box, per_axis)
    ratios = []
    for k, f in enumerate(data_family):
        if np.any(f.values < 0):
            raise PositivityViolation(f"datum {k} takes negative values.")
        h = lattice_extension(f, params, xs, ts)
        low = float(h.min())
        if not low > 0:
            raise PositivityViolation(f"extension of datum {k} has inf {low:.3g} <= 0 on the box.")
        ratios.append(float(h.max()) / low)
    return HarnackResult(max(ratios), ratios)


def random_boundary_family(template: GridFunction, n: int, rng: RngStream, floor: float = 0.0) -> List[GridFunction]:
    """
    n nonnegative data on the template lattice: random mixtures of one to
    three Gaussian bumps and box indicators, plus an optional floor.
    """
    generator = rng.generator
    mesh = template.mesh()
    span = template.spacing * (np.array(template.extent) - 1)
    lower = template.origin + span / 4.0
    upper = template.origin + 3.0 * span / 4.0
    family = []
    for _ in range(n):
        values = np.full(template.extent, floor)
        for _ in range(int(generator.integers(1, 4))):
            centre = generator.uniform(lower, upper)
            width = generator.uniform(0.05, 0.2) * float(span.min())
            weight = generator.uniform(0.2, 1.0)
            if generator.random() < 0.5:
                sq = sum((m - c) ** 2 for m, c in zip(mesh, centre))
                values = values + weight * np.exp(-sq / (2.0 * width * width))
            else:
                inside = np.ones(template.extent, dtype=bool)
                for m, c in zip(mesh, centre):
                    inside &= np.abs(m - c) <= width
                values = values + weight * inside
        family.append(template.with_values(values))
    return family


def _regress_oscillation(profile: OscillationProfile, alpha: float, f_sup: float) -> HolderFit:
    osc = profile.oscillations
    if f_sup == 0.0 or np.all(osc <= 1e-12 * max(f_sup, 1.0)):
        return HolderFit(1.0, 0.0, 0.0)
    keep = osc > 1e-14 * f_sup
    ks = np.array([k for k, _, _ in profile.levels])[keep]
    logs = np.log(osc[keep])
    if len(ks) < 2:
        return HolderFit(1.0, float(osc.max() / f_sup), 0.0)
    fit = stats.linregress(ks, logs)
    beta = math.exp(fit.slope)
    residual = float(np.sqrt(np.mean((logs - (fit.intercept + fit.slope * ks)) ** 2)))
    gamma = (alpha / 2.0) * math.log(beta) / math.log(profile.theta)
    return HolderFit(gamma, math.exp(fit.intercept) / f_sup, residual)


def oscillation_profile(
    params: StableParams,
    f: GridFunction,
    center: SpaceTimePoint,
    theta: float,
    k_max: int,
    per_axis: int = 9,
) -> Tuple[OscillationProfile, HolderFit]:
    """
    a_k = inf, b_k = sup of the exact extension over D_{theta^k}(center),
    k = 0..k_max, and the decay fit b_k - a_k ~ beta^k converted to
    gamma = (alpha/2) log(beta) / log(theta).

    Samples of every deeper box lie inside the shallower ones, so each level
    takes the extreme over its own samples and all deeper samples; this keeps
    a_k nondecreasing and b_k nonincreasing.

    Raises:
        GeometryError: If D_4(center) leaves the half-space.
    """
    if not 0.0 < theta <= 1.0 / 3.0:
        raise ImproperlyConfigured(f"theta={theta} is outside (0, 1/3].")
    AnisotropicBox(center, 4.0, params.alpha).require_half_space("D_4")
    raw = []
    for k in range(k_max + 1):
        box = AnisotropicBox(center, theta ** k, params.alpha)
        xs, ts = box_sample_points(box, per_axis)
        h = lattice_extension(f, params, xs, ts)
        raw.append((float(h.min()), float(h.max())))
    levels = []
    for k in range(k_max + 1):
        a = min(lo for lo, _ in raw[k:])
        b = max(hi for _, hi in raw[k:])
        levels.append((k, a, b))
    profile = OscillationProfile(theta, levels)
    raw_osc = np.array([hi - lo for lo, hi in raw])
    if np.any(np.diff(raw_osc) > 1e-12 * max(raw_osc.max(), 1.0)):
        profile.contracting = False
        warning(f"oscillation fails to contract at theta={theta:g}; the grid may be too coarse")
    return profile, _regress_oscillation(profile, params.alpha, f.sup_norm())


def holder_constant_estimate(
    g: GridFunction,
    region: Optional[AnisotropicBox] = None,
    gamma_probe: Optional[float] = None,
    f_sup: float = 1.0,
    n_pairs: int = 4000,
    rng: Optional[RngStream] = None,
    gamma_grid: Sequence[float] = tuple(np.linspace(0.05, 1.0, 20)),
) -> HolderFit:
    """
    Smallest c with |g(p) - g(p')| <= c f_sup (|p - p'| ^ 1)^gamma over
    sampled lattice pairs of the region.

    Without gamma_probe, gamma is chosen on gamma_grid to make the envelope
    tightest: the spread (standard deviation) of the implied log constants
    is smallest. The residual is that spread.
    """
    rng = rng or RngStream(0)
    grid_axes = g.axes()
    mesh = np.meshgrid(*grid_axes, indexing="ij")
    xs = np.stack([m.ravel() for m in mesh], axis=1)
    if g.heights is not None:
        ts = np.repeat(g.heights, xs.shape[0])
        xs = np.tile(xs, (len(g.heights), 1))
    else:
        ts = np.zeros(xs.shape[0])
    values = g.values.reshape(-1)
    keep = np.isfinite(values)
    if region is not None:
        keep &= region.contains(xs, ts)
    xs, ts, values = xs[keep], ts[keep], values[keep]
    if len(values) < 2:
        raise ValueError("region holds fewer than two lattice points.")

    i = rng.generator.integers(0, len(values), n_pairs)
    j = rng.generator.integers(0, len(values), n_pairs)
    distinct = i != j
    i, j = i[distinct], j[distinct]
    dist = np.sqrt(np.sum((xs[i] - xs[j]) ** 2, axis=1) + (ts[i] - ts[j]) ** 2)
    diff = np.abs(values[i] - values[j])
    informative = (diff > 1e-14 * max(np.abs(values).max(), 1.0)) & (dist > 0)
    if not informative.any():
        return HolderFit(gamma_probe if gamma_probe is not None else 1.0, 0.0, 0.0)
    dist, diff = np.minimum(dist[informative], 1.0), diff[informative]

    def implied(gamma):
        return np.log(diff / f_sup) - gamma * np.log(dist)

    candidates = [gamma_probe] if gamma_probe is not None else list(gamma_grid)
    best = None
    for gamma in candidates:
        logs = implied(gamma)
        spread = float(logs.std())
        if best is None or spread < best[2]:
            best = (float(gamma), float(math.exp(logs.max())), spread)
    return HolderFit(*best)


# ---------------------------------------------------------------------------
# Resolvent
# ---------------------------------------------------------------------------

_GL8_NODES, _GL8_WEIGHTS = np.polynomial.legendre.leggauss(8)


def resolvent_s_grid(s_min: float, horizon: float, n_panels: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gauss-Legendre nodes and weights on [0, s_min] followed by geometric
    panels up to the horizon.
    """
    edges = np.concatenate([[0.0], np.geomspace(s_min, horizon, n_panels)])
    lower, upper = edges[:-1], edges[1:]
    half = (upper - lower) / 2.0
    mid = (upper + lower) / 2.0
    nodes = (mid[:, None] + half[:, None] * _GL8_NODES).ravel()
    weights = (half[:, None] * _GL8_WEIGHTS).ravel()
    return nodes, weights


def _resolvent_horizon(lam: float, f_sup: float, tol: float, horizon: Optional[float], killed: bool) -> Tuple[float, float]:
    if lam < 0:
        raise ImproperlyConfigured(f"lambda={lam} must be nonnegative.")
    if lam == 0:
        if horizon is None or not killed:
            raise ImproperlyConfigured("lambda=0 needs the killed variant and a finite horizon.")
        return float(horizon), 0.0
    if horizon is None:
        horizon = max(math.log(max(f_sup, 1e-300) / (lam * tol)) / lam, 1.0 / lam)
    tail = f_sup * math.exp(-lam * horizon) / lam
    if tail > tol * (1.0 + 1e-9):
        raise TailBoundExceeded(f"resolvent horizon {horizon:g} is too short for lambda={lam:g}", tail)
    return float(horizon), tail


def resolvent_quadrature(
    params: StableParams,
    f: GridFunction,
    lam: float,
    killed: bool = False,
    horizon: Optional[float] = None,
    tol: Optional[float] = None,
    n_panels: int = 48,
    pad="auto",
    crop: bool = True,
) -> GridFunction:
    """
    U_lambda f = int_0^S exp(-lambda s) P_s f ds on the lattice of f, by
    Gauss-Legendre panels on a geometric s-grid.

    The tail beyond S is at most ||f|| exp(-lambda S) / lambda; S defaults to
    the smallest horizon meeting `tol`.

    Raises:
        TailBoundExceeded: If the given horizon leaves a tail above tol.
        ImproperlyConfigured: For lambda < 0, or lambda = 0 without the
            killed variant and a horizon.
    """
    tol = tol or get_setting("QUAD_ATOL")
    horizon, _ = _resolvent_horizon(lam, f.sup_norm(), tol, horizon, killed)
    tail_time = horizon * horizon / 2.0 if lam == 0 else min(1.0 / (lam * lam), horizon * horizon / 2.0)
    semigroup = ProductSemigroup(f, params, killed=killed, horizon=horizon, tail_time=tail_time, pad=pad)
    s_min = min(horizon, 0.01 / max(float(semigroup.rates.max()), 1e-12))
    nodes, weights = resolvent_s_grid(s_min, horizon, n_panels)
    return semigroup.integrate(nodes, weights, lam, crop=crop)


def _lattice_function(f: GridFunction) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    interpolator = f.interpolator()

    def func(xs, ts):
        return interpolator(np.column_stack([ts, xs]))

    return func


def resolvent_monte_carlo(
    params: StableParams,
    f: GridFunction,
    lam: float,
    points: Sequence[SpaceTimePoint],
    n: int,
    rng: RngStream,
    dt: Optional[float] = None,
    killed: bool = False,
    route: str = "clock",
    tol: Optional[float] = None,
    workers: Optional[int] = None,
) -> List[EstimateCI]:
    """
    U_lambda f at probe points by Monte Carlo.

    route="clock" uses U_lambda f = E f(X_e) / lambda with e exponential of
    rate lambda, X_e drawn exactly and killing decided by the bridge law.
    route="path" integrates exp(-lambda s) f(X_s) along stepped paths up to
    the tail horizon.
    """
    if not lam > 0:
        raise ImproperlyConfigured("Monte Carlo resolvents need lambda > 0.")
    func = _lattice_function(f)
    estimates = []
    for i, point in enumerate(points):
        stream = rng.child(i)
        if route == "clock":
            samples = _exponential_clock(params, func, point, lam, n, killed, stream, workers)
        elif route == "path":
            tol = tol or get_setting("QUAD_ATOL")
            horizon, _ = _resolvent_horizon(lam, f.sup_norm(), max(tol, 1e-4), None, killed)
            samples = simulate_path_integrals(
                params, func, point, lam, n, dt or 0.01, horizon, stream, killed=killed, workers=workers
            )
        else:
            raise ImproperlyConfigured(f"Unknown resolvent route '{route}'. Your choices are ['clock', 'path']")
        estimates.append(EstimateCI.from_samples(samples))
    return estimates


def _exponential_clock(params, func, point, lam, n, killed, rng, workers):
    def body(task):
        _, length, stream = task
        generator = stream.generator
        e = generator.standard_exponential(length) / lam
        xs = point.position() + e[:, None] ** (1.0 / params.alpha) * sample_stable_increment(
            params, 1.0, stream, size=length
        )
        ts = point.t + np.sqrt(2.0 * e) * generator.standard_normal(length)
        values = func(xs, ts)
        if killed:
            u = generator.random(length)
            safe_e = np.maximum(e, np.finfo(float).tiny)
            crossed = (ts <= 0) | (u < np.exp(-point.t * np.clip(ts, 0, None) / safe_e))
            values = np.where(crossed, 0.0, values)
        return values / lam

    tasks = [(index, length, rng.child(index)) for index, length in ensemble_chunks(n)]
    return np.concatenate(ordered_map(body, tasks, workers))


def resolvent_apply(
    params: StableParams,
    f: GridFunction,
    lam: float,
    method: str = "quadrature",
    killed: bool = False,
    **kwargs,
) -> Union[GridFunction, List[EstimateCI]]:
    """
    U_lambda f by quadrature (a GridFunction on the lattice of f) or by Monte
    Carlo (estimates at kwargs["points"]).

    The default is the unkilled process: the vertical motion continues below
    t = 0 where f vanishes. killed=True absorbs it at t = 0.
    """
    if method == "quadrature":
        return resolvent_quadrature(params, f, lam, killed=killed, **kwargs)
    if method == "monte-carlo":
        return resolvent_monte_carlo(params, f, lam, killed=killed, **kwargs)
    raise ImproperlyConfigured(f"Unknown resolvent method '{method}'. Your choices are ['quadrature', 'monte-carlo']")
