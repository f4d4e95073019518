"""
Path generation for the product process X = (Y, Z) on the upper half-space.

Y moves by exact stable increments, Z by exact Gaussian increments of
variance 2 dt. Boundary and vertical-face crossings inside a step are
decided with the Brownian bridge law; horizontal exits are read off
state-to-state since they happen by jumps.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy import stats

from .conf import get_setting, info
from .exceptions import GeometryError
from .stable_core import (
    RngStream,
    SpaceTimePoint,
    StableParams,
    sample_brownian_increment,
    sample_stable_increment,
)
from .workers import ensemble_chunks, ordered_map

logger = logging.getLogger(__name__)

FACE_NONE = 0
FACE_HORIZONTAL = 1
FACE_LOWER = 2
FACE_UPPER = 3
FACE_NAMES = {FACE_NONE: "none", FACE_HORIZONTAL: "horizontal", FACE_LOWER: "lower", FACE_UPPER: "upper"}


# ---------------------------------------------------------------------------
# Sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnisotropicBox:
    """
    The box D_r(x, t): a horizontal cube of half-width r^{2/alpha}/2 times a
    vertical interval of half-width r/2, optionally shrunk by a margin.

    Attributes:
        center (SpaceTimePoint): Centre (x, t).
        r (float): Scale, r > 0.
        alpha (float): Stability index fixing the horizontal scaling.
        epsilon (float): Margin in [0, 1); shrinks the horizontal half-width
            by (1 - epsilon^{2/alpha}) and the vertical one by (1 - epsilon).
        horizontal_half_width (float, optional): Overrides the horizontal
            half-width (wide-box controls).
    """

    center: SpaceTimePoint
    r: float
    alpha: float
    epsilon: float = 0.0
    horizontal_half_width: Optional[float] = None

    def __post_init__(self):
        if not self.r > 0:
            raise GeometryError(f"r={self.r} must be positive.")
        if not 0.0 < self.alpha < 2.0:
            raise GeometryError(f"alpha={self.alpha} is outside (0, 2).")
        if not 0.0 <= self.epsilon < 1.0:
            raise GeometryError(f"epsilon={self.epsilon} is outside [0, 1).")

    @property
    def d(self) -> int:
        return self.center.d

    @property
    def half_widths(self) -> Tuple[float, float]:
        if self.horizontal_half_width is not None:
            hx = float(self.horizontal_half_width)
        else:
            hx = self.r ** (2.0 / self.alpha) / 2.0
            if self.epsilon > 0:
                hx *= 1.0 - self.epsilon ** (2.0 / self.alpha)
        ht = self.r / 2.0 * (1.0 - self.epsilon)
        return hx, ht

    @property
    def t_range(self) -> Tuple[float, float]:
        _, ht = self.half_widths
        return self.center.t - ht, self.center.t + ht

    @property
    def in_half_space(self) -> bool:
        return self.center.t - self.r / 2.0 >= 0.0

    def scaled(self, factor: float, epsilon: float = 0.0) -> "AnisotropicBox":
        """D_{factor r} with the same centre."""
        return AnisotropicBox(self.center, self.r * factor, self.alpha, epsilon)

    def with_margin(self, epsilon: float) -> "AnisotropicBox":
        return AnisotropicBox(self.center, self.r, self.alpha, epsilon, self.horizontal_half_width)

    def require_half_space(self, label: str = "box"):
        if not self.in_half_space:
            raise GeometryError(
                f"{label} D_{self.r:g} around t={self.center.t:g} leaves the half-space "
                f"(center.t - r/2 = {self.center.t - self.r / 2.0:g} < 0)"
            )

    def contains(self, xs: np.ndarray, ts: np.ndarray, strict: bool = False) -> np.ndarray:
        xs = np.atleast_2d(xs)
        ts = np.asarray(ts, dtype=float)
        hx, ht = self.half_widths
        dx = np.abs(xs - self.center.position())
        dt = np.abs(ts - self.center.t)
        if strict:
            return np.all(dx < hx, axis=1) & (dt < ht)
        return np.all(dx <= hx, axis=1) & (dt <= ht)

    def contains_point(self, point: SpaceTimePoint, strict: bool = False) -> bool:
        return bool(self.contains(point.position()[None, :], np.array([point.t]), strict)[0])

    def measure(self) -> float:
        hx, ht = self.half_widths
        return (2.0 * hx) ** self.d * 2.0 * ht

    def horizontal_measure(self) -> float:
        hx, _ = self.half_widths
        return (2.0 * hx) ** self.d

    def sample_uniform(self, rng: RngStream, n: int) -> Tuple[np.ndarray, np.ndarray]:
        hx, ht = self.half_widths
        xs = self.center.position() + rng.generator.uniform(-hx, hx, (n, self.d))
        ts = self.center.t + rng.generator.uniform(-ht, ht, n)
        return xs, ts


@dataclass(frozen=True)
class Rectangle:
    """
    A closed target E x [a, b] with E an axis-aligned box [lower, upper].
    """

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    t_low: float
    t_high: float

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if len(self.lower) != len(self.upper):
            raise GeometryError("lower and upper corners differ in dimension.")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)) or self.t_low > self.t_high:
            raise GeometryError("Rectangle corners are not ordered.")
        if self.t_low < 0:
            raise GeometryError(f"Rectangle t_low={self.t_low} lies below the half-space.")

    @classmethod
    def from_box(cls, box: AnisotropicBox) -> "Rectangle":
        hx, _ = box.half_widths
        lo, hi = box.t_range
        c = box.center.position()
        return cls(tuple(c - hx), tuple(c + hx), lo, hi)

    def contains(self, xs: np.ndarray, ts: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(xs)
        ts = np.asarray(ts, dtype=float)
        inside_x = np.all((xs >= np.asarray(self.lower)) & (xs <= np.asarray(self.upper)), axis=1)
        return inside_x & (ts >= self.t_low) & (ts <= self.t_high)

    def horizontal_measure(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

    def measure(self) -> float:
        return self.horizontal_measure() * (self.t_high - self.t_low)


@dataclass(frozen=True)
class UnionSet:
    """Union of disjoint target sets; measure adds up."""

    parts: Tuple

    def contains(self, xs: np.ndarray, ts: np.ndarray) -> np.ndarray:
        result = np.zeros(len(np.asarray(ts).reshape(-1)), dtype=bool)
        for part in self.parts:
            result |= part.contains(xs, ts)
        return result

    def measure(self) -> float:
        return sum(part.measure() for part in self.parts)


@dataclass(frozen=True)
class DifferenceSet:
    """outer minus inner, with inner contained in outer."""

    outer: object
    inner: object

    def contains(self, xs: np.ndarray, ts: np.ndarray) -> np.ndarray:
        return self.outer.contains(xs, ts) & ~self.inner.contains(xs, ts)

    def measure(self) -> float:
        return self.outer.measure() - self.inner.measure()


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JumpEvent:
    time: float
    pre_position: Tuple[float, ...]
    post_position: Tuple[float, ...]

    def __post_init__(self):
        if self.magnitude <= 0:
            raise ValueError("JumpEvent magnitude must be positive.")

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(np.subtract(self.post_position, self.pre_position)))


@dataclass(frozen=True)
class ExitEvent:
    time: float
    location: SpaceTimePoint
    face: str


@dataclass
class PathRecord:
    """
    One sampled path on the step lattice.

    Attributes:
        dt (float): Step.
        times (np.ndarray): Strictly increasing state times.
        positions (np.ndarray): Horizontal states, shape (len(times), d).
        heights (np.ndarray): Vertical states, all >= 0.
        jumps (list[JumpEvent]): Increments above `threshold`.
        threshold (float): Jump recording threshold.
        T0 (float, optional): Boundary hitting time; the path stops there.
        exit (ExitEvent, optional): First exit from the monitored box.
    """

    dt: float
    times: np.ndarray
    positions: np.ndarray
    heights: np.ndarray
    jumps: List[JumpEvent] = field(default_factory=list)
    threshold: float = 0.0
    T0: Optional[float] = None
    exit: Optional[ExitEvent] = None

    @property
    def states(self):
        for time, x, t in zip(self.times, self.positions, self.heights):
            yield float(time), tuple(x), float(t)


# ---------------------------------------------------------------------------
# Single-path operations
# ---------------------------------------------------------------------------


def bridge_crossing_prob(a: float, b: float, dt: float) -> float:
    """
    Probability that a variance-2 Brownian bridge from a > 0 to b > 0 over a
    step dt touches 0: exp(-a b / dt).
    """
    if not (a > 0 and b > 0 and dt > 0):
        raise ValueError(f"bridge_crossing_prob needs a, b, dt > 0 (got {a}, {b}, {dt}).")
    return math.exp(-a * b / dt)


def _bridge(a: np.ndarray, b: np.ndarray, dt: float) -> np.ndarray:
    # both ends on the positive side; anything else already crossed
    return np.where((a > 0) & (b > 0), np.exp(-np.clip(a, 0, None) * np.clip(b, 0, None) / dt), 1.0)


def run_path(
    params: StableParams,
    start: SpaceTimePoint,
    dt: float,
    horizon: float,
    rng: RngStream,
    jump_threshold: Optional[float] = None,
    box: Optional[AnisotropicBox] = None,
    bridge: bool = True,
) -> PathRecord:
    """
    Steps X from `start` until min(T_0, horizon) with exact increments.

    T_0 is declared in a step when Z ends at or below 0, or with the bridge
    probability otherwise; it is dated at the step midpoint and the boundary
    state carries the post-step horizontal position. When `box` is given its
    first exit is recorded without stopping the path.

    Args:
        jump_threshold (float, optional): Defaults to JUMP_THRESHOLD.
        bridge (bool): Apply the bridge correction for T_0.
    """
    if not 0 < dt <= horizon:
        raise ValueError(f"dt={dt} must lie in (0, horizon={horizon}].")
    threshold = get_setting("JUMP_THRESHOLD") if jump_threshold is None else float(jump_threshold)
    x0 = start.position()
    if start.on_boundary:
        return PathRecord(dt, np.array([0.0]), x0[None, :], np.array([0.0]), [], threshold, T0=0.0)

    n_steps = int(math.ceil(horizon / dt - 1e-9))
    dy = sample_stable_increment(params, dt, rng, size=n_steps)
    dz = sample_brownian_increment(dt, rng, size=n_steps)
    u = rng.generator.random(n_steps)

    ys = x0 + np.vstack([np.zeros((1, params.d)), np.cumsum(dy, axis=0)])
    zs = start.t + np.concatenate([[0.0], np.cumsum(dz)])
    times = dt * np.arange(n_steps + 1)

    crossed = zs[1:] <= 0
    if bridge:
        crossed |= u < _bridge(zs[:-1], zs[1:], dt)
    hits = np.flatnonzero(crossed)
    T0 = None
    last = n_steps
    if hits.size:
        k = int(hits[0])
        T0 = k * dt + dt / 2.0
        last = k + 1
        times = np.concatenate([times[: k + 1], [T0]])
        ys = np.vstack([ys[: k + 1], ys[k + 1][None, :]])
        zs = np.concatenate([zs[: k + 1], [0.0]])

    magnitudes = np.linalg.norm(dy[:last], axis=1)
    end = math.inf if T0 is None else T0
    jumps = [
        JumpEvent(float(min(dt * (k + 1), end)), tuple(ys[k]), tuple(ys[k + 1]))
        for k in np.flatnonzero(magnitudes > threshold)
        if k + 1 < len(ys)
    ]

    exit_event = None
    if box is not None:
        exit_event = _first_exit_on_path(box, times, ys, zs, dt, rng)

    return PathRecord(dt, times, ys, zs, jumps, threshold, T0, exit_event)


def _first_exit_on_path(box, times, ys, zs, dt, rng) -> Optional[ExitEvent]:
    lo, hi = box.t_range
    inside = box.contains(ys, zs)
    u = rng.generator.random((len(times) - 1, 2))
    p_lo = _bridge(zs[:-1] - lo, zs[1:] - lo, dt)
    p_hi = _bridge(hi - zs[:-1], hi - zs[1:], dt)
    crossing = (~inside[1:]) | (u[:, 0] < p_lo) | (u[:, 1] < p_hi)
    steps = np.flatnonzero(crossing & inside[:-1])
    if not steps.size:
        return None
    k = int(steps[0])
    face, t_exit = _classify_face(box, ys[k + 1][None, :], zs[k + 1 : k + 2], u[k : k + 1], p_lo[k : k + 1], p_hi[k : k + 1])
    return ExitEvent(times[k] + dt / 2.0, SpaceTimePoint(tuple(ys[k + 1]), float(t_exit[0])), FACE_NAMES[int(face[0])])


def _classify_face(box, x1, t1, u, p_lo, p_hi):
    lo, hi = box.t_range
    cross_lo = (t1 < lo) | (u[:, 0] < p_lo)
    cross_hi = (t1 > hi) | (u[:, 1] < p_hi)
    face = np.where(cross_lo, FACE_LOWER, np.where(cross_hi, FACE_UPPER, FACE_HORIZONTAL))
    t_exit = np.where(face == FACE_LOWER, lo, np.where(face == FACE_UPPER, hi, t1))
    return face, t_exit


def jump_census(path: PathRecord, R: float) -> int:
    """
    Number of recorded jumps of magnitude greater than R.
    """
    if R < path.threshold:
        raise ValueError(f"R={R} is below the recording threshold {path.threshold}.")
    return sum(1 for jump in path.jumps if jump.magnitude > R)


# ---------------------------------------------------------------------------
# Ensemble engines
# ---------------------------------------------------------------------------


@dataclass
class BoxExits:
    tau: np.ndarray
    positions: np.ndarray
    heights: np.ndarray
    faces: np.ndarray


@dataclass
class BoundaryHits:
    """
    Per path: T_0 (or the stopping time for stopped survivors), the
    horizontal state there, the height there (0 once absorbed), and whether
    the exact completion was used.
    """

    times: np.ndarray
    positions: np.ndarray
    heights: np.ndarray
    completed: np.ndarray

    @property
    def absorbed(self) -> np.ndarray:
        return self.heights <= 0.0


def _broadcast_starts(start, n: int, d: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(start, SpaceTimePoint):
        return np.tile(start.position(), (n, 1)), np.full(n, start.t)
    xs, ts = start
    return np.asarray(xs, dtype=float).reshape(n, d), np.asarray(ts, dtype=float).reshape(n)


def _run_chunks(body: Callable, n: int, rng: RngStream, workers: Optional[int]):
    chunks = ensemble_chunks(n)
    offsets = np.cumsum([0] + [length for _, length in chunks])
    tasks = [(index, offsets[index], length, rng.child(index)) for index, length in chunks]
    return ordered_map(body, tasks, workers)


def _exit_chunk(params, box, xs, ts, dt, rng, max_steps):
    n = len(ts)
    lo, hi = box.t_range
    hx, _ = box.half_widths
    centre = box.center.position()
    result = BoxExits(np.full(n, np.inf), xs.copy(), ts.copy(), np.zeros(n, dtype=int))
    alive = np.arange(n)
    x, t = xs.copy(), ts.copy()
    step = 0
    while alive.size and step < max_steps:
        m = alive.size
        x1 = x + sample_stable_increment(params, dt, rng, size=m)
        t1 = t + sample_brownian_increment(dt, rng, size=m)
        u = rng.generator.random((m, 2))
        p_lo = _bridge(t - lo, t1 - lo, dt)
        p_hi = _bridge(hi - t, hi - t1, dt)
        out_x = np.any(np.abs(x1 - centre) > hx, axis=1)
        exited = out_x | (t1 < lo) | (t1 > hi) | (u[:, 0] < p_lo) | (u[:, 1] < p_hi)
        if exited.any():
            face, t_exit = _classify_face(box, x1[exited], t1[exited], u[exited], p_lo[exited], p_hi[exited])
            idx = alive[exited]
            result.tau[idx] = step * dt + dt / 2.0
            result.positions[idx] = x1[exited]
            result.heights[idx] = t_exit
            result.faces[idx] = face
        keep = ~exited
        alive, x, t = alive[keep], x1[keep], t1[keep]
        step += 1
    if alive.size:
        logger.warning(f"{alive.size} paths still inside the box after {max_steps} steps")
    return result


def simulate_box_exits(
    params: StableParams,
    box: AnisotropicBox,
    start,
    n: int,
    dt: float,
    rng: RngStream,
    max_steps: int = 10**6,
    workers: Optional[int] = None,
) -> BoxExits:
    """
    First exits of n paths from `box`.

    Args:
        start (SpaceTimePoint or (xs, ts)): Common start or per-path starts.
    """
    xs, ts = _broadcast_starts(start, n, params.d)

    def body(task):
        _, offset, length, stream = task
        sl = slice(offset, offset + length)
        return _exit_chunk(params, box, xs[sl], ts[sl], dt, stream, max_steps)

    parts = _run_chunks(body, n, rng, workers)
    return BoxExits(
        np.concatenate([p.tau for p in parts]),
        np.vstack([p.positions for p in parts]),
        np.concatenate([p.heights for p in parts]),
        np.concatenate([p.faces for p in parts]),
    )


def _hit_step(target, container, x, t, x1, t1, u, dt):
    lo, hi = container.t_range
    hx, _ = container.half_widths
    entered = target.contains(x1, t1)
    exited = (
        np.any(np.abs(x1 - container.center.position()) > hx, axis=1)
        | (t1 < lo)
        | (t1 > hi)
        | (u[:, 0] < _bridge(t - lo, t1 - lo, dt))
        | (u[:, 1] < _bridge(hi - t, hi - t1, dt))
    )
    return entered, exited


def _hit_chunk(params, target, container, xs, ts, dt, rng, max_steps):
    hit = target.contains(xs, ts)
    alive = np.flatnonzero(~hit)
    x, t = xs[alive], ts[alive]
    step = 0
    while alive.size and step < max_steps:
        m = alive.size
        x1 = x + sample_stable_increment(params, dt, rng, size=m)
        t1 = t + sample_brownian_increment(dt, rng, size=m)
        u = rng.generator.random((m, 2))
        entered, exited = _hit_step(target, container, x, t, x1, t1, u, dt)
        hit[alive[entered]] = True
        keep = ~(entered | exited)
        alive, x, t = alive[keep], x1[keep], t1[keep]
        step += 1
    return hit


def _coupled_hit_chunk(params, target, container, xs, ts, dt, rng, max_steps):
    half = dt / 2.0
    hit_coarse = target.contains(xs, ts)
    hit_fine = hit_coarse.copy()
    live_coarse, live_fine = ~hit_coarse, ~hit_fine
    x_coarse, t_coarse = xs.copy(), ts.copy()
    x_fine, t_fine = xs.copy(), ts.copy()
    step = 0
    while (live_coarse.any() or live_fine.any()) and step < max_steps:
        idx = np.flatnonzero(live_coarse | live_fine)
        m = idx.size
        dy = [sample_stable_increment(params, half, rng, size=m) for _ in range(2)]
        dz = [sample_brownian_increment(half, rng, size=m) for _ in range(2)]
        u = rng.generator.random((3, m, 2))
        for k in range(2):
            sub = live_fine[idx]
            j = idx[sub]
            x1, t1 = x_fine[j] + dy[k][sub], t_fine[j] + dz[k][sub]
            entered, exited = _hit_step(target, container, x_fine[j], t_fine[j], x1, t1, u[k][sub], half)
            hit_fine[j[entered]] = True
            live_fine[j[entered | exited]] = False
            x_fine[j], t_fine[j] = x1, t1
        # the coarse step sees the sum of the two half-step increments
        sub = live_coarse[idx]
        j = idx[sub]
        x1 = x_coarse[j] + dy[0][sub] + dy[1][sub]
        t1 = t_coarse[j] + dz[0][sub] + dz[1][sub]
        entered, exited = _hit_step(target, container, x_coarse[j], t_coarse[j], x1, t1, u[2][sub], dt)
        hit_coarse[j[entered]] = True
        live_coarse[j[entered | exited]] = False
        x_coarse[j], t_coarse[j] = x1, t1
        step += 1
    return hit_coarse, hit_fine


def simulate_hits(
    params: StableParams,
    target,
    container: AnisotropicBox,
    start,
    n: int,
    dt: float,
    rng: RngStream,
    max_steps: int = 10**6,
    workers: Optional[int] = None,
) -> np.ndarray:
    """
    Whether each of n paths enters the closed `target` before leaving `container`.
    """
    xs, ts = _broadcast_starts(start, n, params.d)

    def body(task):
        _, offset, length, stream = task
        sl = slice(offset, offset + length)
        return _hit_chunk(params, target, container, xs[sl], ts[sl], dt, stream, max_steps)

    return np.concatenate(_run_chunks(body, n, rng, workers))


def simulate_hits_coupled(
    params: StableParams,
    target,
    container: AnisotropicBox,
    start,
    n: int,
    dt: float,
    rng: RngStream,
    max_steps: int = 10**6,
    workers: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    simulate_hits at step dt and dt / 2 on the same paths: each coarse
    increment is the sum of two fine ones.

    Returns:
        (coarse, fine) boolean hit arrays.
    """
    xs, ts = _broadcast_starts(start, n, params.d)

    def body(task):
        _, offset, length, stream = task
        sl = slice(offset, offset + length)
        return _coupled_hit_chunk(params, target, container, xs[sl], ts[sl], dt, stream, max_steps)

    parts = _run_chunks(body, n, rng, workers)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _boundary_chunk(params, xs, ts, dt, rng, max_time, bridge, complete):
    n = len(ts)
    times = np.full(n, np.inf)
    positions = xs.copy()
    heights = np.zeros(n)
    completed = np.zeros(n, dtype=bool)
    on_boundary = ts <= 0
    times[on_boundary] = 0.0
    alive = np.flatnonzero(~on_boundary)
    x, t = xs[alive], ts[alive]
    max_steps = int(math.ceil(max_time / dt - 1e-9))
    step = 0
    while alive.size and step < max_steps:
        m = alive.size
        x1 = x + sample_stable_increment(params, dt, rng, size=m)
        t1 = t + sample_brownian_increment(dt, rng, size=m)
        u = rng.generator.random(m)
        crossed = t1 <= 0
        if bridge:
            crossed |= u < _bridge(t, t1, dt)
        idx = alive[crossed]
        times[idx] = step * dt + dt / 2.0
        positions[idx] = x1[crossed]
        keep = ~crossed
        alive, x, t = alive[keep], x1[keep], t1[keep]
        step += 1
    if alive.size and complete:
        # exact completion: T_0 from height z is z^2 / (2 N^2), Y scales by T_0^{1/alpha}
        normal = rng.generator.standard_normal(alive.size)
        remaining = t * t / (2.0 * np.maximum(normal * normal, np.finfo(float).tiny))
        unit = sample_stable_increment(params, 1.0, rng, size=alive.size)
        times[alive] = step * dt + remaining
        positions[alive] = x + remaining[:, None] ** (1.0 / params.alpha) * unit
        completed[alive] = True
    elif alive.size:
        times[alive] = step * dt
        positions[alive] = x
        heights[alive] = t
    return BoundaryHits(times, positions, heights, completed)


def simulate_boundary_hits(
    params: StableParams,
    start,
    n: int,
    dt: float,
    rng: RngStream,
    max_time: Optional[float] = None,
    bridge: bool = True,
    complete: bool = True,
    workers: Optional[int] = None,
) -> BoundaryHits:
    """
    (T_0, Y_{T_0}) for n paths.

    Paths are stepped up to max_time (default 1000 dt). With `complete`,
    survivors are finished exactly, using that T_0 from height z has the law
    of z^2 / (2 N^2) and that Y over a duration s is s^{1/alpha} times a unit
    stable draw. Without it they are stopped at max_time, which gives
    X_{max_time ^ T_0}.
    """
    xs, ts = _broadcast_starts(start, n, params.d)
    max_time = 1000 * dt if max_time is None else max_time

    def body(task):
        _, offset, length, stream = task
        sl = slice(offset, offset + length)
        return _boundary_chunk(params, xs[sl], ts[sl], dt, stream, max_time, bridge, complete)

    parts = _run_chunks(body, n, rng, workers)
    return BoundaryHits(
        np.concatenate([p.times for p in parts]),
        np.vstack([p.positions for p in parts]),
        np.concatenate([p.heights for p in parts]),
        np.concatenate([p.completed for p in parts]),
    )


def _jump_chunk(params, horizon, dt, radii, length, rng):
    counts = np.zeros((length, len(radii)), dtype=np.int64)
    n_steps = int(math.ceil(horizon / dt - 1e-9))
    radii = np.asarray(radii, dtype=float)
    for _ in range(n_steps):
        magnitude = np.linalg.norm(sample_stable_increment(params, dt, rng, size=length), axis=1)
        counts += magnitude[:, None] > radii[None, :]
    return counts


def simulate_jump_counts(
    params: StableParams,
    horizon: float,
    dt: float,
    radii: Sequence[float],
    n: int,
    rng: RngStream,
    workers: Optional[int] = None,
) -> np.ndarray:
    """
    Per path and radius R, the number of steps over [0, horizon] whose
    horizontal increment exceeds R. Shape (n, len(radii)).
    """

    def body(task):
        _, _, length, stream = task
        return _jump_chunk(params, horizon, dt, radii, length, stream)

    return np.vstack(_run_chunks(body, n, rng, workers))


def _integral_chunk(params, func, xs, ts, lam, dt, horizon, killed, rng):
    n = len(ts)
    totals = np.zeros(n)
    alive = np.arange(n)
    x, t = xs.copy(), ts.copy()
    values = func(x, t)
    n_steps = int(math.ceil(horizon / dt - 1e-9))
    for step in range(n_steps):
        if not alive.size:
            break
        m = alive.size
        x1 = x + sample_stable_increment(params, dt, rng, size=m)
        t1 = t + sample_brownian_increment(dt, rng, size=m)
        weight = dt * math.exp(-lam * (step + 0.5) * dt)
        if killed:
            u = rng.generator.random(m)
            crossed = (t1 <= 0) | (u < _bridge(t, t1, dt))
            values1 = np.where(crossed, 0.0, func(x1, np.maximum(t1, 0.0)))
            totals[alive] += weight * 0.5 * (values + values1)
            keep = ~crossed
            alive, x, t, values = alive[keep], x1[keep], t1[keep], values1[keep]
        else:
            values1 = func(x1, t1)
            totals[alive] += weight * 0.5 * (values + values1)
            x, t, values = x1, t1, values1
    return totals


def simulate_path_integrals(
    params: StableParams,
    func: Callable[[np.ndarray, np.ndarray], np.ndarray],
    start: SpaceTimePoint,
    lam: float,
    n: int,
    dt: float,
    horizon: float,
    rng: RngStream,
    killed: bool = False,
    workers: Optional[int] = None,
) -> np.ndarray:
    """
    Per path, int_0^horizon exp(-lam s) func(X_s) ds by the trapezoid rule on
    the step lattice, stopped at T_0 when killed.

    Args:
        func (Callable): Vectorised f(xs (m, d), ts (m,)) -> (m,).
    """
    xs, ts = _broadcast_starts(start, n, params.d)

    def body(task):
        _, offset, length, stream = task
        sl = slice(offset, offset + length)
        return _integral_chunk(params, func, xs[sl], ts[sl], lam, dt, horizon, killed, stream)

    return np.concatenate(_run_chunks(body, n, rng, workers))


def exit_time_from_box(
    params: StableParams, box: AnisotropicBox, start: SpaceTimePoint, dt: float, rng: RngStream
) -> Tuple[float, SpaceTimePoint]:
    """
    First exit of one path from `box`: (tau, post-exit state).

    Vertical exits are placed just past the crossed face; horizontal exits
    keep the post-jump state. Either way the state lies outside the box.

    Raises:
        GeometryError: If the box leaves the half-space or start is outside it.
    """
    box.require_half_space()
    if not box.contains_point(start):
        raise GeometryError(f"start {start} lies outside the box.")
    result = _exit_chunk(params, box, start.position()[None, :], np.array([start.t]), dt, rng, 10**7)
    height = float(result.heights[0])
    face = int(result.faces[0])
    if face in (FACE_LOWER, FACE_UPPER):
        direction = -np.inf if face == FACE_LOWER else np.inf
        while box.contains(result.positions, np.array([height]))[0]:
            height = float(np.nextafter(height, direction))
    return float(result.tau[0]), SpaceTimePoint(tuple(result.positions[0]), height)


def hitting_before_exit(
    params: StableParams, target, container: AnisotropicBox, start: SpaceTimePoint, dt: float, rng: RngStream
) -> bool:
    """
    True iff the path enters the closed target before leaving the container.
    """
    if not container.contains_point(start):
        raise GeometryError(f"start {start} lies outside the container.")
    hit = _hit_chunk(params, target, container, start.position()[None, :], np.array([start.t]), dt, rng, 10**7)
    return bool(hit[0])


# ---------------------------------------------------------------------------
# Checks built on the engines
# ---------------------------------------------------------------------------


@dataclass
class UniformityCheck:
    counts: np.ndarray
    statistic: float
    p_value: float


def boundary_law_uniformity(
    params: StableParams,
    height: float,
    half_width: float,
    n: int,
    dt: float,
    rng: RngStream,
    bins: int = 20,
    workers: Optional[int] = None,
) -> UniformityCheck:
    """
    Starts uniform over the torus [-L, L)^d at a fixed height: the boundary
    position Y_{T_0}, wrapped back onto the torus, is again uniform.
    Tested with a chi-square goodness-of-fit over the first coordinate.
    """
    d = params.d
    start_rng = rng.child(2**31)
    xs = start_rng.generator.uniform(-half_width, half_width, (n, d))
    hits = simulate_boundary_hits(params, (xs, np.full(n, height)), n, dt, rng, workers=workers)
    wrapped = np.mod(hits.positions[:, 0] + half_width, 2.0 * half_width)
    counts, _ = np.histogram(wrapped, bins=bins, range=(0.0, 2.0 * half_width))
    statistic, p_value = stats.chisquare(counts)
    return UniformityCheck(counts, float(statistic), float(p_value))


@dataclass
class OccupationCheck:
    mean: float
    std_error: float
    n: int
    expected: float
    truncation_bound: float


def green_function_check(
    height: float,
    level: float,
    n: int,
    dt: float,
    max_time: float,
    rng: RngStream,
    workers: Optional[int] = None,
) -> OccupationCheck:
    """
    Time spent by the vertical motion below `level` before T_0, started at
    `height`, against the Green function min(a, z):

        E^a int_0^{T_0} 1{Z_s <= level} ds = int_0^level min(a, z) dz.

    Paths still alive at max_time are cut; the cut is bounded by
    a level^2 / sqrt(4 pi max_time).
    """
    a = float(height)

    def body(task):
        _, _, length, stream = task
        z = np.full(length, a)
        occupation = np.zeros(length)
        alive = np.arange(length)
        for _ in range(int(math.ceil(max_time / dt))):
            if not alive.size:
                break
            z1 = z + sample_brownian_increment(dt, stream, size=alive.size)
            crossed = (z1 <= 0) | (stream.generator.random(alive.size) < _bridge(z, z1, dt))
            occupation[alive] += dt * 0.5 * ((z <= level) + np.where(crossed, 1.0, z1 <= level))
            keep = ~crossed
            alive, z = alive[keep], z1[keep]
        return occupation

    samples = np.concatenate(_run_chunks(body, n, rng, workers))
    b = min(a, level)
    expected = b * b / 2.0 + a * max(level - a, 0.0)
    bound = a * level ** 2 / math.sqrt(4.0 * math.pi * max_time)
    return OccupationCheck(
        float(samples.mean()), float(samples.std(ddof=1) / math.sqrt(n)), n, expected, bound
    )


def write_path_dump(records: Sequence[Tuple[int, PathRecord]], stream: TextIO):
    """
    CSV rows (stream_id, time, x_1..x_d, t, event) for the given paths.

    Events: start, step, jump (a recorded jump ends at this state), T0, exit.
    """
    if not records:
        return
    d = records[0][1].positions.shape[1]
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["stream_id", "time"] + [f"x_{k + 1}" for k in range(d)] + ["t", "event"])
    for stream_id, path in records:
        jump_times = {round(j.time, 12) for j in path.jumps}
        last = len(path.times) - 1
        for k, (time, x, t) in enumerate(path.states):
            if k == 0:
                event = "start"
            elif k == last and path.T0 is not None:
                event = "T0"
            elif round(time, 12) in jump_times:
                event = "jump"
            else:
                event = "step"
            writer.writerow(
                [stream_id, format(time, ".17g")] + [format(v, ".17g") for v in x] + [format(t, ".17g"), event]
            )
        if path.exit is not None:
            writer.writerow(
                [stream_id, format(path.exit.time, ".17g")]
                + [format(v, ".17g") for v in path.exit.location.x]
                + [format(path.exit.location.t, ".17g"), "exit"]
            )
    info(f"Dumped {len(records)} paths")
