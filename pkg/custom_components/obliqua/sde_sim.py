"""Path simulation for oblique reflecting diffusions.

Three constructions share one record format:

- `direct`: reflected Euler steps in real time, pushing proposals that leave the
  closure of D back along the reflection directions.
- `controlled`: the slowed-clock construction. The control clock `s` is split into an
  interior clock `lambda0` and a boundary clock `lambda1`; `time_change` recovers the
  reflected path through the right-continuous inverse of `lambda0`.
- `localized`: the direct stepper restarted with fresh noise every time the path leaves
  the active element of a cover of the closure of D (corner balls plus a remainder).
"""

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, ClassVar, Literal, Optional, Sequence, TextIO, TypeVar, Union

import numpy as np

from .base import FloatArray, PointLike, as_point, as_points, unit_rows
from .expr import MatrixField, ScalarField, VectorField, parse
from .geometry import Domain
from .reflection import (
    ProjectionFailureError,
    SimulationError,
    control_directions,
    push_one,
    reflect_many,
    violated_mask,
)
from .scenario import Scenario
from .streams import STREAM_BROWNIAN, batches, path_generator, segment_generator

SEAM_TOLERANCE = 1e-12
NODE_TOLERANCE = 1e-9
CROSSING_ITERS = 60
NOISE_CHUNK = 256
STALL_FACTOR = 50

Construction = Literal["direct", "controlled", "localized"]
CONSTRUCTIONS: tuple[Construction, ...] = ("direct", "controlled", "localized")
DirectionRule = Literal["mass", "last"]

DIFFUSE, REFLECT, BOUNDARY, HOLD, JUMP, STOPPED = range(6)
KIND_NAMES = ("diffuse", "reflect", "boundary", "hold", "jump", "stopped")

Region = Callable[[FloatArray], np.ndarray]
Out = TypeVar("Out")
Job = TypeVar("Job")


class ClockStalledError(SimulationError):
    """The interior clock never reached the requested horizon."""

    def __init__(self, message: str, record: Optional["PathRecord"] = None) -> None:
        self.record = record
        super().__init__(message)


class SeamMismatchError(SimulationError):
    pass


class CoverGapError(SimulationError):
    pass


class InvalidCoverError(SimulationError):
    pass


def steps_for(horizon: float, dt: float) -> int:
    """Number of grid steps covering [0, horizon]."""
    if horizon <= 0 or dt <= 0:
        raise ValueError(f"horizon and dt must be positive, got horizon={horizon}, dt={dt}")
    return max(1, math.ceil(horizon / dt - 1e-9))


# Records


@dataclass(frozen=True)
class Event:
    kind: str
    index: int
    point: tuple[float, float]
    target: Optional[tuple[float, float]] = None
    duration: float = 0.0

    def shifted(self, offset: int) -> "Event":
        return replace(self, index=self.index + offset)


@dataclass
class PathRecord:
    """A path on the uniform grid `t`.

    Row k of `dW` drives the step from `t[k]` to `t[k + 1]`. `boundary[k]` marks that a push
    was applied on the step arriving at `t[k]`; `gamma[k]` is its unit direction (NaN
    elsewhere). `left_limit[k]`, when present, is the state just before a jump at `t[k]`.
    `element[k]`, on localized paths, is the cover element the path runs in from `t[k]`.
    """

    t: FloatArray
    x: FloatArray
    lam: FloatArray
    gamma: FloatArray
    boundary: np.ndarray
    dW: FloatArray
    seed: int
    path_id: int
    left_limit: Optional[FloatArray] = None
    events: tuple[Event, ...] = ()
    truncated: bool = False
    element: Optional[np.ndarray] = None

    CSV_HEADER: ClassVar[tuple[str, ...]] = ("t", "x1", "x2", "lambda", "gamma1", "gamma2", "boundary_flag")

    @property
    def n_steps(self) -> int:
        return len(self.t) - 1

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0]) if self.n_steps else 0.0

    @property
    def terminal(self) -> FloatArray:
        return self.x[-1]

    def write_csv(self, handle: TextIO, thin: int = 1) -> None:
        """Write every `thin`-th grid point (the last one always) as CSV."""
        if thin < 1:
            raise ValueError(f"thin must be at least 1, got {thin}")
        rows = list(range(0, self.n_steps + 1, thin))
        if rows[-1] != self.n_steps:
            rows.append(self.n_steps)
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for k in rows:
            writer.writerow(
                [
                    repr(float(self.t[k])),
                    repr(float(self.x[k, 0])),
                    repr(float(self.x[k, 1])),
                    repr(float(self.lam[k])),
                    repr(float(self.gamma[k, 0])),
                    repr(float(self.gamma[k, 1])),
                    int(self.boundary[k]),
                ]
            )


@dataclass
class ControlledPathRecord:
    """A path of the controlled construction on the control-clock grid `s`.

    Step k moves `y[k]` to `y[k + 1]` and spends `dl0[k]` on the interior clock and
    `dl1[k]` on the boundary clock, with `dl0[k] + dl1[k] == ds`. The boundary part of a
    step comes first. Steps with `dl1[k] > 0` carry a boundary control atom at
    `contact[k]` with direction `u[k]`.
    """

    s: FloatArray
    y: FloatArray
    l0: FloatArray
    l1: FloatArray
    dl0: FloatArray
    dl1: FloatArray
    u: FloatArray
    contact: FloatArray
    kinds: tuple[str, ...]
    ds: float
    seed: int = 0
    path_id: int = 0
    events: tuple[Event, ...] = ()

    @classmethod
    def from_steps(
        cls,
        y: PointLike,
        dl0: Sequence[float],
        dl1: Sequence[float],
        ds: float,
        u: Optional[PointLike] = None,
        contact: Optional[PointLike] = None,
        kinds: Optional[Sequence[str]] = None,
        seed: int = 0,
        path_id: int = 0,
        events: tuple[Event, ...] = (),
    ) -> "ControlledPathRecord":
        """Assemble a record from per-step clock increments; the clocks are their running sums."""
        y = as_points(y)
        dl0 = np.asarray(dl0, dtype=np.float64)
        dl1 = np.asarray(dl1, dtype=np.float64)
        n = len(dl0)
        if len(y) != n + 1 or len(dl1) != n:
            raise ValueError(f"Expected {n + 1} states and {n} increments per clock, got {len(y)} and {len(dl1)}")
        u = np.full((n, 2), np.nan) if u is None else np.asarray(u, dtype=np.float64).reshape(n, 2)
        contact = np.full((n, 2), np.nan) if contact is None else np.asarray(contact, dtype=np.float64).reshape(n, 2)
        if kinds is None:
            kinds = tuple(KIND_NAMES[BOUNDARY] if b > 0 else KIND_NAMES[DIFFUSE] for b in dl1)
        return cls(
            s=np.arange(n + 1) * ds,
            y=y,
            l0=np.concatenate([[0.0], np.cumsum(dl0)]),
            l1=np.concatenate([[0.0], np.cumsum(dl1)]),
            dl0=dl0,
            dl1=dl1,
            u=u,
            contact=contact,
            kinds=tuple(kinds),
            ds=ds,
            seed=seed,
            path_id=path_id,
            events=events,
        )

    @property
    def n_steps(self) -> int:
        return len(self.s) - 1

    @property
    def atoms(self) -> list[tuple[float, tuple[float, float], tuple[float, float], float]]:
        """Boundary control atoms as (s, point, direction, mass)."""
        return [
            (
                float(self.s[k]),
                (float(self.contact[k, 0]), float(self.contact[k, 1])),
                (float(self.u[k, 0]), float(self.u[k, 1])),
                float(self.dl1[k]),
            )
            for k in np.flatnonzero(self.dl1 > 0)
        ]


AnyRecord = Union[PathRecord, ControlledPathRecord]
R = TypeVar("R", PathRecord, ControlledPathRecord)


@dataclass
class StoppedPath:
    record: AnyRecord
    region: Region
    exit_index: Optional[int]
    tau: float
    """Exit time on the record's own clock; infinite when the path never leaves."""

    @property
    def frozen(self) -> bool:
        return self.exit_index is not None


# Regions and covers


@dataclass(frozen=True)
class Ball:
    """Open ball."""

    center: tuple[float, float]
    radius: float

    def __call__(self, xs: FloatArray) -> np.ndarray:
        pts = as_points(xs)
        return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) < self.radius

    def as_implicit(self) -> "ImplicitRegion":
        c1, c2 = self.center
        r = self.radius
        return ImplicitRegion(parse(f"({r!r})^2 - (x1 - ({c1!r}))^2 - (x2 - ({c2!r}))^2"))


@dataclass(frozen=True)
class ImplicitRegion:
    """The open set {phi > 0}."""

    phi: ScalarField

    @classmethod
    def parse(cls, text: str, constants: Optional[dict[str, float]] = None) -> "ImplicitRegion":
        return cls(parse(text, constants))

    def __call__(self, xs: FloatArray) -> np.ndarray:
        return self.phi.evaluate_many(as_points(xs), invalid="nan") > 0


@dataclass(frozen=True)
class OutsideBalls:
    """Points farther than `radius` from every center; everything when there are no centers."""

    centers: tuple[tuple[float, float], ...]
    radius: float

    def __call__(self, xs: FloatArray) -> np.ndarray:
        pts = as_points(xs)
        out = np.ones(len(pts), dtype=bool)
        for c in self.centers:
            out &= np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]) > self.radius
        return out


@dataclass(frozen=True)
class Cover:
    elements: tuple[Region, ...]
    radius: float

    def __len__(self) -> int:
        return len(self.elements)

    def element_for(self, x: PointLike) -> int:
        """Index of the first element containing `x`; corner balls come first.

        Raises:
            CoverGapError: If no element contains `x`.
        """
        pt = as_point(x).reshape(1, 2)
        for i, element in enumerate(self.elements):
            if element(pt)[0]:
                return i
        raise CoverGapError(f"{pt[0].tolist()} lies in no cover element")


def default_cover_radius(domain: Domain) -> float:
    points = [np.array(c.point) for c in domain.corners]
    gaps = [float(np.hypot(*(p - q))) for i, p in enumerate(points) for q in points[i + 1 :]]
    return min([0.3, *(0.5 * g for g in gaps)])


def build_cover(domain: Domain, radius: Optional[float] = None) -> Cover:
    """Balls of `radius` around the declared corners plus the remainder beyond radius/2.

    Raises:
        InvalidCoverError: If the radius is not positive or a corner lies in the closed
            ball around another corner.
    """
    radius = default_cover_radius(domain) if radius is None else radius
    if not radius > 0:
        raise InvalidCoverError(f"Cover radius must be positive, got {radius}")
    centers = tuple(c.point for c in domain.corners)
    for i, a in enumerate(centers):
        for b in centers[i + 1 :]:
            if math.hypot(a[0] - b[0], a[1] - b[1]) <= radius:
                raise InvalidCoverError(f"Corners {a} and {b} are within the cover radius {radius}")
    balls: tuple[Region, ...] = tuple(Ball(c, radius) for c in centers)
    return Cover((*balls, OutsideBalls(centers, radius / 2.0)), radius)


# Shared step helpers


def euler_proposal(xs: FloatArray, dt: Union[float, FloatArray], dW: FloatArray, drift: FloatArray, diffusion: FloatArray) -> FloatArray:
    """x + b dt + sigma dW row by row, from evaluated drift (n, 2) and diffusion (n, 2, 2); dt may vary by row."""
    out = np.empty_like(xs)
    out[:, 0] = xs[:, 0] + drift[:, 0] * dt + (diffusion[:, 0, 0] * dW[:, 0] + diffusion[:, 0, 1] * dW[:, 1])
    out[:, 1] = xs[:, 1] + drift[:, 1] * dt + (diffusion[:, 1, 0] * dW[:, 0] + diffusion[:, 1, 1] * dW[:, 1])
    return out


def crossing_fraction(domain: Domain, start: FloatArray, end: FloatArray, iters: int = CROSSING_ITERS) -> FloatArray:
    """Largest fraction f found by bisection with start + f (end - start) still in the closure of D."""
    lo = np.zeros(len(start))
    hi = np.ones(len(start))
    delta = end - start
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        ok = domain.contains_many(start + mid[:, None] * delta)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return lo


def split_clock(interior: FloatArray, ds: float) -> tuple[FloatArray, FloatArray]:
    """Split ds into (dl0, dl1) with dl0 close to `interior` and dl0 + dl1 == ds exactly."""
    dl1 = ds - interior
    return ds - dl1, dl1


def euler_reflect_step(
    x: PointLike, dt: float, dW: PointLike, domain: Domain, b: VectorField, sigma: MatrixField
) -> tuple[FloatArray, float, Optional[FloatArray]]:
    """One reflected Euler step from a point of the closure of D.

    Returns:
        The next state, the local time increment and the unit push direction, or None
        when the proposal stayed in the closure.

    Raises:
        ProjectionFailureError: If no pushback lands in the closure of D.
    """
    pt = as_point(x).reshape(1, 2)
    prop = euler_proposal(pt, dt, as_point(dW).reshape(1, 2), b.evaluate_many(pt), sigma.evaluate_many(pt))
    if not violated_mask(domain, prop)[0]:
        return prop[0], 0.0, None
    landing, mass, direction = push_one(domain, prop[0])
    return landing, mass, direction


# Direct engine


class NoiseFeed:
    """Per-path normals drawn in fixed chunks, so a path's draws never depend on its batch.

    Each row reads its own generator through a cursor; `restart` moves a row onto the
    stream of a new segment from its next draw on.
    """

    def __init__(self, seed: int, path_ids: Sequence[int], stream: int = STREAM_BROWNIAN) -> None:
        self.seed = seed
        self.path_ids = [int(pid) for pid in path_ids]
        self.generators = [path_generator(seed, pid, stream) for pid in self.path_ids]
        self.buffer = np.empty((len(self.generators), NOISE_CHUNK, 2))
        self.cursor = np.full(len(self.generators), NOISE_CHUNK)

    def step(self) -> FloatArray:
        """The next normals of every row, shape (paths, 2)."""
        for r in np.flatnonzero(self.cursor == NOISE_CHUNK):
            self.buffer[r] = self.generators[r].standard_normal((NOISE_CHUNK, 2))
            self.cursor[r] = 0
        z = self.buffer[np.arange(len(self.generators)), self.cursor]
        self.cursor += 1
        return z

    def restart(self, row: int, segment: int) -> None:
        self.generators[row] = segment_generator(self.seed, self.path_ids[row], segment)
        self.cursor[row] = NOISE_CHUNK


@dataclass
class _Trajectories:
    x: FloatArray
    lam: FloatArray
    gamma: FloatArray
    pushed: np.ndarray
    dW: FloatArray
    element: Optional[np.ndarray] = None

    def record(self, row: int, dt: float, seed: int, path_id: int) -> PathRecord:
        n = self.dW.shape[1]
        return PathRecord(
            t=np.arange(n + 1) * dt,
            x=self.x[row].copy(),
            lam=self.lam[row].copy(),
            gamma=self.gamma[row].copy(),
            boundary=self.pushed[row].copy(),
            dW=self.dW[row].copy(),
            seed=seed,
            path_id=path_id,
            element=None if self.element is None else self.element[row].copy(),
        )


def _restart_exits(cover: Cover, xs: FloatArray, element: np.ndarray, segment: np.ndarray, feed: NoiseFeed, k: int) -> None:
    inside = np.ones(len(xs), dtype=bool)
    for idx, region in enumerate(cover.elements):
        rows = np.flatnonzero(element == idx)
        if rows.size:
            inside[rows] = region(xs[rows])
    for r in np.flatnonzero(~inside):
        segment[r] += 1
        element[r] = cover.element_for(xs[r])
        feed.restart(int(r), int(segment[r]))
        logging.debug(f"Path {feed.path_ids[r]} left its cover element at step {k}, segment {segment[r]}")


def _direct_run(
    domain: Domain,
    b: VectorField,
    sigma: MatrixField,
    x0: FloatArray,
    feed: NoiseFeed,
    n: int,
    dt: float,
    cover: Optional[Cover] = None,
) -> _Trajectories:
    """Reflected Euler over `n` steps for the rows of `feed`.

    With a cover, a row that leaves its element restarts on the next segment stream at the
    exit state, and the element of every grid point is recorded.
    """
    n_paths = len(feed.path_ids)
    x = np.empty((n_paths, n + 1, 2))
    x[:, 0] = x0
    lam = np.zeros((n_paths, n + 1))
    gamma = np.full((n_paths, n + 1, 2), np.nan)
    pushed = np.zeros((n_paths, n + 1), dtype=bool)
    dW = np.empty((n_paths, n, 2))
    ids = feed.path_ids
    tags = None
    if cover is not None:
        element = np.array([cover.element_for(p) for p in x0], dtype=np.int64)
        segment = np.zeros(n_paths, dtype=np.int64)
        tags = np.empty((n_paths, n + 1), dtype=np.int64)
        tags[:, 0] = element
    root = math.sqrt(dt)
    for k in range(n):
        cur = x[:, k]
        dW[:, k] = feed.step() * root
        prop = euler_proposal(cur, dt, dW[:, k], b.evaluate_many(cur), sigma.evaluate_many(cur))
        result = reflect_many(domain, prop, step=k, path_ids=ids)
        x[:, k + 1] = result.x
        lam[:, k + 1] = lam[:, k] + result.mass
        gamma[:, k + 1] = result.direction
        pushed[:, k + 1] = result.pushed
        if tags is not None:
            if k + 1 < n:
                _restart_exits(cover, x[:, k + 1], element, segment, feed, k + 1)
            tags[:, k + 1] = element
    return _Trajectories(x, lam, gamma, pushed, dW, tags)


def _initial_points(scenario: Scenario, seed: int, path_ids: Sequence[int]) -> FloatArray:
    return np.array([scenario.initial_point(seed, pid) for pid in path_ids]).reshape(len(path_ids), 2)


def simulate_path(scenario: Scenario, seed: int, path_id: int, T: float, dt: float) -> PathRecord:
    """Direct reflected Euler path over ceil(T/dt) steps, deterministic in (seed, path_id, dt, T).

    Raises:
        ProjectionFailureError: With the failing step index and path id.
    """
    x0 = _initial_points(scenario, seed, [path_id])
    traj = _direct_run(scenario.domain, scenario.b, scenario.sigma, x0, NoiseFeed(seed, [path_id]), steps_for(T, dt), dt)
    return traj.record(0, dt, seed, path_id)


# Stopping and pasting


def _first_exit(states: FloatArray, region: Region, left_limit: Optional[FloatArray] = None) -> Optional[int]:
    outside = ~np.asarray(region(states), dtype=bool)
    if left_limit is not None:
        has_left = np.isfinite(left_limit).all(axis=1)
        outside |= has_left & ~np.asarray(region(np.where(has_left[:, None], left_limit, states)), dtype=bool)
    hits = np.flatnonzero(outside)
    return int(hits[0]) if hits.size else None


def _freeze_path(p: PathRecord, e: int) -> PathRecord:
    x, lam, gamma, boundary, dW = p.x.copy(), p.lam.copy(), p.gamma.copy(), p.boundary.copy(), p.dW.copy()
    x[e + 1 :] = x[e]
    lam[e + 1 :] = lam[e]
    gamma[e + 1 :] = np.nan
    boundary[e + 1 :] = False
    dW[e:] = 0.0
    left = None
    if p.left_limit is not None:
        left = p.left_limit.copy()
        left[e + 1 :] = np.nan
    element = None
    if p.element is not None:
        element = p.element.copy()
        element[e + 1 :] = element[e]
    events = tuple(ev for ev in p.events if ev.index <= e)
    return replace(p, x=x, lam=lam, gamma=gamma, boundary=boundary, dW=dW, left_limit=left, events=events, element=element)


def _freeze_controlled(p: ControlledPathRecord, e: int) -> ControlledPathRecord:
    y, l0, l1 = p.y.copy(), p.l0.copy(), p.l1.copy()
    dl0, dl1, u, contact = p.dl0.copy(), p.dl1.copy(), p.u.copy(), p.contact.copy()
    y[e + 1 :] = y[e]
    l0[e + 1 :] = l0[e]
    l1[e + 1 :] = l1[e]
    dl0[e:] = 0.0
    dl1[e:] = 0.0
    u[e:] = np.nan
    contact[e:] = np.nan
    kinds = p.kinds[:e] + (KIND_NAMES[STOPPED],) * (p.n_steps - e)
    events = tuple(ev for ev in p.events if ev.index < e)
    return replace(p, y=y, l0=l0, l1=l1, dl0=dl0, dl1=dl1, u=u, contact=contact, kinds=kinds, events=events)


def stop_at_exit(p: AnyRecord, region: Region) -> StoppedPath:
    """Stop a record at the first grid index where it, or its left limit, lies outside `region`.

    Everything after the exit index is frozen; a path that never leaves keeps its record
    and gets tau = inf.
    """
    if isinstance(p, ControlledPathRecord):
        e = _first_exit(p.y, region)
        if e is None:
            return StoppedPath(p, region, None, math.inf)
        return StoppedPath(_freeze_controlled(p, e), region, e, float(p.s[e]))
    e = _first_exit(p.x, region, p.left_limit)
    if e is None:
        return StoppedPath(p, region, None, math.inf)
    return StoppedPath(_freeze_path(p, e), region, e, float(p.t[e]))


def _check_seam(a: FloatArray, b: FloatArray) -> None:
    gap = float(np.hypot(a[0] - b[0], a[1] - b[1]))
    if not gap <= SEAM_TOLERANCE:
        raise SeamMismatchError(f"Continuation starts {gap:.3e} away from the head's exit state")


def _paste_path(head: PathRecord, e: int, cont: PathRecord) -> PathRecord:
    _check_seam(head.x[e], cont.x[0])
    if head.n_steps and cont.n_steps and not math.isclose(head.dt, cont.dt, rel_tol=1e-12):
        raise SeamMismatchError(f"Step sizes differ across the seam: {head.dt} and {cont.dt}")
    left = None
    if head.left_limit is not None or cont.left_limit is not None:
        a = head.left_limit if head.left_limit is not None else np.full_like(head.x, np.nan)
        c = cont.left_limit if cont.left_limit is not None else np.full_like(cont.x, np.nan)
        left = np.concatenate([a[: e + 1], c[1:]])
    element = None
    if head.element is not None or cont.element is not None:
        before = head.element if head.element is not None else np.full(len(head.x), -1)
        after = cont.element if cont.element is not None else np.full(len(cont.x), -1)
        element = np.concatenate([before[: e + 1], after[1:]])
    return PathRecord(
        t=np.concatenate([head.t[: e + 1], head.t[e] + cont.t[1:]]),
        x=np.concatenate([head.x[: e + 1], cont.x[1:]]),
        lam=np.concatenate([head.lam[: e + 1], head.lam[e] + cont.lam[1:]]),
        gamma=np.concatenate([head.gamma[: e + 1], cont.gamma[1:]]),
        boundary=np.concatenate([head.boundary[: e + 1], cont.boundary[1:]]),
        dW=np.concatenate([head.dW[:e], cont.dW]),
        seed=head.seed,
        path_id=head.path_id,
        left_limit=left,
        events=tuple(ev for ev in head.events if ev.index <= e) + tuple(ev.shifted(e) for ev in cont.events),
        truncated=cont.truncated,
        element=element,
    )


def _paste_controlled(head: ControlledPathRecord, e: int, cont: ControlledPathRecord) -> ControlledPathRecord:
    _check_seam(head.y[e], cont.y[0])
    if not math.isclose(head.ds, cont.ds, rel_tol=1e-12):
        raise SeamMismatchError(f"Control steps differ across the seam: {head.ds} and {cont.ds}")
    return ControlledPathRecord(
        s=np.concatenate([head.s[: e + 1], head.s[e] + cont.s[1:]]),
        y=np.concatenate([head.y[: e + 1], cont.y[1:]]),
        l0=np.concatenate([head.l0[: e + 1], head.l0[e] + cont.l0[1:]]),
        l1=np.concatenate([head.l1[: e + 1], head.l1[e] + cont.l1[1:]]),
        dl0=np.concatenate([head.dl0[:e], cont.dl0]),
        dl1=np.concatenate([head.dl1[:e], cont.dl1]),
        u=np.concatenate([head.u[:e], cont.u]),
        contact=np.concatenate([head.contact[:e], cont.contact]),
        kinds=head.kinds[:e] + cont.kinds,
        ds=head.ds,
        seed=head.seed,
        path_id=head.path_id,
        events=tuple(ev for ev in head.events if ev.index < e) + tuple(ev.shifted(e) for ev in cont.events),
    )


def paste(head: StoppedPath, continuation: R) -> R:
    """Concatenate a stopped head with a continuation started from its exit state.

    Clocks add across the seam: lam(tau + s) = lam_head(tau) + lam_cont(s).

    Raises:
        SeamMismatchError: If the head never exits, or the continuation starts elsewhere
            or on a different step size.
    """
    if head.exit_index is None:
        raise SeamMismatchError("The head never leaves its region, there is no seam to paste at")
    if isinstance(head.record, ControlledPathRecord) and isinstance(continuation, ControlledPathRecord):
        return _paste_controlled(head.record, head.exit_index, continuation)  # type: ignore[return-value]
    if isinstance(head.record, PathRecord) and isinstance(continuation, PathRecord):
        return _paste_path(head.record, head.exit_index, continuation)  # type: ignore[return-value]
    raise TypeError(f"Cannot paste {type(continuation).__name__} onto {type(head.record).__name__}")


# Localized construction


def localized_simulate(scenario: Scenario, cover: Cover, seed: int, T: float, dt: float, path_id: int = 0) -> PathRecord:
    """Direct path that starts a new segment, pasted at the exit state, whenever it leaves its cover element.

    Segment j > 0 draws from its own noise stream. The record tags the active element at
    every grid point in `element`.

    Raises:
        CoverGapError: If a visited state lies in no cover element.
    """
    x0 = _initial_points(scenario, seed, [path_id])
    feed = NoiseFeed(seed, [path_id])
    traj = _direct_run(scenario.domain, scenario.b, scenario.sigma, x0, feed, steps_for(T, dt), dt, cover)
    return traj.record(0, dt, seed, path_id)


# Controlled construction


@dataclass
class ControlledStep:
    y: FloatArray
    dl0: FloatArray
    dl1: FloatArray
    u: FloatArray
    contact: FloatArray
    kind: np.ndarray
    owed: Optional[FloatArray] = None
    """Boundary-clock time still owed after this step, for steppers that carry it."""

    push: Optional[FloatArray] = None


def _directions(domain: Domain, xs: FloatArray, step: int, path_ids: np.ndarray) -> FloatArray:
    d = control_directions(domain, xs)
    bad = ~np.isfinite(d).all(axis=1)
    if np.any(bad):
        raise ProjectionFailureError(f"No boundary control direction at {xs[bad][0].tolist()}", step, int(path_ids[bad][0]))
    return d


def _pushed_back(domain: Domain, xs: FloatArray, step: int, path_ids: np.ndarray) -> FloatArray:
    return reflect_many(domain, xs, step=step, path_ids=[int(p) for p in path_ids]).x


def controlled_step(
    domain: Domain,
    y: FloatArray,
    dW: FloatArray,
    drift: FloatArray,
    diffusion: FloatArray,
    ds: float,
    step: int,
    path_ids: np.ndarray,
    owed: Optional[FloatArray] = None,
    push: Optional[FloatArray] = None,
) -> ControlledStep:
    """Advance a batch by one control step of length ds.

    A row owing boundary time spends first, in place on the boundary clock along its push
    direction, at most ds of it. The rest of the step is an Euler step of that length on
    the interior clock. A proposal leaving the closure is pushed back at once and its push
    mass becomes owed for the next step. A row resting on the boundary with no push behind
    it (a start or landing point) moves by u ds along the control direction with dl1 = ds.
    """
    tol = domain.tolerances
    n = len(y)
    owed = np.zeros(n) if owed is None else owed.copy()
    push = np.full((n, 2), np.nan) if push is None else push.copy()
    out = ControlledStep(
        y=y.copy(),
        dl0=np.full(n, ds),
        dl1=np.zeros(n),
        u=np.full((n, 2), np.nan),
        contact=np.full((n, 2), np.nan),
        kind=np.full(n, DIFFUSE),
        owed=owed,
        push=push,
    )
    owing = owed > 0
    rows = np.flatnonzero(owing)
    if rows.size:
        spent = np.minimum(owed[rows], ds)
        out.dl0[rows], out.dl1[rows] = split_clock(ds - spent, ds)
        out.u[rows] = push[rows]
        out.contact[rows] = y[rows]
        out.kind[rows] = BOUNDARY
        owed[rows] = owed[rows] - spent
    resting = ~owing & np.isnan(push[:, 0]) & ~np.all(domain.psi_values(y) > tol.boundary_tol, axis=1)
    rows = np.flatnonzero(resting)
    if rows.size:
        d = _directions(domain, y[rows], step, path_ids[rows])
        out.y[rows] = _pushed_back(domain, y[rows] + d * ds, step, path_ids[rows])
        out.dl0[rows] = 0.0
        out.dl1[rows] = ds
        out.u[rows] = d
        out.contact[rows] = y[rows]
        out.kind[rows] = BOUNDARY
    rows = np.flatnonzero(~resting & (out.dl0 > 0))
    if rows.size:
        h = out.dl0[rows]
        scaled = dW[rows] * np.sqrt(h / ds)[:, None]
        prop = euler_proposal(y[rows], h, scaled, drift[rows], diffusion[rows])
        result = reflect_many(domain, prop, step=step, path_ids=[int(p) for p in path_ids[rows]])
        out.y[rows] = result.x
        push[rows] = np.nan
        hit = rows[result.pushed]
        owed[hit] = result.mass[result.pushed]
        push[hit] = result.direction[result.pushed]
        out.kind[hit] = REFLECT
    return out


StepFn = Callable[[int, np.ndarray, FloatArray, FloatArray, float], ControlledStep]
"""(step index, batch rows, states, Brownian increments, ds) -> outcome of the step."""


@dataclass
class ControlledRun:
    y_final: FloatArray
    l1_final: FloatArray
    lengths: np.ndarray
    reached: np.ndarray
    history: Optional[list[tuple[np.ndarray, ControlledStep]]] = None

    def record(self, row: int, y0: FloatArray, ds: float, seed: int, path_id: int, events: tuple[Event, ...] = ()) -> ControlledPathRecord:
        """The full record of one row; needs a run made with `keep=True`."""
        assert self.history is not None
        n = int(self.lengths[row])
        ys, dl0, dl1, us, contacts, kinds = [y0[row]], [], [], [], [], []
        for idx, step in self.history[:n]:
            pos = int(np.searchsorted(idx, row))
            assert idx[pos] == row
            ys.append(step.y[pos])
            dl0.append(step.dl0[pos])
            dl1.append(step.dl1[pos])
            us.append(step.u[pos])
            contacts.append(step.contact[pos])
            kinds.append(KIND_NAMES[int(step.kind[pos])])
        return ControlledPathRecord.from_steps(
            np.array(ys),
            dl0,
            dl1,
            ds,
            u=np.array(us).reshape(n, 2),
            contact=np.array(contacts).reshape(n, 2),
            kinds=kinds,
            seed=seed,
            path_id=path_id,
            events=events,
        )


def run_controlled(
    y0: FloatArray,
    seed: int,
    path_ids: Sequence[int],
    ds: float,
    n_max: int,
    step_fn: StepFn,
    until_l0: Optional[float] = None,
    keep: bool = True,
    settle: bool = True,
) -> ControlledRun:
    """Drive a batch through at most `n_max` control steps.

    With `until_l0`, `y_final` is the state at the clock inverse of the target, the node
    `time_change` would pick, and `l1_final` the boundary clock when lambda0 leaves that
    node's level; a row stops at the step where that happens. Without `settle` a row stops
    as soon as its node is known and `l1_final` is the boundary clock at that node.
    """
    y = y0.copy()
    l0 = np.zeros(len(y))
    l1 = np.zeros(len(y))
    y_final, l1_final = y.copy(), l1.copy()
    level = np.full(len(y), np.nan)
    active = np.ones(len(y), dtype=bool)
    reached = np.full(len(y), until_l0 is None)
    lengths = np.full(len(y), n_max)
    feed = NoiseFeed(seed, path_ids)
    root = math.sqrt(ds)
    tol = NODE_TOLERANCE * ds
    history: Optional[list[tuple[np.ndarray, ControlledStep]]] = [] if keep else None
    for k in range(n_max):
        z = feed.step()
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        cur = y[idx]
        step = step_fn(k, idx, cur, z[idx] * root, ds)
        new_l0 = l0[idx] + step.dl0
        new_l1 = l1[idx] + step.dl1
        if history is not None:
            history.append((idx, step))
        if until_l0 is not None:
            lv = level[idx]
            over = np.isnan(lv) & (new_l0 > until_l0 + tol)
            behind = l0[idx] < until_l0 - tol
            take_new = over & behind
            take_old = over & ~behind
            y_final[idx[take_old]] = cur[take_old]
            lv[take_old] = l0[idx[take_old]]
            y_final[idx[take_new]] = step.y[take_new]
            lv[take_new] = new_l0[take_new]
            level[idx] = lv
            if settle:
                left = new_l0 > lv + tol
                l1_final[idx[left]] = new_l1[left]
            else:
                left = over
                l1_final[idx[take_old]] = l1[idx[take_old]]
                l1_final[idx[take_new]] = new_l1[take_new]
            done = idx[left]
            active[done] = False
            reached[done] = True
            lengths[done] = k + 1
        y[idx] = step.y
        l0[idx] = new_l0
        l1[idx] = new_l1
    if until_l0 is None:
        y_final, l1_final = y.copy(), l1.copy()
    return ControlledRun(y_final, l1_final, lengths, reached, history)


class _ReflectingStepper:
    """Control steps for a fixed set of paths, carrying each row's owed boundary time."""

    def __init__(self, scenario: Scenario, path_ids: Sequence[int]) -> None:
        self.domain, self.b, self.sigma = scenario.domain, scenario.b, scenario.sigma
        self.ids = np.asarray(path_ids, dtype=np.int64)
        self.owed = np.zeros(len(self.ids))
        self.push = np.full((len(self.ids), 2), np.nan)

    def __call__(self, k: int, idx: np.ndarray, cur: FloatArray, dW: FloatArray, ds: float) -> ControlledStep:
        step = controlled_step(
            self.domain, cur, dW, self.b.evaluate_many(cur), self.sigma.evaluate_many(cur), ds, k, self.ids[idx], self.owed[idx], self.push[idx]
        )
        assert step.owed is not None and step.push is not None
        self.owed[idx] = step.owed
        self.push[idx] = step.push
        return step


def simulate_controlled(
    scenario: Scenario, seed: int, path_id: int, S: float, ds: float, until_l0: Optional[float] = None
) -> ControlledPathRecord:
    """Controlled construction over ceil(S/ds) control steps.

    With `until_l0` the run ends early, once lambda0 has passed that level and left the
    level of the node read at it, which is all `time_change` needs for a horizon of `until_l0`.
    """
    y0 = _initial_points(scenario, seed, [path_id])
    run = run_controlled(y0, seed, [path_id], ds, steps_for(S, ds), _ReflectingStepper(scenario, [path_id]), until_l0)
    return run.record(0, y0, ds, seed, path_id)


def clock_inverse(l0: FloatArray, t: FloatArray, tol: float) -> np.ndarray:
    """Right-continuous inverse of a nondecreasing clock on its grid.

    Node k is the last node with l0 <= t + tol when l0[k] >= t - tol, otherwise the next one.

    Examples:
        >>> clock_inverse(np.array([0.0, 1.0, 1.0, 2.0]), np.array([0.0, 1.0, 1.5]), 1e-12).tolist()
        [0, 2, 3]
    """
    last = len(l0) - 1
    k = np.clip(np.searchsorted(l0, t + tol, side="right") - 1, 0, last)
    return np.where(l0[k] < t - tol, np.minimum(k + 1, last), k)


def time_change(
    cp: ControlledPathRecord,
    horizon: Optional[float] = None,
    dt: Optional[float] = None,
    direction_rule: DirectionRule = "mass",
    on_stall: Literal["raise", "truncate"] = "raise",
) -> PathRecord:
    """Map a controlled record to real time, X(t) = Y(lambda0^{-1}(t)).

    Boundary mass between consecutive lambda0 levels becomes the local time increment;
    its direction is the mass-weighted mean of the atom directions ("mass") or the last
    atom's direction ("last"). The local time at t counts the boundary time spent before
    lambda0 leaves the level of the node X(t) is read from.

    Raises:
        ClockStalledError: If lambda0 ends below the horizon and `on_stall` is "raise".
            The truncated record is attached to the error.
    """
    if direction_rule not in ("mass", "last"):
        raise ValueError(f"direction_rule must be 'mass' or 'last', got {direction_rule!r}")
    horizon = float(cp.l0[-1]) if horizon is None else horizon
    dt = cp.ds if dt is None else dt
    tol = NODE_TOLERANCE * cp.ds
    t = np.arange(steps_for(horizon, dt) + 1) * dt if horizon > 0 else np.zeros(1)
    stalled = bool(cp.l0[-1] < t[-1] - tol)
    if stalled:
        t = t[t <= cp.l0[-1] + tol]
    nodes = clock_inverse(cp.l0, t, tol)
    # boundary time owed at a node is spent before lambda0 moves on
    leave = np.minimum(np.searchsorted(cp.l0, cp.l0[nodes] + tol, side="right"), cp.n_steps)
    prev = np.concatenate([[0], leave[:-1]])
    positive = cp.dl1 > 0
    counts = np.concatenate([[0], np.cumsum(positive)])
    boundary = counts[leave] - counts[prev] > 0
    gamma = np.full((len(t), 2), np.nan)
    if direction_rule == "mass":
        weighted = np.where(positive[:, None], cp.dl1[:, None] * np.nan_to_num(cp.u), 0.0)
        cum = np.vstack([np.zeros((1, 2)), np.cumsum(weighted, axis=0)])
        gamma[boundary] = unit_rows(cum[leave] - cum[prev])[boundary]
    else:
        last = np.maximum.accumulate(np.where(positive, np.arange(cp.n_steps), -1)) if cp.n_steps else np.zeros(0, int)
        for j in np.flatnonzero(boundary):
            gamma[j] = cp.u[last[leave[j] - 1]]
    events = tuple(replace(ev, index=int(np.searchsorted(nodes, ev.index, side="left"))) for ev in cp.events)
    record = PathRecord(
        t=t,
        x=cp.y[nodes].copy(),
        lam=cp.l1[leave].copy(),
        gamma=gamma,
        boundary=boundary,
        dW=np.full((len(t) - 1, 2), np.nan),
        seed=cp.seed,
        path_id=cp.path_id,
        events=events,
        truncated=stalled,
    )
    if stalled:
        message = f"Interior clock of path {cp.path_id} stops at {float(cp.l0[-1]):.6g}, below the horizon {horizon:.6g}"
        logging.warning(message)
        if on_stall == "raise":
            raise ClockStalledError(message, record)
    return record


# Batches


@dataclass
class TerminalSample:
    """Terminal states and local times, rows in ascending path id."""

    path_ids: np.ndarray
    x: FloatArray
    lam: FloatArray
    seed: int
    construction: str


@dataclass(frozen=True)
class _Job:
    scenario: Scenario
    seed: int
    path_ids: tuple[int, ...]
    T: float
    dt: float
    construction: Construction
    cover_radius: Optional[float]


def _check_construction(construction: str) -> None:
    if construction not in CONSTRUCTIONS:
        raise ValueError(f"Unknown construction {construction!r}, expected one of {list(CONSTRUCTIONS)}")


def _direct_batch(job: _Job, localized: bool) -> _Trajectories:
    scenario = job.scenario
    cover = build_cover(scenario.domain, job.cover_radius) if localized else None
    x0 = _initial_points(scenario, job.seed, job.path_ids)
    feed = NoiseFeed(job.seed, job.path_ids)
    return _direct_run(scenario.domain, scenario.b, scenario.sigma, x0, feed, steps_for(job.T, job.dt), job.dt, cover)


def _terminal_job(job: _Job) -> tuple[FloatArray, FloatArray]:
    logging.debug(f"Terminal batch of {len(job.path_ids)} paths from {job.path_ids[0]} ({job.construction})")
    if job.construction == "controlled":
        y0 = _initial_points(job.scenario, job.seed, job.path_ids)
        n_max = STALL_FACTOR * steps_for(job.T, job.dt)
        stepper = _ReflectingStepper(job.scenario, job.path_ids)
        run = run_controlled(y0, job.seed, job.path_ids, job.dt, n_max, stepper, until_l0=job.T, keep=False)
        if not np.all(run.reached):
            pid = job.path_ids[int(np.argmin(run.reached))]
            raise ClockStalledError(f"Interior clock of path {pid} did not reach {job.T} within {n_max} control steps")
        return run.y_final, run.l1_final
    traj = _direct_batch(job, localized=job.construction == "localized")
    return traj.x[:, -1].copy(), traj.lam[:, -1].copy()


def _record_job(job: _Job) -> list[PathRecord]:
    if job.construction == "controlled":
        S = STALL_FACTOR * job.T
        return [
            time_change(simulate_controlled(job.scenario, job.seed, pid, S, job.dt, until_l0=job.T), horizon=job.T, dt=job.dt)
            for pid in job.path_ids
        ]
    traj = _direct_batch(job, localized=job.construction == "localized")
    return [traj.record(r, job.dt, job.seed, pid) for r, pid in enumerate(job.path_ids)]


def dispatch(fn: Callable[[Job], Out], jobs: Sequence[Job], workers: int) -> list[Out]:
    """Run `fn` over `jobs` in order, in worker processes when `workers` > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _jobs(scenario: Scenario, seed: int, path_ids: Sequence[int], T: float, dt: float, construction: Construction, cover_radius: Optional[float]) -> list[_Job]:
    _check_construction(construction)
    radius = scenario.run.cover_radius if cover_radius is None else cover_radius
    return [_Job(scenario, seed, tuple(group), T, dt, construction, radius) for group in batches(list(path_ids))]


def simulate_batch(
    scenario: Scenario,
    seed: int,
    path_ids: Sequence[int],
    T: float,
    dt: float,
    construction: Construction = "direct",
    workers: int = 1,
    cover_radius: Optional[float] = None,
) -> list[PathRecord]:
    """Full records for the given paths, in ascending path id.

    Paths are grouped into fixed batches by id, so the output does not depend on `workers`.
    """
    jobs = _jobs(scenario, seed, path_ids, T, dt, construction, cover_radius)
    return [rec for group in dispatch(_record_job, jobs, workers) for rec in group]


def simulate_terminal(
    scenario: Scenario,
    seed: int,
    n_paths: int,
    T: float,
    dt: float,
    construction: Construction = "direct",
    workers: int = 1,
    cover_radius: Optional[float] = None,
) -> TerminalSample:
    """Terminal states X(T) and local times lambda(T) of paths 0..n_paths-1."""
    if n_paths < 1:
        raise ValueError(f"n_paths must be at least 1, got {n_paths}")
    jobs = _jobs(scenario, seed, range(n_paths), T, dt, construction, cover_radius)
    results = dispatch(_terminal_job, jobs, workers)
    sample = TerminalSample(
        path_ids=np.concatenate([np.array(job.path_ids, dtype=np.int64) for job in jobs]),
        x=np.concatenate([x for x, _ in results]),
        lam=np.concatenate([lam for _, lam in results]),
        seed=seed,
        construction=construction,
    )
    logging.info(f"Simulated {n_paths} {construction} paths of {scenario.name} to T={T} with dt={dt}")
    return sample
