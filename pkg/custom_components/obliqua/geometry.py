"""Implicit 2-D domains D = intersection of {psi_i > 0}: normals, corners, cones."""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, partial
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq

from .base import TWO_PI, FloatArray, ObliquaError, PointLike, as_point, as_points, direction, rowdot
from .expr import EvaluationDomainError, ScalarField, VectorField
from .models import Tolerances


class GeometryError(ObliquaError):
    pass


class NotOnBoundaryError(GeometryError):
    pass


class DegenerateGradientError(GeometryError):
    pass


class AmbiguousTangentError(GeometryError):
    """Neither tangent candidate at a cusp enters the domain."""

    pass


class EmptyBoundaryError(GeometryError):
    pass


class NotACornerError(GeometryError):
    pass


class NotACuspError(GeometryError):
    pass


class NonPointedConeError(GeometryError):
    """Generators span an angle larger than pi."""

    pass


ARC_SHRINK = 1e-12
CORNER_MATCH_DISTANCE = 1e-9
TANGENT_SCALES = tuple(2.0**-k for k in range(4, 13))
CUSP_SCALES = tuple(2.0**-k for k in range(6, 21))


# Sectors


@dataclass(frozen=True)
class Sector:
    """A closed convex cone stored as the angular interval [angle_lo, angle_lo + width]."""

    angle_lo: float
    width: float
    degenerate: bool = False
    """Set when the generators are anti-parallel (width exactly pi)."""

    def __post_init__(self) -> None:
        if not (0.0 <= self.width <= math.pi + 1e-12):
            raise ValueError(f"Sector width must lie in [0, pi], got {self.width}")

    @property
    def angle_hi(self) -> float:
        return self.angle_lo + self.width

    @classmethod
    def ray(cls, v: PointLike) -> "Sector":
        return cls(math.atan2(float(v[1]), float(v[0])), 0.0)

    @classmethod
    def half_plane(cls, axis: PointLike) -> "Sector":
        """{u : u . axis >= 0}."""
        center = math.atan2(float(axis[1]), float(axis[0]))
        return cls(center - math.pi / 2, math.pi)

    @classmethod
    def spanned_by(cls, vectors: Sequence[PointLike], angle_tol: float = 1e-9) -> "Sector":
        """Smallest closed convex cone containing every nonzero vector.

        Raises:
            NonPointedConeError: If the generators span more than a half-plane.
        """
        angles = sorted(
            _wrap_angle(math.atan2(float(v[1]), float(v[0])))
            for v in vectors
            if float(np.hypot(v[0], v[1])) > 0.0
        )
        if not angles:
            raise ValueError("A sector needs at least one nonzero generator")
        if len(angles) == 1:
            return cls(angles[0], 0.0)
        gaps = [angles[k + 1] - angles[k] for k in range(len(angles) - 1)]
        gaps.append(angles[0] + TWO_PI - angles[-1])
        widest = int(np.argmax(gaps))
        width = TWO_PI - gaps[widest]
        start = angles[(widest + 1) % len(angles)]
        if width > math.pi + angle_tol:
            raise NonPointedConeError(f"Generators span {width:.12g} rad > pi")
        if width >= math.pi - angle_tol:
            return cls(start, math.pi, degenerate=True)
        return cls(start, max(width, 0.0))

    def contains(self, u: PointLike, tol: float = 1e-9) -> bool:
        if float(np.hypot(u[0], u[1])) == 0.0:
            return True
        delta = (math.atan2(float(u[1]), float(u[0])) - self.angle_lo) % TWO_PI
        return delta <= self.width + tol or delta >= TWO_PI - tol

    @property
    def midpoint(self) -> FloatArray:
        return direction(self.angle_lo + self.width / 2)

    def as_dict(self) -> dict[str, float]:
        return {"angle_lo": self.angle_lo, "angle_hi": self.angle_hi}


def _wrap_angle(angle: float) -> float:
    return angle % TWO_PI


def intersect_arcs(
    a: tuple[float, float], b: tuple[float, float]
) -> Optional[tuple[float, float]]:
    """Intersect two circular arcs given as (start, length), each of length <= pi."""
    a_start, a_len = a
    b_start, b_len = b
    offset = (b_start - a_start) % TWO_PI
    if offset <= a_len:
        return (b_start % TWO_PI, min(b_len, a_len - offset))
    if offset + b_len >= TWO_PI:
        return (a_start % TWO_PI, min(a_len, offset + b_len - TWO_PI))
    return None


def feasible_direction(cone: Sector, generators: Sequence[PointLike]) -> Optional[FloatArray]:
    """A unit vector e in `cone` with e . g > 0 for every nonzero generator, or None.

    Solved with angular intervals: each generator admits the open half circle around it.
    The witness is the midpoint of the feasible arc and is re-verified before returning.
    """
    gens = [np.asarray(g, dtype=np.float64) for g in generators]
    gens = [g / float(np.hypot(g[0], g[1])) for g in gens if float(np.hypot(g[0], g[1])) > 0.0]
    if not gens:
        return cone.midpoint
    arc: Optional[tuple[float, float]] = None
    for g in gens:
        half = (math.atan2(g[1], g[0]) - math.pi / 2, math.pi)
        arc = half if arc is None else intersect_arcs(arc, half)
        if arc is None or arc[1] <= 2 * ARC_SHRINK:
            return None
    assert arc is not None
    open_start, open_len = arc[0] + ARC_SHRINK, arc[1] - 2 * ARC_SHRINK
    if cone.width == 0.0:
        offset = (cone.angle_lo - open_start) % TWO_PI
        if offset >= open_len:
            return None
        witness = direction(cone.angle_lo)
    else:
        both = intersect_arcs((cone.angle_lo, cone.width), (open_start, open_len))
        if both is None or both[1] <= 0.0:
            return None
        witness = direction(both[0] + both[1] / 2)
    if min(float(witness @ g) for g in gens) <= 0.0 or not cone.contains(witness, ARC_SHRINK):
        logging.warning(f"Feasible arc witness {witness.tolist()} failed re-verification")
        return None
    return witness


# Domain model


@dataclass(frozen=True)
class BoundingBox:
    x1_min: float
    x2_min: float
    x1_max: float
    x2_max: float

    def grid(self, n: int, margin: float = 0.0) -> FloatArray:
        """n x n grid of points, the box enlarged by `margin` times its size on each side."""
        w, h = self.x1_max - self.x1_min, self.x2_max - self.x2_min
        xs = np.linspace(self.x1_min - margin * w, self.x1_max + margin * w, n)
        ys = np.linspace(self.x2_min - margin * h, self.x2_max + margin * h, n)
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def contains(self, xs: FloatArray, slack: float = 0.0) -> np.ndarray:
        pts = as_points(xs)
        return (
            (pts[:, 0] >= self.x1_min - slack)
            & (pts[:, 0] <= self.x1_max + slack)
            & (pts[:, 1] >= self.x2_min - slack)
            & (pts[:, 1] <= self.x2_max + slack)
        )

    @property
    def diameter(self) -> float:
        return math.hypot(self.x1_max - self.x1_min, self.x2_max - self.x2_min)


@dataclass(frozen=True)
class DomainPiece:
    name: str
    psi: ScalarField
    g: VectorField

    @property
    def grad(self) -> VectorField:
        return self.psi.gradient


@dataclass(frozen=True)
class DeclaredCorner:
    point: tuple[float, float]
    pieces: tuple[int, int]


CornerKind = Literal["cone", "cusp"]


@dataclass(frozen=True)
class Corner:
    location: tuple[float, float]
    index_set: tuple[int, int]
    kind: CornerKind
    normals: tuple[tuple[float, float], tuple[float, float]]
    tau: Optional[tuple[float, float]] = None
    cusp_limit_L: Optional[float] = None
    cusp_limit_spread: Optional[float] = None
    tau_ambiguous: bool = False
    """Both tangent candidates entered the domain (connectivity suspect)."""

    direction_jump: bool = False
    """Smooth boundary point where the reflection direction switches pieces."""

    normal_fallback: bool = False
    """A normal came from central differences because the symbolic gradient was undefined."""


@dataclass(frozen=True)
class Domain:
    """D = intersection of the pieces {psi_i > 0}, with declared corners."""

    pieces: tuple[DomainPiece, ...]
    corners: tuple[DeclaredCorner, ...]
    box: BoundingBox
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self) -> None:
        if not self.pieces:
            raise ValueError("A domain needs at least one piece")
        for corner in self.corners:
            i, j = corner.pieces
            if i == j or not (0 <= i < len(self.pieces) and 0 <= j < len(self.pieces)):
                raise ValueError(f"Corner {corner.point} has invalid piece pair {corner.pieces}")

    @property
    def m(self) -> int:
        return len(self.pieces)

    def psi_values(self, xs: PointLike, invalid: str = "nan") -> FloatArray:
        """psi_i at each point, shape (n, m)."""
        pts = as_points(xs)
        return np.column_stack([p.psi.evaluate_many(pts, invalid=invalid) for p in self.pieces])

    def contains(self, x: PointLike, slack: float = 0.0) -> bool:
        """Membership in the closure of D, allowing psi >= -slack."""
        return bool(self.contains_many(as_point(x).reshape(1, 2), slack)[0])

    def contains_many(self, xs: PointLike, slack: float = 0.0) -> np.ndarray:
        values = self.psi_values(xs)
        return np.all(values >= -slack, axis=1)

    def interior_many(self, xs: PointLike) -> np.ndarray:
        values = self.psi_values(xs)
        return np.all(values > 0, axis=1)

    def declared_corner_at(self, x: PointLike) -> Optional[DeclaredCorner]:
        pt = np.asarray(x, dtype=np.float64)
        for corner in self.corners:
            if math.hypot(pt[0] - corner.point[0], pt[1] - corner.point[1]) <= CORNER_MATCH_DISTANCE:
                return corner
        return None

    def nearest_corner(self, x: PointLike) -> tuple[Optional[DeclaredCorner], float]:
        best, best_dist = None, math.inf
        for corner in self.corners:
            dist = math.hypot(float(x[0]) - corner.point[0], float(x[1]) - corner.point[1])
            if dist < best_dist:
                best, best_dist = corner, dist
        return best, best_dist

    @cached_property
    def classified_corners(self) -> dict[tuple[float, float], Corner]:
        """Declared corners that classify cleanly, keyed by location."""
        out = {}
        for declared in self.corners:
            try:
                out[declared.point] = classify_corner(self, declared.point)
            except GeometryError as e:
                logging.warning(f"Corner {declared.point} could not be classified: {e}")
        return out

    @cached_property
    def corner_push_directions(self) -> dict[tuple[float, float], Optional[FloatArray]]:
        """Direction d in G(x0) pointing strictly into D at each classified corner."""
        return {loc: corner_push_direction(self, c) for loc, c in self.classified_corners.items()}


# Normals and index sets


def _central_difference_gradient(piece: DomainPiece, x: FloatArray, h: float = 1e-6) -> FloatArray:
    pts = np.array([x + (h, 0.0), x - (h, 0.0), x + (0.0, h), x - (0.0, h)])
    v = piece.psi.evaluate_many(pts)
    return np.array([(v[0] - v[1]) / (2 * h), (v[2] - v[3]) / (2 * h)])


def normal_with_fallback(piece: DomainPiece, x: PointLike, grad_floor: float = 1e-6) -> tuple[FloatArray, bool]:
    """Unit inward normal; central differences when the symbolic gradient is undefined."""
    pt = as_point(x)
    used_fallback = False
    try:
        grad = piece.grad.evaluate(pt)
    except EvaluationDomainError:
        grad = _central_difference_gradient(piece, pt)
        used_fallback = True
        logging.debug(f"Central-difference normal for {piece.name} at {pt.tolist()}")
    norm = float(np.hypot(grad[0], grad[1]))
    if norm <= grad_floor:
        raise DegenerateGradientError(f"|grad psi| = {norm:.3g} for piece {piece.name} at {pt.tolist()}")
    return grad / norm, used_fallback


def unit_normal(piece: DomainPiece, x: PointLike, tolerances: Optional[Tolerances] = None) -> FloatArray:
    """Unit inward normal grad(psi)/|grad(psi)| at a boundary point of the piece.

    Raises:
        NotOnBoundaryError: If |psi(x)| exceeds the boundary tolerance.
        DegenerateGradientError: If |grad psi(x)| is below the gradient floor.

    For the piece `1 - x1^2 - x2^2` the normal at (1, 0) is (-1, 0).
    """
    tol = tolerances or Tolerances()
    pt = as_point(x)
    value = piece.psi.evaluate(pt)
    if abs(value) > tol.boundary_tol:
        raise NotOnBoundaryError(f"psi = {value:.3g} for piece {piece.name} at {pt.tolist()}")
    grad = piece.grad.evaluate(pt)
    norm = float(np.hypot(grad[0], grad[1]))
    if norm <= tol.grad_floor:
        raise DegenerateGradientError(f"|grad psi| = {norm:.3g} for piece {piece.name} at {pt.tolist()}")
    return grad / norm


def normals_many(piece: DomainPiece, xs: FloatArray) -> FloatArray:
    """Unit normals at many points; NaN rows where undefined."""
    grads = piece.grad.evaluate_many(xs, invalid="nan")
    norms = np.hypot(grads[:, 0], grads[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        return grads / norms[:, None]


def index_set(domain: Domain, x: PointLike, tol: Optional[float] = None) -> frozenset[int]:
    """I(x): indices i with |psi_i(x)| <= tol; empty for interior points."""
    tol = domain.tolerances.corner_tol if tol is None else tol
    values = domain.psi_values(as_point(x).reshape(1, 2))[0]
    return frozenset(int(i) for i in np.flatnonzero(np.abs(values) <= tol))


# Corners


def _psi_along(psi: ScalarField, origin: FloatArray, axis: FloatArray, t: float) -> float:
    return psi.evaluate(origin + t * axis)


def _roots_along(psi: ScalarField, origin: FloatArray, axis: FloatArray, reach: float, n: int = 257) -> list[float]:
    """Roots t of psi(origin + t axis) in [-reach, reach], one per sign change on a grid."""
    ts = np.linspace(-reach, reach, n)
    values = psi.evaluate_many(origin + ts[:, None] * axis, invalid="nan")
    roots: list[float] = []
    for k in range(n - 1):
        a, b = values[k], values[k + 1]
        if not (np.isfinite(a) and np.isfinite(b)):
            continue
        if a == 0.0:
            roots.append(float(ts[k]))
        elif a * b < 0:
            fn = partial(_psi_along, psi, origin, axis)
            roots.append(float(brentq(fn, ts[k], ts[k + 1], xtol=max(reach * reach * 1e-12, 1e-300))))
    return roots


def _enters_domain(domain: Domain, x0: FloatArray, candidate: FloatArray, normal: FloatArray, eps: float) -> bool:
    """Whether the normal line through x0 + eps*candidate meets the interior of D near it."""
    origin = x0 + eps * candidate
    roots = [-eps, eps]
    for piece in domain.pieces:
        roots.extend(_roots_along(piece.psi, origin, normal, eps))
    roots = sorted(set(roots))
    mids = np.array([(a + b) / 2 for a, b in zip(roots[:-1], roots[1:]) if b > a])
    if mids.size == 0:
        return False
    return bool(np.any(domain.interior_many(origin + mids[:, None] * normal)))


def _cusp_offsets(domain: Domain, x0: FloatArray, tau: FloatArray, n_i: FloatArray, i: int, j: int, eps: float) -> Optional[tuple[float, float]]:
    origin = x0 + eps * tau
    offsets = []
    for index in (i, j):
        psi = domain.pieces[index].psi
        fn = partial(_psi_along, psi, origin, n_i)
        lo, hi = -eps, eps
        try:
            f_lo, f_hi = fn(lo), fn(hi)
        except EvaluationDomainError:
            return None
        if f_lo * f_hi > 0:
            return None
        offsets.append(float(brentq(fn, lo, hi, xtol=eps * eps * 1e-10, rtol=1e-15, maxiter=200)))
    return offsets[0], offsets[1]


def cusp_limit(domain: Domain, x0: FloatArray, tau: FloatArray, n_i: FloatArray, i: int, j: int) -> tuple[Optional[float], Optional[float], list[float]]:
    """Estimate L = lim (x - x0).n_i / (x - z).n_i along normal-aligned boundary pairs.

    Offsets are sampled at abscissae 2^-k along tau; consecutive ratios are Richardson
    extrapolated. Returns (L, spread of the last four extrapolants, raw ratios).
    """
    ratios: list[float] = []
    for eps in CUSP_SCALES:
        offsets = _cusp_offsets(domain, x0, tau, n_i, i, j, eps)
        if offsets is None or offsets[0] == offsets[1]:
            continue
        s_i, s_j = offsets
        ratios.append(s_i / (s_i - s_j))
    if len(ratios) < 5:
        return None, None, ratios
    extrapolated = [2 * ratios[k + 1] - ratios[k] for k in range(len(ratios) - 1)]
    tail = extrapolated[-4:]
    return tail[-1], max(tail) - min(tail), ratios


def classify_corner(domain: Domain, x0: PointLike) -> Corner:
    """Classify a declared corner as a cone point or a cusp point.

    At a cusp the tangent tau is the unit vector orthogonal to n_i whose ray enters D,
    tested on a decreasing grid of scales; the cusp limit L is estimated alongside.

    Raises:
        NotACornerError: If `x0` is not a declared corner or psi does not vanish there.
        AmbiguousTangentError: If neither tangent candidate enters D.
    """
    tol = domain.tolerances
    declared = domain.declared_corner_at(x0)
    if declared is None:
        raise NotACornerError(f"{tuple(np.asarray(x0).tolist())} is not a declared corner")
    point = np.array(declared.point, dtype=np.float64)
    i, j = declared.pieces
    for index in (i, j):
        value = domain.pieces[index].psi.evaluate(point)
        if abs(value) > tol.corner_tol:
            raise NotACornerError(f"psi_{index} = {value:.3g} at declared corner {declared.point}")
    n_i, fb_i = normal_with_fallback(domain.pieces[i], point, tol.grad_floor)
    n_j, fb_j = normal_with_fallback(domain.pieces[j], point, tol.grad_floor)
    normals = (tuple(n_i.tolist()), tuple(n_j.tolist()))
    g_i = domain.pieces[i].g.evaluate(point)
    g_j = domain.pieces[j].g.evaluate(point)
    smooth = float(np.hypot(*(n_i - n_j))) <= tol.cusp_tol
    direction_jump = smooth and float(np.hypot(*(g_i - g_j))) > tol.cusp_tol

    if float(np.hypot(*(n_i + n_j))) > tol.cusp_tol:
        return Corner(
            location=declared.point,
            index_set=(i, j),
            kind="cone",
            normals=normals,  # type: ignore[arg-type]
            direction_jump=direction_jump,
            normal_fallback=fb_i or fb_j,
        )

    candidates = [np.array([n_i[1], -n_i[0]]), np.array([-n_i[1], n_i[0]])]
    hits = [sum(_enters_domain(domain, point, c, n_i, eps) for eps in TANGENT_SCALES) for c in candidates]
    if max(hits) == 0:
        raise AmbiguousTangentError(f"No tangent candidate enters D at cusp {declared.point}")
    chosen = 0 if hits[0] >= hits[1] else 1
    tau = candidates[chosen]
    ambiguous = min(hits) > 0
    if ambiguous:
        logging.warning(f"Both tangent directions enter D at cusp {declared.point}")
    limit, spread, _ = cusp_limit(domain, point, tau, n_i, i, j)
    return Corner(
        location=declared.point,
        index_set=(i, j),
        kind="cusp",
        normals=normals,  # type: ignore[arg-type]
        tau=(float(tau[0]), float(tau[1])),
        cusp_limit_L=limit,
        cusp_limit_spread=spread,
        tau_ambiguous=ambiguous,
        normal_fallback=fb_i or fb_j,
    )


def _corner_for(domain: Domain, x0: PointLike) -> Optional[Corner]:
    declared = domain.declared_corner_at(x0)
    if declared is None:
        return None
    return domain.classified_corners.get(declared.point)


def normal_cone(domain: Domain, x0: PointLike) -> Sector:
    """Inward normal cone N(x0): a ray, the cone of two normals, or the cusp half-plane.

    Raises:
        NotOnBoundaryError: If no piece vanishes at `x0`.
    """
    corner = _corner_for(domain, x0)
    if corner is not None:
        if corner.kind == "cusp":
            assert corner.tau is not None
            return Sector.half_plane(corner.tau)
        return Sector.spanned_by(corner.normals, domain.tolerances.angle_tol)
    active = sorted(index_set(domain, x0))
    if not active:
        raise NotOnBoundaryError(f"{tuple(np.asarray(x0).tolist())} is not on the boundary")
    normals = [normal_with_fallback(domain.pieces[k], as_point(x0), domain.tolerances.grad_floor)[0] for k in active]
    return Sector.spanned_by(normals, domain.tolerances.angle_tol)


def direction_generators(domain: Domain, x0: PointLike) -> list[FloatArray]:
    corner = _corner_for(domain, x0)
    active = corner.index_set if corner is not None else tuple(sorted(index_set(domain, x0)))
    if not active:
        raise NotOnBoundaryError(f"{tuple(np.asarray(x0).tolist())} is not on the boundary")
    return [domain.pieces[k].g.evaluate(as_point(x0)) for k in active]


def direction_cone(domain: Domain, x0: PointLike) -> Sector:
    """G(x0): the cone generated by g_i(x0) for i in I(x0).

    Raises:
        NonPointedConeError: If the generators span more than pi.
    """
    return Sector.spanned_by(direction_generators(domain, x0), domain.tolerances.angle_tol)


def corner_push_direction(domain: Domain, corner: Corner) -> Optional[FloatArray]:
    """Unit d in G(x0) with d . n > 0 for both normals (d . tau > 0 at cusps)."""
    point = np.array(corner.location)
    gens = [domain.pieces[k].g.evaluate(point) for k in corner.index_set]
    try:
        cone = Sector.spanned_by(gens, domain.tolerances.angle_tol)
    except NonPointedConeError:
        return None
    if corner.kind == "cusp":
        assert corner.tau is not None
        return feasible_direction(cone, [np.array(corner.tau)])
    return feasible_direction(cone, [np.array(n) for n in corner.normals])


# Boundary sampling


def newton_project(psi: ScalarField, seeds: FloatArray, iters: int = 60, tol: float = 1e-12) -> FloatArray:
    """Project seeds onto {psi = 0} along the gradient; rows that fail become NaN."""
    x = seeds.copy()
    active = np.ones(len(x), dtype=bool)
    for _ in range(iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pts = x[idx]
        values = psi.evaluate_many(pts, invalid="nan")
        grads = psi.gradient.evaluate_many(pts, invalid="nan")
        sq = rowdot(grads, grads)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = (values / sq)[:, None] * grads
        x[idx] = pts - step
        done = np.abs(values) <= tol
        bad = ~np.isfinite(x[idx]).all(axis=1)
        x[idx[bad]] = np.nan
        active[idx[done | bad]] = False
    return x


def farthest_point_sample(points: FloatArray, count: int) -> FloatArray:
    """Greedy farthest-point subsample, starting from the lexicographically smallest point."""
    if len(points) <= count:
        return points
    order = np.lexsort((points[:, 1], points[:, 0]))
    points = points[order]
    chosen = [0]
    dist = np.hypot(*(points - points[0]).T)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.hypot(*(points - points[nxt]).T))
    return points[np.sort(chosen)]


def sample_level_set(psi: ScalarField, box: BoundingBox, count: Optional[int], tol: float = 1e-10, seeds_per_side: int = 96) -> FloatArray:
    """Quasi-uniform points on {psi = 0} inside `box`, by Newton projection of a grid."""
    projected = newton_project(psi, box.grid(seeds_per_side, margin=0.05))
    ok = np.isfinite(projected).all(axis=1)
    projected = projected[ok]
    if projected.size == 0:
        return projected.reshape(0, 2)
    values = psi.evaluate_many(projected, invalid="nan")
    keep = (np.abs(values) <= tol) & box.contains(projected, slack=1e-9)
    projected = projected[keep]
    if projected.size == 0:
        return projected.reshape(0, 2)
    projected = np.unique(np.round(projected, 12), axis=0)
    return projected if count is None else farthest_point_sample(projected, count)


def boundary_sample(domain: Domain, piece_index: int, count: int) -> FloatArray:
    """Points of the piece's boundary lying in closure(D), quasi-uniform in arclength.

    Raises:
        EmptyBoundaryError: If no projected seed lands on the boundary within closure(D).
    """
    tol = domain.tolerances
    psi = domain.pieces[piece_index].psi
    candidates = sample_level_set(psi, domain.box, count=None, tol=tol.boundary_tol)
    if candidates.size:
        values = domain.psi_values(candidates)
        others = np.delete(values, piece_index, axis=1)
        inside = np.all(others >= -tol.corner_tol, axis=1) if others.size else np.ones(len(candidates), bool)
        candidates = candidates[inside]
    if candidates.size == 0:
        raise EmptyBoundaryError(f"No boundary points of piece {domain.pieces[piece_index].name} in closure(D)")
    samples = farthest_point_sample(candidates, count)
    logging.debug(f"Sampled {len(samples)} boundary points of piece {domain.pieces[piece_index].name}")
    return samples


def undeclared_corners(domain: Domain, samples: dict[int, FloatArray]) -> list[tuple[FloatArray, tuple[int, int]]]:
    """Sampled boundary points where a second piece also vanishes away from declared corners."""
    tol = domain.tolerances
    found = []
    for i, pts in samples.items():
        if len(pts) == 0:
            continue
        values = np.abs(domain.psi_values(pts))
        for k, x in enumerate(pts):
            close = [j for j in range(domain.m) if j != i and values[k, j] <= tol.corner_tol]
            if not close:
                continue
            _, dist = domain.nearest_corner(x)
            if dist > 1e-6:
                found.append((x, (i, close[0])))
    return found


# Connectivity near cusps


def local_components(domain: Domain, x0: PointLike, radius: float, n_radii: int = 64, n_angles: int = 2**14) -> int:
    """Count connected components of D in the annulus radius/16 < |x - x0| < radius.

    Flood fill on a log-polar grid with wrap-around in angle. Heuristic: thin features
    narrower than the angular spacing are invisible.
    """
    center = as_point(x0)
    radii = radius * np.geomspace(1.0 / 16.0, 1.0, n_radii)
    angles = np.linspace(0.0, TWO_PI, n_angles, endpoint=False)
    rr, aa = np.meshgrid(radii, angles, indexing="ij")
    pts = center + np.column_stack([(rr * np.cos(aa)).ravel(), (rr * np.sin(aa)).ravel()])
    mask = domain.interior_many(pts).reshape(n_radii, n_angles)
    labels, count = ndimage.label(mask)
    if count == 0:
        return 0
    parent = list(range(count + 1))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for row in range(n_radii):
        a, b = labels[row, 0], labels[row, -1]
        if a and b:
            parent[find(a)] = find(b)
    return len({find(lbl) for lbl in range(1, count + 1)})
