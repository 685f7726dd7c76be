"""Convex polygons D = {x : x . n_i > b_i} with constant reflection directions g_i."""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .base import TWO_PI, FloatArray, ObliquaError, point_key
from .conditions import check_G2
from .expr import VectorField, parse
from .geometry import BoundingBox, DeclaredCorner, Domain, DomainPiece, Sector, feasible_direction
from .models import CheckReport, CheckStatus, Tolerances, Witness

TIE_TOL = 1e-10
DET_FLOOR = 1e-12
MERGE_DISTANCE = 1e-9


class UnboundedOrEmptyError(ObliquaError):
    pass


class PolygonSpec(BaseModel):
    """Half-plane description of a convex polygon with one reflection direction per side.

    Normals and directions are normalized on construction; offsets are rescaled with their normals.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    normals: list[tuple[float, float]] = Field(min_length=1)
    """Inward unit normals n_i, pairwise distinct."""

    offsets: list[float]
    """Offsets b_i of the constraints x . n_i > b_i."""

    directions: list[tuple[float, float]]
    """Reflection directions g_i."""

    @model_validator(mode="before")
    @classmethod
    def _normalize(cls, data: dict) -> dict:
        if not isinstance(data, dict):
            return data
        out = dict(data)
        norms: dict[str, list[float]] = {}
        for key in ("normals", "directions"):
            vectors, norms[key] = [], []
            for v in out.get(key, []):
                norm = math.hypot(float(v[0]), float(v[1]))
                if norm == 0.0:
                    raise ValueError(f"{key} contains a zero vector")
                vectors.append((float(v[0]) / norm, float(v[1]) / norm))
                norms[key].append(norm)
            out[key] = vectors
        offsets = out.get("offsets")
        # x . n > b is the same constraint as x . n/|n| > b/|n|
        if isinstance(offsets, (list, tuple)) and len(offsets) == len(norms["normals"]):
            out["offsets"] = [float(b) / norm for b, norm in zip(offsets, norms["normals"])]
        return out

    @model_validator(mode="after")
    def _consistent(self) -> "PolygonSpec":
        if not (len(self.normals) == len(self.offsets) == len(self.directions)):
            raise ValueError(
                f"normals, offsets and directions differ in length: "
                f"{len(self.normals)}, {len(self.offsets)}, {len(self.directions)}"
            )
        for (i, a), (j, b) in itertools.combinations(enumerate(self.normals), 2):
            if math.hypot(a[0] - b[0], a[1] - b[1]) <= TIE_TOL:
                raise ValueError(f"Normals {i} and {j} coincide")
        return self

    @property
    def m(self) -> int:
        return len(self.normals)

    @property
    def normal_array(self) -> FloatArray:
        return np.array(self.normals, dtype=np.float64)

    @property
    def offset_array(self) -> FloatArray:
        return np.array(self.offsets, dtype=np.float64)

    @property
    def direction_array(self) -> FloatArray:
        return np.array(self.directions, dtype=np.float64)

    def without(self, j: int) -> "PolygonSpec":
        keep = [k for k in range(self.m) if k != j]
        return PolygonSpec(
            normals=[self.normals[k] for k in keep],
            offsets=[self.offsets[k] for k in keep],
            directions=[self.directions[k] for k in keep],
        )


@dataclass(frozen=True)
class Vertex:
    point: tuple[float, float]
    active: frozenset[int]


@dataclass(frozen=True)
class ReflectionSubmatrix:
    """Entries n_i . g_j for i, j in the index set, rows by normal."""

    index_set: tuple[int, ...]
    matrix: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        k = len(self.index_set)
        if k not in (1, 2) or len(self.matrix) != k or any(len(row) != k for row in self.matrix):
            raise ValueError(f"Expected a square 1x1 or 2x2 matrix, got {self.matrix}")

    @classmethod
    def of(cls, poly: PolygonSpec, index_set: tuple[int, ...]) -> "ReflectionSubmatrix":
        n, g = poly.normal_array, poly.direction_array
        matrix = tuple(tuple(float(n[i] @ g[j]) for j in index_set) for i in index_set)
        return cls(index_set, matrix)

    @property
    def transpose(self) -> "ReflectionSubmatrix":
        return ReflectionSubmatrix(self.index_set, tuple(zip(*self.matrix)))


@dataclass(frozen=True)
class MinimalityResult:
    minimal: bool
    redundant: tuple[int, ...]
    """Indices whose removal leaves the feasible set unchanged."""

    witnesses: dict[int, tuple[float, float]]
    """For non-redundant indices, a point satisfying every other constraint but not this one."""


# Vertices


def _pairwise_vertices(normals: FloatArray, offsets: FloatArray) -> list[Vertex]:
    points: list[FloatArray] = []
    for i, j in itertools.combinations(range(len(normals)), 2):
        a = np.array([normals[i], normals[j]])
        if abs(float(np.linalg.det(a))) <= DET_FLOOR:
            continue
        x = np.linalg.solve(a, np.array([offsets[i], offsets[j]]))
        if np.all(normals @ x >= offsets - TIE_TOL):
            if not any(float(np.hypot(*(x - p))) <= MERGE_DISTANCE for p in points):
                points.append(x)
    vertices = []
    for x in points:
        active = frozenset(int(k) for k in np.flatnonzero(np.abs(normals @ x - offsets) <= TIE_TOL))
        vertices.append(Vertex((float(x[0]), float(x[1])), active))
    return vertices


def _positively_spanning(normals: FloatArray) -> bool:
    angles = np.sort(np.arctan2(normals[:, 1], normals[:, 0]) % TWO_PI)
    gaps = np.diff(np.concatenate([angles, [angles[0] + TWO_PI]]))
    return bool(np.max(gaps) < math.pi - TIE_TOL)


def enumerate_vertices(poly: PolygonSpec) -> list[Vertex]:
    """All vertices with their active constraint sets, counter-clockwise from the lowest angle.

    Raises:
        UnboundedOrEmptyError: If the normals do not positively span the plane or fewer
            than three vertices exist.
    """
    normals, offsets = poly.normal_array, poly.offset_array
    if not _positively_spanning(normals):
        raise UnboundedOrEmptyError("Normals do not positively span the plane; polygon is unbounded")
    vertices = _pairwise_vertices(normals, offsets)
    if len(vertices) < 3:
        raise UnboundedOrEmptyError(f"Polygon has {len(vertices)} vertices; it is empty or degenerate")
    center = np.mean([v.point for v in vertices], axis=0)
    vertices.sort(key=lambda v: math.atan2(v.point[1] - center[1], v.point[0] - center[0]) % TWO_PI)
    logging.debug(f"Enumerated {len(vertices)} vertices")
    return vertices


def interior_point(poly: PolygonSpec) -> FloatArray:
    return np.mean([v.point for v in enumerate_vertices(poly)], axis=0)


# Minimal representation


def _support_minimum(poly: PolygonSpec, j: int) -> tuple[float, Optional[FloatArray]]:
    """min of x . n_j over the closure of the polygon without constraint j, with an argmin."""
    normals, offsets = poly.normal_array, poly.offset_array
    keep = [k for k in range(poly.m) if k != j]
    n_j = normals[j]
    rest, rest_b = normals[keep], offsets[keep]
    candidates = [v for n in rest for v in (np.array([-n[1], n[0]]), np.array([n[1], -n[0]]), n)]
    for d in candidates:
        if np.all(rest @ d >= -DET_FLOOR) and float(d @ n_j) < -DET_FLOOR:
            return -math.inf, None
    best, best_x = math.inf, None
    for v in _pairwise_vertices(rest, rest_b):
        value = float(np.array(v.point) @ n_j)
        if value < best:
            best, best_x = value, np.array(v.point)
    return best, best_x


def check_minimal_representation(poly: PolygonSpec) -> MinimalityResult:
    """Whether dropping each constraint strictly enlarges the polygon.

    Constraint j is redundant iff the support minimum of x . n_j over the other
    constraints is at least b_j.
    """
    center = interior_point(poly)
    redundant = []
    witnesses: dict[int, tuple[float, float]] = {}
    for j in range(poly.m):
        minimum, argmin = _support_minimum(poly, j)
        if minimum < poly.offsets[j] - TIE_TOL:
            if argmin is None:
                argmin = _escape_point(poly, j, center)
            # nudge toward the interior so the other constraints hold strictly
            x = argmin + 1e-6 * (center - argmin)
            witnesses[j] = (float(x[0]), float(x[1]))
        else:
            redundant.append(j)
    return MinimalityResult(not redundant, tuple(redundant), witnesses)


def minimality_report(poly: PolygonSpec) -> CheckReport:
    """Minimality of the representation as a D.i report; each redundant constraint is a witness."""
    result = check_minimal_representation(poly)
    witnesses = [Witness(evidence={"redundant_index": j}) for j in result.redundant]
    return CheckReport(
        condition_id="D.i",
        status="Pass" if result.minimal else "Fail",
        subject="minimality",
        witnesses=witnesses,
        tolerances={"tie_tol": TIE_TOL},
        estimates={"constraints": float(poly.m), "redundant": float(len(result.redundant))},
    )


def _escape_point(poly: PolygonSpec, j: int, start: FloatArray) -> FloatArray:
    normals = poly.normal_array
    keep = [k for k in range(poly.m) if k != j]
    for n in normals[keep]:
        for d in (np.array([-n[1], n[0]]), np.array([n[1], -n[0]]), n):
            if np.all(normals[keep] @ d >= -DET_FLOOR) and float(d @ normals[j]) < -DET_FLOOR:
                reach = (float(start @ normals[j]) - poly.offsets[j]) / -float(d @ normals[j]) + 1.0
                return start + reach * d
    raise AssertionError("No recession direction found for an unbounded support")


# Maximal sets


def maximal_sets(poly: PolygonSpec) -> list[tuple[int, ...]]:
    """Index sets I(x0) over boundary points: sides of positive length and vertex active sets.

    Singletons come first, then pairs, each group in lexicographic order.
    """
    vertices = enumerate_vertices(poly)
    sets: set[tuple[int, ...]] = set()
    for j in range(poly.m):
        if sum(j in v.active for v in vertices) >= 2:
            sets.add((j,))
    for v in vertices:
        sets.add(tuple(sorted(v.active)))
    return sorted(sets, key=lambda k: (len(k), k))


def face_point(poly: PolygonSpec, index_set: tuple[int, ...]) -> FloatArray:
    """A boundary point x0 with I(x0) = index_set: the vertex, or the side midpoint."""
    vertices = [np.array(v.point) for v in enumerate_vertices(poly) if set(index_set) <= v.active]
    if not vertices:
        raise ValueError(f"No face with index set {index_set}")
    return np.mean(vertices, axis=0)


# Completely-S


def is_completely_S(m: ReflectionSubmatrix) -> bool:
    """Every principal submatrix M' admits x > 0 with M'x > 0.

    For [[a, b], [c, d]] with a, d > 0 the 2x2 cone {x > 0 : Mx > 0} is empty exactly
    when b < 0, c < 0 and bc >= ad.
    """
    if len(m.index_set) == 1:
        return m.matrix[0][0] > 0
    (a, b), (c, d) = m.matrix
    if a <= 0 or d <= 0:
        return False
    return not (b < 0 and c < 0 and b * c >= a * d)


# Direction conditions


def check_DW_assumption(poly: PolygonSpec) -> CheckReport:
    """For each maximal set K, a nonnegative combination e of the normals in K with e . g_j > 0 for j in K."""
    witnesses: list[Witness] = []
    failed: list[tuple[int, ...]] = []
    for index_set in maximal_sets(poly):
        cone = Sector.spanned_by([poly.normals[i] for i in index_set])
        e = feasible_direction(cone, [poly.directions[j] for j in index_set])
        x0 = face_point(poly, index_set)
        completely_s = is_completely_S(ReflectionSubmatrix.of(poly, index_set)) if len(index_set) <= 2 else False
        evidence: dict[str, object] = {"index_set": list(index_set), "completely_S": completely_s}
        if e is None:
            failed.append(index_set)
            witnesses.append(Witness(point=(float(x0[0]), float(x0[1])), evidence=evidence))
        else:
            evidence.update({"e1": float(e[0]), "e2": float(e[1])})
            witnesses.append(Witness(point=(float(x0[0]), float(x0[1])), evidence=evidence))
    status: CheckStatus = "Fail" if failed else "Pass"
    notes = [f"No feasible direction for maximal set {list(k)}" for k in failed]
    if failed:
        witnesses = [w for w in witnesses if tuple(w.evidence["index_set"]) in failed]
    logging.debug(f"DW assumption: {status}")
    return CheckReport(
        condition_id="DW",
        status=status,
        subject="polygon",
        witnesses=witnesses,
        tolerances={"tie_tol": TIE_TOL},
        estimates={"maximal_sets": float(len(maximal_sets(poly)))},
        notes=notes,
    )


def _number(value: float) -> str:
    return f"({value!r})"


def to_domain(poly: PolygonSpec, tolerances: Optional[Tolerances] = None) -> Domain:
    """Affine pieces psi_i = x . n_i - b_i with constant g_i; vertices become declared corners.

    Raises:
        ValueError: If a vertex has more than two active constraints.
    """
    vertices = enumerate_vertices(poly)
    pieces = tuple(
        DomainPiece(
            name=f"side{i}",
            psi=parse(f"{_number(n[0])}*x1 + {_number(n[1])}*x2 - {_number(b)}"),
            g=VectorField.parse([_number(g[0]), _number(g[1])]),
        )
        for i, (n, b, g) in enumerate(zip(poly.normals, poly.offsets, poly.directions))
    )
    corners = []
    for v in vertices:
        if len(v.active) != 2:
            raise ValueError(f"Vertex {point_key(v.point)} has active set {sorted(v.active)}")
        i, j = sorted(v.active)
        corners.append(DeclaredCorner(v.point, (i, j)))
    pts = np.array([v.point for v in vertices])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.05 * float(np.max(hi - lo)) + 1e-6
    box = BoundingBox(lo[0] - pad, lo[1] - pad, hi[0] + pad, hi[1] + pad)
    return Domain(pieces, tuple(corners), box, tolerances or Tolerances())


@dataclass(frozen=True)
class EquivalenceResult:
    dw: CheckReport
    g2: list[CheckReport]

    @property
    def g2_pass(self) -> bool:
        return all(r.status == "Pass" for r in self.g2)

    @property
    def agree(self) -> bool:
        return (self.dw.status == "Pass") == self.g2_pass


def compare_deciders(poly: PolygonSpec) -> EquivalenceResult:
    """Run the DW decider and the G.ii decider at one point of every maximal face."""
    domain = to_domain(poly)
    g2 = [check_G2(domain, face_point(poly, k)) for k in maximal_sets(poly)]
    result = EquivalenceResult(check_DW_assumption(poly), g2)
    if not result.agree:
        logging.warning(f"DW and G.ii deciders disagree: {result.dw.status} vs {result.g2_pass}")
    return result


def equivalence_test(poly: PolygonSpec) -> bool:
    return compare_deciders(poly).agree
