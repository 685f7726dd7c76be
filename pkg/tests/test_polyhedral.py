import itertools

import numpy as np
import pytest
from obliqua.polyhedral import (
    PolygonSpec,
    ReflectionSubmatrix,
    UnboundedOrEmptyError,
    check_DW_assumption,
    check_minimal_representation,
    compare_deciders,
    enumerate_vertices,
    equivalence_test,
    face_point,
    is_completely_S,
    maximal_sets,
    minimality_report,
    to_domain,
)
from obliqua.scenario import load_polygon


@pytest.fixture
def polygon(scenarios_dir):
    def load(name: str) -> PolygonSpec:
        return load_polygon(scenarios_dir / "polygons" / f"{name}.yaml")[1]

    return load


def test_square_vertices(polygon):
    vertices = enumerate_vertices(polygon("square_normal"))
    found = {v.point: v.active for v in vertices}
    assert found == {
        (0.0, 0.0): frozenset({0, 1}),
        (0.0, 1.0): frozenset({0, 3}),
        (1.0, 0.0): frozenset({1, 2}),
        (1.0, 1.0): frozenset({2, 3}),
    }


def test_unbounded_and_empty_polygons():
    with pytest.raises(UnboundedOrEmptyError):
        enumerate_vertices(PolygonSpec(normals=[(1, 0), (0, 1)], offsets=[0, 0], directions=[(1, 0), (0, 1)]))
    square = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    with pytest.raises(UnboundedOrEmptyError):
        enumerate_vertices(PolygonSpec(normals=square, offsets=[0, 0, 1, -1], directions=square))


def test_polygon_spec_validation():
    with pytest.raises(ValueError):
        PolygonSpec(normals=[(1, 0), (2, 0)], offsets=[0, 1], directions=[(1, 0), (1, 0)])
    with pytest.raises(ValueError):
        PolygonSpec(normals=[(0, 0)], offsets=[0], directions=[(1, 0)])


def test_offsets_are_rescaled_with_their_normals(polygon):
    """The unit square written with non-unit normals is still the unit square."""
    scaled = PolygonSpec(
        normals=[(2, 0), (0, 3), (-1, 0), (0, -0.5)],
        offsets=[0, 0, -1, -0.5],
        directions=[(1, 0), (0, 1), (-1, 0), (0, -1)],
    )
    assert scaled.offsets == [0.0, 0.0, -1.0, -1.0]
    assert scaled == polygon("square_normal")
    assert {v.point for v in enumerate_vertices(scaled)} == {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)}


def test_maximal_sets(polygon):
    assert maximal_sets(polygon("square_normal")) == [(0,), (1,), (2,), (3,), (0, 1), (0, 3), (1, 2), (2, 3)]
    assert face_point(polygon("square_normal"), (0,)).tolist() == [0.0, 0.5]


@pytest.mark.parametrize(
    "matrix, expected",
    [
        (((2.0,),), True),
        (((-1.0,),), False),
        (((1.0, 0.5), (0.5, 1.0)), True),
        (((1.0, -0.5), (-0.5, 1.0)), True),
        (((1.0, -1.5), (-1.5, 1.0)), False),
        (((0.0, 1.0), (1.0, 1.0)), False),
    ],
)
def test_completely_S(matrix, expected):
    index_set = tuple(range(len(matrix)))
    assert is_completely_S(ReflectionSubmatrix(index_set, matrix)) is expected


def test_DW_on_the_normal_square(polygon):
    report = check_DW_assumption(polygon("square_normal"))
    assert report.status == "Pass"
    assert len(report.witnesses) == 8
    assert all(w.evidence["completely_S"] for w in report.witnesses)


def test_DW_fails_at_the_bad_corner(polygon):
    poly = polygon("square_bad_corner")
    report = check_DW_assumption(poly)
    assert report.status == "Fail"
    assert len(report.witnesses) == 1
    witness = report.witnesses[0]
    assert witness.point == (0.0, 0.0)
    assert witness.evidence["index_set"] == [0, 1]
    assert witness.evidence["completely_S"] is False


@pytest.mark.parametrize("name, passes", [("square_normal", True), ("square_bad_corner", False)])
def test_deciders_agree(polygon, name, passes):
    result = compare_deciders(polygon(name))
    assert result.agree
    assert result.g2_pass is passes
    assert equivalence_test(polygon(name))


def test_redundant_constraint(polygon):
    result = check_minimal_representation(polygon("non_minimal"))
    assert not result.minimal
    assert result.redundant == (4,)
    assert set(result.witnesses) == {0, 1, 2, 3}
    assert minimality_report(polygon("non_minimal")).status == "Fail"
    assert minimality_report(polygon("square_normal")).status == "Pass"


def test_to_domain(polygon):
    domain = to_domain(polygon("square_normal"))
    assert domain.m == 4
    assert len(domain.corners) == 4
    assert domain.contains((0.5, 0.5))
    assert not domain.contains((1.5, 0.5))


def random_polygon(rng: np.random.Generator, near_normal: bool) -> PolygonSpec:
    """A polygon circumscribed about a circle, with side normals at least 0.05 rad apart."""
    m = int(rng.integers(3, 9))
    while True:
        angles = np.sort(rng.uniform(0.0, 2 * np.pi, m))
        gaps = np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))
        if gaps.min() >= 0.05 and gaps.max() <= np.pi - 0.1:
            break
    normals = np.column_stack([np.cos(angles), np.sin(angles)])
    center, radius = rng.normal(size=2), rng.uniform(0.5, 2.0)
    if near_normal:
        turn = angles + rng.uniform(-0.04, 0.04, m)
    else:
        turn = rng.uniform(0.0, 2 * np.pi, m)
    return PolygonSpec(
        normals=normals.tolist(),
        offsets=(normals @ center - radius).tolist(),
        directions=np.column_stack([np.cos(turn), np.sin(turn)]).tolist(),
    )


def brute_force_index_sets(poly: PolygonSpec) -> list[tuple[int, ...]]:
    """Index sets realised by some boundary point, straight from the definition."""
    n, b = poly.normal_array, poly.offset_array
    found = []
    for j in range(poly.m):
        base, along = b[j] * n[j], np.array([-n[j][1], n[j][0]])
        lo, hi = -np.inf, np.inf
        for i in range(poly.m):
            if i == j:
                continue
            slope, rest = float(n[i] @ along), float(b[i] - n[i] @ base)
            if slope > 0:
                lo = max(lo, rest / slope)
            elif slope < 0:
                hi = min(hi, rest / slope)
            elif rest >= 0:
                hi = -np.inf
        if hi - lo > 1e-9:
            found.append((j,))
    for i, j in itertools.combinations(range(poly.m), 2):
        a = n[[i, j]]
        if abs(np.linalg.det(a)) < 1e-12:
            continue
        x = np.linalg.solve(a, b[[i, j]])
        others = [k for k in range(poly.m) if k not in (i, j)]
        if np.all(n[others] @ x > b[others] + 1e-9):
            found.append((i, j))
    return found


@pytest.mark.parametrize("count", [25, pytest.param(200, marks=pytest.mark.slow)])
def test_deciders_agree_on_random_polygons(count):
    rng = np.random.default_rng(20240601)
    for k in range(count):
        poly = random_polygon(rng, near_normal=k % 2 == 0)
        result = compare_deciders(poly)
        assert result.agree, poly
        if k % 2 == 0:
            assert result.dw.status == "Pass"


@pytest.mark.parametrize("count", [25, pytest.param(200, marks=pytest.mark.slow)])
def test_maximal_sets_match_the_definition(count):
    rng = np.random.default_rng(7)
    for _ in range(count):
        poly = random_polygon(rng, near_normal=False)
        assert maximal_sets(poly) == brute_force_index_sets(poly)


def completely_S_on_angle_grid(matrix: np.ndarray, points: int = 20001) -> bool:
    phi = np.linspace(0.0, np.pi / 2, points + 2)[1:-1]
    x = np.stack([np.cos(phi), np.sin(phi)])
    return bool(matrix[0, 0] > 0 and matrix[1, 1] > 0 and np.any(np.all(matrix @ x > 0, axis=0)))


@pytest.mark.parametrize("count", [10_000, pytest.param(100_000, marks=pytest.mark.slow)])
def test_completely_S_is_transpose_symmetric(count):
    rng = np.random.default_rng(3)
    for entries in rng.normal(size=(count, 2, 2)):
        m = ReflectionSubmatrix((0, 1), tuple(map(tuple, entries.tolist())))
        assert is_completely_S(m) is is_completely_S(m.transpose)


@pytest.mark.parametrize("count, points", [(300, 20_001), pytest.param(1000, 1_000_001, marks=pytest.mark.slow)])
def test_completely_S_matches_the_angle_grid(count, points):
    """Entries are bounded away from zero and from the a*d = b*c boundary, so the grid resolves every cone."""
    rng = np.random.default_rng(5)
    checked = 0
    while checked < count:
        entries = rng.uniform(0.2, 2.0, (2, 2)) * rng.choice([-1.0, 1.0], (2, 2))
        if abs(entries[0, 0] * entries[1, 1] - entries[0, 1] * entries[1, 0]) <= 0.05:
            continue
        m = ReflectionSubmatrix((0, 1), tuple(map(tuple, entries.tolist())))
        assert is_completely_S(m) is completely_S_on_angle_grid(entries, points), entries
        checked += 1
