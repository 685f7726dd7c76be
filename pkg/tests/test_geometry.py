import math

import numpy as np
import pytest
from obliqua.expr import VectorField, parse
from obliqua.geometry import (
    AmbiguousTangentError,
    BoundingBox,
    DeclaredCorner,
    DegenerateGradientError,
    Domain,
    DomainPiece,
    EmptyBoundaryError,
    NonPointedConeError,
    NotACornerError,
    NotOnBoundaryError,
    Sector,
    boundary_sample,
    classify_corner,
    direction_cone,
    feasible_direction,
    index_set,
    local_components,
    normal_cone,
    unit_normal,
)
from obliqua.scenario import load_scenario


def _piece(psi: str, g: tuple[str, str] = ("0", "1"), name: str = "p") -> DomainPiece:
    return DomainPiece(name, parse(psi), VectorField.parse(g))


@pytest.fixture
def half_disc(scenarios_dir):
    return load_scenario(scenarios_dir / "half_disc.yaml").domain


def test_unit_normal_of_a_circle():
    circle = _piece("1 - x1^2 - x2^2", ("-x1", "-x2"))
    np.testing.assert_allclose(unit_normal(circle, (1.0, 0.0)), [-1.0, 0.0])
    with pytest.raises(NotOnBoundaryError):
        unit_normal(circle, (0.5, 0.0))


def test_unit_normal_rejects_vanishing_gradients():
    with pytest.raises(DegenerateGradientError):
        unit_normal(_piece("x2^2"), (0.0, 0.0))


def test_index_sets_of_the_half_disc(half_disc):
    assert index_set(half_disc, (0.0, 0.0)) == frozenset({0, 1})
    assert index_set(half_disc, (1.0, 1.0)) == frozenset({0})
    assert index_set(half_disc, (1.0, 0.5)) == frozenset()


def test_half_disc_corners_are_cone_points(half_disc):
    corner = classify_corner(half_disc, (0.0, 0.0))
    assert corner.kind == "cone"
    assert corner.tau is None
    np.testing.assert_allclose(corner.normals, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)
    with pytest.raises(NotACornerError):
        classify_corner(half_disc, (1.0, 1.0))


def test_normal_cones(half_disc):
    cone = normal_cone(half_disc, (0.0, 0.0))
    assert cone.angle_lo == pytest.approx(0.0)
    assert cone.width == pytest.approx(math.pi / 2)
    ray = normal_cone(half_disc, (1.0, 1.0))
    assert ray.width == 0.0
    assert ray.contains((0.0, -1.0))
    with pytest.raises(NotOnBoundaryError):
        normal_cone(half_disc, (1.0, 0.5))


def test_direction_cone_at_a_corner(half_disc):
    """At theta = pi/4 the two directions at the origin are a right angle apart."""
    cone = direction_cone(half_disc, (0.0, 0.0))
    assert cone.width == pytest.approx(math.pi / 2)
    assert cone.contains((1.0, 0.0))
    assert not cone.contains((-1.0, 0.0))


def test_cusp_classification(scenarios_dir):
    domain = load_scenario(scenarios_dir / "cusp.yaml").domain
    corner = classify_corner(domain, (0.0, 0.0))
    assert corner.kind == "cusp"
    assert corner.tau == pytest.approx((1.0, 0.0), abs=1e-9)
    assert corner.cusp_limit_L == pytest.approx(-1.0, abs=1e-3)
    assert not corner.tau_ambiguous
    cone = normal_cone(domain, (0.0, 0.0))
    assert cone.angle_lo == pytest.approx(-math.pi / 2)
    assert cone.width == pytest.approx(math.pi)


def test_anti_parallel_half_planes_have_no_cusp_tangent():
    domain = Domain(
        (_piece("x2", name="a"), _piece("-x2", ("0", "-1"), name="b")),
        (DeclaredCorner((0.0, 0.0), (0, 1)),),
        BoundingBox(-1.0, -1.0, 1.0, 1.0),
    )
    with pytest.raises(AmbiguousTangentError):
        classify_corner(domain, (0.0, 0.0))


def test_sector_spanning():
    sector = Sector.spanned_by([(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])
    assert sector.width == pytest.approx(math.pi / 2)
    assert Sector.spanned_by([(1.0, 0.0), (-1.0, 0.0)]).degenerate
    with pytest.raises(NonPointedConeError):
        Sector.spanned_by([(1.0, 0.0), (-0.5, 0.8), (-0.5, -0.8)])


def test_feasible_direction_on_angular_intervals():
    quadrant = Sector(0.0, math.pi / 2)
    e = feasible_direction(quadrant, [(1.0, -1.0), (1.0, 1.0)])
    assert e is not None
    assert quadrant.contains(e)
    assert e @ np.array([1.0, -1.0]) > 0 and e @ np.array([1.0, 1.0]) > 0
    assert feasible_direction(quadrant, [(1.0, -1.5), (-1.5, 1.0)]) is None


def test_boundary_sample_stays_on_the_closed_side(half_disc):
    pts = boundary_sample(half_disc, 1, 64)
    assert len(pts) == 64
    assert np.all(np.abs(pts[:, 1]) <= 1e-10)
    assert np.all((pts[:, 0] >= -1e-9) & (pts[:, 0] <= 2.0 + 1e-9))


def test_boundary_sample_outside_the_box():
    domain = Domain((_piece("x2 + 10"),), (), BoundingBox(-1.0, -1.0, 1.0, 1.0))
    with pytest.raises(EmptyBoundaryError):
        boundary_sample(domain, 0, 16)


def test_local_components_near_cusps(scenarios_dir):
    one_sided = load_scenario(scenarios_dir / "cusp.yaml").domain
    two_sided = load_scenario(scenarios_dir / "cusp_smooth.yaml").domain
    assert local_components(one_sided, (0.0, 0.0), 2.0**-4) == 1
    assert local_components(two_sided, (0.0, 0.0), 2.0**-4) == 2


def test_domain_rejects_bad_corner_pairs():
    with pytest.raises(ValueError):
        Domain((_piece("x2"),), (DeclaredCorner((0.0, 0.0), (0, 0)),), BoundingBox(-1, -1, 1, 1))
