import math

import numpy as np
import pytest
from obliqua.sde_sim import (
    Ball,
    ClockStalledError,
    ControlledPathRecord,
    Cover,
    CoverGapError,
    ImplicitRegion,
    InvalidCoverError,
    SeamMismatchError,
    build_cover,
    clock_inverse,
    localized_simulate,
    paste,
    simulate_batch,
    simulate_controlled,
    simulate_path,
    simulate_terminal,
    steps_for,
    stop_at_exit,
    time_change,
)
from obliqua.scenario import load_scenario
from obliqua.stats import ks_statistic


@pytest.fixture
def half_plane(scenarios_dir):
    return load_scenario(scenarios_dir / "half_plane.yaml")


@pytest.fixture
def half_disc(scenarios_dir):
    return load_scenario(scenarios_dir / "half_disc.yaml")


@pytest.fixture
def sinking(make_scenario):
    """Noiseless half-plane path drifting down from x2 = 0.3 at unit speed."""

    def build(start: float = 0.3, speed: float = 1):
        return make_scenario(
            {
                "name": "sinking",
                "domain": {"pieces": [{"name": "floor", "psi": "x2", "g": ["0", "1"]}], "bounding_box": [-1, -0.5, 1, 1]},
                "coefficients": {"b": ["0", f"-{speed}"], "sigma": [["0", "0"], ["0", "0"]]},
                "initial": {"point": [0.0, start]},
            }
        )

    return build


@pytest.mark.parametrize(
    "horizon, dt, expected",
    [(1.0, 0.001, 1000), (1.0, 0.3, 4), (0.1, 0.01, 10), (0.05, 1.0, 1)],
)
def test_steps_for(horizon, dt, expected):
    assert steps_for(horizon, dt) == expected


def test_steps_for_rejects_nonpositive():
    with pytest.raises(ValueError):
        steps_for(0.0, 0.1)
    with pytest.raises(ValueError):
        steps_for(1.0, -0.1)


def test_noiseless_interior_path(still_half_plane):
    record = simulate_path(still_half_plane, 0, 0, 1.0, 0.125)
    assert record.n_steps == 8
    np.testing.assert_array_equal(record.x[:, 1], 1.0 + np.arange(9) / 8)
    assert not record.lam.any()
    assert not record.boundary.any()


def test_noiseless_path_pushed_by_the_floor(sinking):
    record = simulate_path(sinking(0.25), 0, 0, 1.0, 0.125)
    np.testing.assert_allclose(record.x[:, 1], [0.25, 0.125, 0.0, 0, 0, 0, 0, 0, 0], atol=1e-15)
    assert record.boundary.tolist() == [False, False, False] + [True] * 6
    np.testing.assert_allclose(record.lam, [0, 0, 0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75])
    np.testing.assert_allclose(record.gamma[3:], [[0.0, 1.0]] * 6)
    assert np.isnan(record.gamma[:3]).all()


def test_paths_are_deterministic(half_plane):
    a = simulate_path(half_plane, 1, 3, 0.1, 0.01)
    b = simulate_path(half_plane, 1, 3, 0.1, 0.01)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.dW, b.dW)
    other = simulate_path(half_plane, 1, 4, 0.1, 0.01)
    assert not np.array_equal(a.x, other.x)


def test_batch_rows_match_single_paths(half_plane):
    records = simulate_batch(half_plane, 1, [5, 3], 0.1, 0.01)
    assert [r.path_id for r in records] == [3, 5]
    np.testing.assert_array_equal(records[1].x, simulate_path(half_plane, 1, 5, 0.1, 0.01).x)
    sample = simulate_terminal(half_plane, 1, 6, 0.1, 0.01)
    np.testing.assert_array_equal(sample.x[5], records[1].terminal)
    assert sample.lam[5] == records[1].lam[-1]


def test_worker_count_does_not_change_results(half_plane):
    serial = simulate_terminal(half_plane, 2, 1100, 0.1, 0.01, workers=1)
    parallel = simulate_terminal(half_plane, 2, 1100, 0.1, 0.01, workers=2)
    np.testing.assert_array_equal(serial.path_ids, parallel.path_ids)
    np.testing.assert_array_equal(serial.x, parallel.x)
    np.testing.assert_array_equal(serial.lam, parallel.lam)


def test_paths_stay_in_the_closure(half_disc):
    domain = half_disc.domain
    for record in simulate_batch(half_disc, 7, range(20), 0.2, 0.01):
        assert domain.contains_many(record.x, slack=domain.tolerances.boundary_tol).all()
        assert np.all(np.diff(record.lam) >= 0)
        assert np.all(record.boundary == np.isfinite(record.gamma[:, 0]))


def test_unknown_construction(half_plane):
    with pytest.raises(ValueError):
        simulate_terminal(half_plane, 0, 2, 0.1, 0.01, construction="euler")


def test_stop_at_exit_freezes_the_path(still_half_plane):
    record = simulate_path(still_half_plane, 0, 0, 1.0, 0.125)
    stopped = stop_at_exit(record, ImplicitRegion.parse("1.5 - x2"))
    assert stopped.exit_index == 4
    assert stopped.tau == 0.5
    np.testing.assert_array_equal(stopped.record.x[4:, 1], [1.5] * 5)
    never = stop_at_exit(record, ImplicitRegion.parse("10 - x2"))
    assert never.exit_index is None
    assert math.isinf(never.tau)


def test_paste_continues_at_the_exit_state(still_half_plane, make_scenario):
    record = simulate_path(still_half_plane, 0, 0, 1.0, 0.125)
    head = stop_at_exit(record, ImplicitRegion.parse("1.5 - x2"))
    moved = make_scenario(
        {
            "name": "still_from_exit",
            "domain": {"pieces": [{"name": "floor", "psi": "x2", "g": ["0", "1"]}], "bounding_box": [-1, -0.5, 1, 3]},
            "coefficients": {"b": ["0", "1"], "sigma": [["0", "0"], ["0", "0"]]},
            "initial": {"point": [0.0, 1.5]},
        }
    )
    pasted = paste(head, simulate_path(moved, 0, 0, 0.5, 0.125))
    np.testing.assert_array_equal(pasted.t, np.arange(9) * 0.125)
    np.testing.assert_array_equal(pasted.x[:, 1], 1.0 + np.arange(9) / 8)

    with pytest.raises(SeamMismatchError):
        paste(head, simulate_path(still_half_plane, 0, 0, 0.5, 0.125))
    with pytest.raises(SeamMismatchError):
        paste(head, simulate_path(moved, 0, 0, 0.5, 0.25))
    with pytest.raises(SeamMismatchError):
        paste(stop_at_exit(record, ImplicitRegion.parse("10 - x2")), record)


def test_localized_equals_direct_without_corners(half_plane):
    cover = build_cover(half_plane.domain)
    assert len(cover) == 1
    localized = localized_simulate(half_plane, cover, 1, 0.1, 0.01, path_id=2)
    direct = simulate_path(half_plane, 1, 2, 0.1, 0.01)
    np.testing.assert_array_equal(localized.x, direct.x)
    np.testing.assert_array_equal(localized.lam, direct.lam)


def test_localized_path_on_the_half_disc(half_disc):
    domain = half_disc.domain
    record = localized_simulate(half_disc, build_cover(domain), 7, 0.2, 0.01)
    assert record.n_steps == 20
    assert domain.contains_many(record.x, slack=domain.tolerances.boundary_tol).all()


def test_localized_path_tags_the_element_it_enters(raw_scenario, make_scenario):
    """A noiseless path drifting towards the corner (2, 0) switches from the remainder to that corner's ball."""
    data = raw_scenario("half_disc")
    data["coefficients"] = {"b": ["1", "0"], "sigma": [["0", "0"], ["0", "0"]]}
    data["initial"] = {"kind": "point", "point": [1.5, 0.05]}
    scenario = make_scenario(data)
    record = localized_simulate(scenario, build_cover(scenario.domain), 0, 0.45, 0.05)
    assert record.n_steps == 9
    assert record.element.tolist() == [2] * 8 + [1, 1]
    np.testing.assert_array_equal(record.x, simulate_path(scenario, 0, 0, 0.45, 0.05).x)


def test_localized_path_restarts_its_noise_on_exit(raw_scenario, make_scenario):
    data = raw_scenario("half_disc")
    data["initial"] = {"kind": "point", "point": [0.2, 0.05]}
    scenario = make_scenario(data)
    cover = build_cover(scenario.domain)
    record = localized_simulate(scenario, cover, 3, 1.0, 0.01)
    direct = simulate_path(scenario, 3, 0, 1.0, 0.01)
    tags = record.element
    assert tags[0] == 0
    changes = np.flatnonzero(tags[1:] != tags[:-1]) + 1
    assert changes.size > 0
    for k in range(record.n_steps):
        assert cover.elements[tags[k]](record.x[k : k + 1])[0]
    for k in changes:
        assert not cover.elements[tags[k - 1]](record.x[k : k + 1])[0]
        assert tags[k] == cover.element_for(record.x[k])
    e = changes[0]
    np.testing.assert_array_equal(record.x[: e + 1], direct.x[: e + 1])
    np.testing.assert_array_equal(record.dW[:e], direct.dW[:e])
    assert not np.array_equal(record.dW[e], direct.dW[e])


def test_cover_validation(half_disc):
    domain = half_disc.domain
    assert build_cover(domain).radius == 0.3
    with pytest.raises(InvalidCoverError):
        build_cover(domain, 0.0)
    with pytest.raises(InvalidCoverError):
        build_cover(domain, 2.5)
    cover = build_cover(domain, 0.5)
    assert cover.element_for((0.1, 0.1)) == 0
    assert cover.element_for((1.9, 0.1)) == 1
    assert cover.element_for((1.0, 0.5)) == 2
    with pytest.raises(CoverGapError):
        Cover((Ball((0.0, 0.0), 1.0),), 1.0).element_for((5.0, 5.0))


def test_controlled_start_on_the_boundary(raw_scenario, make_scenario):
    data = raw_scenario("half_plane")
    data["initial"] = {"point": [0.0, 0.0]}
    cp = simulate_controlled(make_scenario(data), 1, 0, 0.05, 0.001)
    assert cp.n_steps == 50
    assert cp.kinds[0] == "boundary"
    assert cp.dl0[0] == 0.0 and cp.dl1[0] == 0.001
    np.testing.assert_array_equal(cp.y[1], [0.0, 0.001])
    assert np.all(cp.dl0 + cp.dl1 == cp.ds)


def test_controlled_pushes_are_spent_on_the_boundary_clock(sinking):
    """Owed push mass is spent exactly, the rest of the step diffusing on the interior clock."""
    scenario = sinking()
    cp = simulate_controlled(scenario, 0, 0, 1.0, 0.125)
    assert cp.kinds == ("diffuse", "diffuse") + ("reflect",) * 6
    np.testing.assert_allclose(cp.dl1, [0, 0, 0, 0.075, 0.05, 0.075, 0.05, 0.075], atol=1e-12)
    assert np.all(cp.dl0 + cp.dl1 == cp.ds)
    np.testing.assert_allclose([a[3] for a in cp.atoms], [0.075, 0.05, 0.075, 0.05, 0.075], atol=1e-12)
    x = time_change(cp, horizon=0.5, dt=0.125)
    direct = simulate_path(scenario, 0, 0, 0.5, 0.125)
    np.testing.assert_allclose(x.x, direct.x, atol=1e-15)
    assert x.boundary.tolist() == direct.boundary.tolist()
    np.testing.assert_allclose(direct.lam, [0, 0, 0, 0.075, 0.2], atol=1e-12)
    np.testing.assert_allclose(x.lam, direct.lam, atol=1e-12)


def test_controlled_push_longer_than_a_step(sinking):
    """A push heavier than ds is spent over steps that hold lambda0 still."""
    scenario = sinking(start=0.1, speed=2)
    cp = simulate_controlled(scenario, 0, 0, 1.0, 0.25)
    assert cp.kinds == ("reflect", "boundary", "reflect", "reflect")
    np.testing.assert_allclose(cp.dl1, [0.0, 0.25, 0.15, 0.2], atol=1e-12)
    np.testing.assert_allclose(cp.dl0, [0.25, 0.0, 0.1, 0.05], atol=1e-12)
    np.testing.assert_array_equal(cp.y[2], [0.0, 0.0])
    x = time_change(cp, horizon=0.25, dt=0.25)
    np.testing.assert_allclose(x.lam, [0.0, 0.4], atol=1e-12)
    np.testing.assert_allclose(simulate_path(scenario, 0, 0, 0.25, 0.25).lam, x.lam, atol=1e-12)
    short = simulate_controlled(scenario, 0, 0, 1.0, 0.25, until_l0=0.25)
    assert short.n_steps == 3
    np.testing.assert_allclose(time_change(short, horizon=0.25, dt=0.25).lam, [0.0, 0.4], atol=1e-12)


def test_noiseless_time_change_is_the_identity(still_half_plane):
    cp = simulate_controlled(still_half_plane, 0, 0, 1.0, 0.125)
    assert set(cp.kinds) == {"diffuse"}
    x = time_change(cp)
    np.testing.assert_array_equal(x.t, np.arange(9) * 0.125)
    np.testing.assert_array_equal(x.x, cp.y)
    assert not x.lam.any()


def test_time_change_of_a_staircase():
    cp = ControlledPathRecord.from_steps(
        [[0.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]],
        dl0=[1.0, 0.0, 1.0],
        dl1=[0.0, 1.0, 0.0],
        ds=1.0,
        u=[[np.nan, np.nan], [0.0, 1.0], [np.nan, np.nan]],
    )
    np.testing.assert_array_equal(clock_inverse(cp.l0, np.array([0.0, 1.0, 2.0]), 1e-9), [0, 2, 3])
    for rule in ("mass", "last"):
        x = time_change(cp, direction_rule=rule)
        np.testing.assert_array_equal(x.lam, [0.0, 1.0, 1.0])
        assert x.boundary.tolist() == [False, True, False]
        np.testing.assert_array_equal(x.gamma[1], [0.0, 1.0])
        np.testing.assert_array_equal(x.x, [[0.0, 1.0], [0.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        time_change(cp, direction_rule="first")


def test_stalled_clock():
    cp = ControlledPathRecord.from_steps([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], dl0=[1.0, 0.0], dl1=[0.0, 1.0], ds=1.0)
    with pytest.raises(ClockStalledError) as info:
        time_change(cp, horizon=2.0, dt=1.0)
    assert info.value.record is not None
    assert info.value.record.truncated
    truncated = time_change(cp, horizon=2.0, dt=1.0, on_stall="truncate")
    assert truncated.truncated
    np.testing.assert_array_equal(truncated.t, [0.0, 1.0])


def test_controlled_terminal_matches_records(half_plane):
    sample = simulate_terminal(half_plane, 3, 4, 0.05, 0.01, construction="controlled")
    records = simulate_batch(half_plane, 3, range(4), 0.05, 0.01, construction="controlled")
    for row, record in enumerate(records):
        np.testing.assert_allclose(sample.x[row], record.terminal, atol=1e-12)
        assert sample.lam[row] == pytest.approx(record.lam[-1], abs=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("construction", ["direct", "controlled"])
def test_half_plane_local_time_mean(half_plane, construction):
    """E[lambda(1)] = 2 (phi(1) - (1 - Phi(1))) for a start at height 1."""
    sample = simulate_terminal(half_plane, 1, 20000, 1.0, 0.001, construction=construction)
    assert sample.lam.mean() == pytest.approx(0.16663, abs=0.015)


@pytest.mark.slow
def test_half_plane_height_is_a_folded_normal(half_plane):
    """X2(1) from a start at height 1 is |1 + N(0, 1)|."""
    n = 100_000
    height = simulate_terminal(half_plane, 1, n, 1.0, 1e-4, workers=2).x[:, 1]
    reference = np.abs(1.0 + np.random.default_rng(5).standard_normal(10 * n))
    assert ks_statistic(height, reference) < 0.01
    se = np.hypot(height.std() / np.sqrt(n), reference.std() / np.sqrt(10 * n))
    assert abs(height.mean() - reference.mean()) < 3 * se


@pytest.mark.slow
@pytest.mark.parametrize("name, T", [("half_plane", 1.0), ("half_disc", 0.5)])
def test_direct_and_controlled_agree_in_law(scenarios_dir, name, T):
    scenario = load_scenario(scenarios_dir / f"{name}.yaml")
    direct = simulate_terminal(scenario, 1, 100_000, T, 2.5e-4, workers=2)
    controlled = simulate_terminal(scenario, 2, 100_000, T, 2.5e-4, construction="controlled", workers=2)
    assert ks_statistic(direct.x[:, 0], controlled.x[:, 0]) < 0.015
    assert ks_statistic(direct.x[:, 1], controlled.x[:, 1]) < 0.015


@pytest.mark.slow
def test_localized_and_direct_agree_in_law(half_disc):
    direct = simulate_terminal(half_disc, 1, 100_000, 0.5, 0.01, workers=2)
    localized = simulate_terminal(half_disc, 2, 100_000, 0.5, 0.01, construction="localized", workers=2)
    assert ks_statistic(direct.x[:, 0], localized.x[:, 0]) < 0.015
    assert ks_statistic(direct.x[:, 1], localized.x[:, 1]) < 0.015
