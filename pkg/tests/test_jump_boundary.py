import pickle

import numpy as np
import pytest
from obliqua.base import ScenarioError
from obliqua.jump_boundary import (
    JumpScenario,
    check_exit_compatibility,
    hold_durations,
    load_jump_scenario,
    make_kernel,
    simulate_jump_batch,
    simulate_jump_constrained,
    simulate_jump_controlled,
    simulate_jump_terminal,
    smoothstep_cutoff,
)
from obliqua.scenario import load_scenario
from obliqua.sde_sim import Ball
from obliqua.stats import ks_statistic
from scipy.stats import kstest


@pytest.fixture
def jump_disc(scenarios_dir) -> JumpScenario:
    return load_jump_scenario(scenarios_dir / "jump_disc.yaml")


def test_constrained_paths_jump_from_the_boundary(jump_disc):
    domain = jump_disc.domain
    jumps = 0
    for path_id in range(20):
        record = simulate_jump_constrained(jump_disc, 11, 2.0, 0.01, path_id)
        assert domain.contains_many(record.x).all()
        assert not record.lam.any()
        for event in record.events:
            assert event.kind == "jump"
            jumps += 1
            k = event.index
            assert record.boundary[k - 1]
            assert not record.boundary[k]
            np.testing.assert_array_equal(record.left_limit[k], event.point)
            np.testing.assert_array_equal(record.x[k - 1], event.point)
            assert abs(1.0 - np.hypot(*event.point) ** 2) <= 1e-9
            assert np.hypot(*event.target) < 0.5
    assert jumps > 0


def test_constrained_jump_keeps_the_rest_of_the_step(raw_scenario, make_scenario):
    """Unit drift to the right: the crossing at t = 1 jumps home and moves on for the 0.5 left until t = 1.5."""
    data = raw_scenario("jump_disc")
    data["coefficients"] = {"b": ["1", "0"], "sigma": [["0", "0"], ["0", "0"]]}
    data["jump"] = {"kernel": "point_mass", "params": {"point": [0.0, 0.0]}, "cutoff_radius": 0.1}
    js = JumpScenario.from_scenario(make_scenario(data))
    record = simulate_jump_constrained(js, 0, 2.1, 0.3)
    np.testing.assert_allclose(record.x[:, 0], [0.0, 0.3, 0.6, 0.9, 1.0, 0.5, 0.8, 1.0], atol=1e-12)
    assert not record.x[:, 1].any()
    assert record.boundary.tolist() == [False, False, False, False, True, False, False, True]
    assert [ev.index for ev in record.events] == [5]
    np.testing.assert_allclose(record.left_limit[5], [1.0, 0.0], atol=1e-12)


def test_controlled_path_holds_then_jumps(jump_disc):
    cp = simulate_jump_controlled(jump_disc, 11, 4.0, 0.01)
    assert np.all(cp.dl0 + cp.dl1 == cp.ds)
    assert set(cp.kinds) <= {"diffuse", "hold", "jump"}
    holds = [ev for ev in cp.events if ev.kind == "hold"]
    assert holds
    assert all(ev.duration > 0 for ev in holds)
    for ev in cp.events:
        if ev.kind == "jump":
            assert np.hypot(*ev.target) < 0.5


def test_controlled_records_in_real_time(jump_disc):
    records = simulate_jump_batch(jump_disc, 11, [0, 1], 0.5, 0.01, construction="controlled")
    assert [r.path_id for r in records] == [0, 1]
    for record in records:
        np.testing.assert_allclose(record.t, np.arange(51) * 0.01)
        assert jump_disc.domain.contains_many(record.x).all()


def test_terminal_sample(jump_disc):
    sample = simulate_jump_terminal(jump_disc, 11, 5, 0.1, 0.01)
    assert sample.x.shape == (5, 2)
    assert not sample.lam.any()
    with pytest.raises(ValueError):
        simulate_jump_terminal(jump_disc, 11, 5, 0.1, 0.01, construction="localized")


def test_exit_compatibility(jump_disc):
    shared = check_exit_compatibility(jump_disc, Ball((0.0, 0.0), 1.0))
    assert shared.status == "Fail"
    assert shared.witnesses[0].evidence["contacts"] >= 2
    crossing = check_exit_compatibility(jump_disc, Ball((1.0, 0.0), 0.5))
    assert crossing.status == "Pass"
    assert crossing.estimates["contacts"] == 0.0


def test_kernels_and_cutoff():
    np.testing.assert_allclose(smoothstep_cutoff(np.array([0.5, 0.0, -0.05, -0.1, -1.0]), 0.1), [1, 1, 0.5, 0, 0])
    with pytest.raises(ScenarioError):
        make_kernel("gaussian", {})
    with pytest.raises(ScenarioError):
        make_kernel("uniform_disc", {"center": [0, 0], "radius": 0})
    target = make_kernel("point_mass", {"point": [0.1, 0.2]})(np.random.default_rng(0), np.zeros(2))
    np.testing.assert_array_equal(target, [0.1, 0.2])


def test_jump_scenario_needs_a_jump_block(scenarios_dir, jump_disc):
    with pytest.raises(ScenarioError):
        JumpScenario.from_scenario(load_scenario(scenarios_dir / "half_plane.yaml"))
    restored = pickle.loads(pickle.dumps(jump_disc))
    assert restored.kernel_name == "uniform_disc"
    assert restored.cutoff_radius == 0.1


@pytest.mark.slow
def test_hold_durations_are_unit_exponential(jump_disc):
    records = [simulate_jump_controlled(jump_disc, 11, 40.0, 0.05, path_id) for path_id in range(500)]
    durations = hold_durations(records)
    assert len(durations) >= 10_000
    assert durations.mean() == pytest.approx(1.0, abs=3.0 / np.sqrt(len(durations)))
    assert kstest(durations, "expon").statistic < 0.02


@pytest.mark.slow
def test_constrained_and_controlled_jumps_agree_in_law(jump_disc):
    constrained = simulate_jump_terminal(jump_disc, 1, 40_000, 0.5, 0.001, workers=2)
    controlled = simulate_jump_terminal(jump_disc, 2, 40_000, 0.5, 0.001, construction="controlled", workers=2)
    assert ks_statistic(constrained.x[:, 0], controlled.x[:, 0]) < 0.02
    assert ks_statistic(np.hypot(*constrained.x.T), np.hypot(*controlled.x.T)) < 0.02
