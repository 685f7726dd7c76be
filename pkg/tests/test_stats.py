import math

import numpy as np
import pytest
from obliqua.sde_sim import TerminalSample
from obliqua.stats import (
    EmptySampleError,
    functional,
    ks_distance,
    ks_statistic,
    mc_estimate,
    refinement_study,
    summarize,
)


def _sample() -> TerminalSample:
    return TerminalSample(
        path_ids=np.arange(3),
        x=np.array([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]]),
        lam=np.array([0.0, 0.5, 1.0]),
        seed=4,
        construction="direct",
    )


def test_ks_statistic():
    assert ks_statistic([0.0], [1.0]) == 1.0
    assert ks_statistic([0.3, 0.1, 0.2], [0.1, 0.2, 0.3]) == 0.0
    assert ks_statistic([0.0, 1.0], [0.5]) == 0.5
    with pytest.raises(EmptySampleError):
        ks_statistic([], [1.0])


def test_ks_distance_takes_the_worst_column():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 0.0], [1.0, 5.0]])
    assert ks_distance(a, b) == 0.5
    assert ks_distance(a[:, 0], b[:, 0]) == 0.0


def test_mc_estimate_is_order_independent():
    forward = mc_estimate({0: 1.0, 1: 2.0, 2: 3.0}, seeds=[9])
    backward = mc_estimate({2: 3.0, 1: 2.0, 0: 1.0}, seeds=[9])
    assert forward == backward
    assert forward.mean == 2.0
    assert forward.std_error == pytest.approx(1.0 / math.sqrt(3.0))
    assert (forward.minimum, forward.maximum) == (1.0, 3.0)
    assert mc_estimate({0: 5.0}).std_error == 0.0
    with pytest.raises(EmptySampleError):
        mc_estimate({})


def test_functionals_and_summaries():
    sample = _sample()
    summaries = summarize(sample, "terminal_x")
    assert [s.mean for s in summaries] == [0.0, 2.0]
    assert summaries[1].seeds == [4]
    assert summarize(sample, "terminal_lambda")[0].mean == 0.5
    np.testing.assert_array_equal(functional("terminal_norm")(sample), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        functional("terminal_angle")


def test_refinement_study(still_half_plane):
    rows = refinement_study(still_half_plane, [0.25, 0.125], n_paths=2, horizon=1.0)
    assert [r.dt for r in rows] == [0.25, 0.125]
    assert [r.estimate for r in rows] == [2.0, 2.0]
    assert all(r.std_error == 0.0 for r in rows)
    with pytest.raises(ValueError):
        refinement_study(still_half_plane, [0.125, 0.25], n_paths=2)
    with pytest.raises(ValueError):
        refinement_study(still_half_plane, [0.25], n_paths=2, name="terminal_x", horizon=1.0)
