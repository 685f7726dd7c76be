"""Monte Carlo reductions and two-sample comparisons.

Reductions run in ascending path id with compensated summation, so results do not
depend on the order in which workers produced them.
"""

import logging
import math
from collections.abc import Mapping
from typing import Callable, Optional, Sequence

import numpy as np
import numpy.typing as npt
from scipy.stats import ks_2samp

from .base import FloatArray, ObliquaError
from .models import RefinementRow, SampleSummary
from .scenario import Scenario
from .sde_sim import Construction, TerminalSample, simulate_terminal

Functional = Callable[[TerminalSample], FloatArray]

FUNCTIONALS: dict[str, Functional] = {}


class EmptySampleError(ObliquaError):
    pass


def register_functional(name: str) -> Callable[[Functional], Functional]:
    def decorator(fn: Functional) -> Functional:
        FUNCTIONALS[name] = fn
        return fn

    return decorator


@register_functional("terminal_x1")
def terminal_x1(sample: TerminalSample) -> FloatArray:
    return sample.x[:, 0]


@register_functional("terminal_x2")
def terminal_x2(sample: TerminalSample) -> FloatArray:
    return sample.x[:, 1]


@register_functional("terminal_x")
def terminal_x(sample: TerminalSample) -> FloatArray:
    """Both coordinates, shape (n, 2)."""
    return sample.x


@register_functional("terminal_norm")
def terminal_norm(sample: TerminalSample) -> FloatArray:
    return np.hypot(sample.x[:, 0], sample.x[:, 1])


@register_functional("terminal_lambda")
def terminal_lambda(sample: TerminalSample) -> FloatArray:
    return sample.lam


def functional(name: str) -> Functional:
    if name not in FUNCTIONALS:
        raise ValueError(f"Unknown functional {name!r}, expected one of {sorted(FUNCTIONALS)}")
    return FUNCTIONALS[name]


def ks_statistic(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Sup distance between the empirical CDFs of two samples.

    Raises:
        EmptySampleError: If either sample is empty.

    Examples:
        >>> ks_statistic([0.0], [1.0])
        1.0
    """
    xa = np.asarray(a, dtype=np.float64).ravel()
    xb = np.asarray(b, dtype=np.float64).ravel()
    if xa.size == 0 or xb.size == 0:
        raise EmptySampleError(f"Two nonempty samples needed, got sizes {xa.size} and {xb.size}")
    return float(ks_2samp(xa, xb, method="asymp").statistic)


def ks_distance(a: FloatArray, b: FloatArray) -> float:
    """KS statistic of a scalar functional, or the largest over the columns of a vector one."""
    if a.ndim == 1:
        return ks_statistic(a, b)
    return max(ks_statistic(a[:, j], b[:, j]) for j in range(a.shape[1]))


def mc_estimate(values: Mapping[int, float], seeds: Sequence[int] = ()) -> SampleSummary:
    """Mean and standard error, reduced in ascending key order.

    Raises:
        EmptySampleError: If there are no values.
    """
    if not values:
        raise EmptySampleError("No values to estimate from")
    ordered = [float(values[k]) for k in sorted(values)]
    n = len(ordered)
    mean = math.fsum(ordered) / n
    std_error = 0.0
    if n > 1:
        variance = math.fsum((v - mean) ** 2 for v in ordered) / (n - 1)
        std_error = math.sqrt(variance) / math.sqrt(n)
    return SampleSummary(n=n, mean=mean, std_error=std_error, minimum=min(ordered), maximum=max(ordered), seeds=list(seeds))


def summarize(sample: TerminalSample, name: str) -> list[SampleSummary]:
    """One summary per column of the functional."""
    values = functional(name)(sample)
    columns = values.reshape(len(values), -1)
    ids = [int(p) for p in sample.path_ids]
    return [mc_estimate(dict(zip(ids, columns[:, j])), [sample.seed]) for j in range(columns.shape[1])]


def refinement_study(
    scenario: Scenario,
    dts: Sequence[float],
    n_paths: int,
    seed: Optional[int] = None,
    name: str = "terminal_x2",
    construction: Construction = "direct",
    horizon: Optional[float] = None,
    workers: int = 1,
) -> list[RefinementRow]:
    """Estimate a scalar terminal functional at each step size, same seed throughout.

    Raises:
        ValueError: If `dts` is not strictly decreasing or the functional is not scalar.
    """
    if any(not later < earlier for earlier, later in zip(dts, dts[1:])):
        raise ValueError(f"dts must be strictly decreasing, got {list(dts)}")
    seed = scenario.run.seed if seed is None else seed
    horizon = scenario.run.horizon if horizon is None else horizon
    rows = []
    for dt in dts:
        sample = simulate_terminal(scenario, seed, n_paths, horizon, dt, construction, workers)
        summaries = summarize(sample, name)
        if len(summaries) != 1:
            raise ValueError(f"Refinement needs a scalar functional, {name} has {len(summaries)} components")
        rows.append(RefinementRow(dt=dt, estimate=summaries[0].mean, std_error=summaries[0].std_error))
        logging.debug(f"Refinement dt={dt}: {summaries[0].mean:.6g} +- {summaries[0].std_error:.2g}")
    return rows
