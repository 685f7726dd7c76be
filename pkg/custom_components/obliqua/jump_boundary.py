"""Diffusion in a smooth domain that jumps back inside from the boundary.

On reaching the boundary the process waits for a unit exponential time on the boundary
clock and then jumps to a sample of the jump kernel. The constrained version jumps at
once.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Sequence, Union

import numpy as np

from .base import FloatArray, ScenarioError, as_point, point_key
from .geometry import BoundingBox, Domain, sample_level_set
from .models import CheckReport, Witness
from .scenario import Scenario, load_scenario
from .sde_sim import (
    DIFFUSE,
    HOLD,
    JUMP,
    Ball,
    ClockStalledError,
    ControlledPathRecord,
    ControlledStep,
    Event,
    ImplicitRegion,
    PathRecord,
    SimulationError,
    StepFn,
    TerminalSample,
    crossing_fraction,
    dispatch,
    euler_proposal,
    run_controlled,
    split_clock,
    steps_for,
    time_change,
)
from .streams import STREAM_AUX, batches, brownian_normals, path_generator

CONTACT_TOL = 1e-8
PARALLEL_TOL = 1e-6
CROSSING_BAND = 1e-3
HOLD_STALL_FACTOR = 50
SPACING_SAMPLES = 512

Kernel = Callable[[np.random.Generator, FloatArray], FloatArray]
"""(generator, exit point) -> jump target."""

KERNELS: dict[str, Callable[..., Kernel]] = {}

JumpConstruction = Literal["constrained", "controlled"]


class KernelEscapeError(SimulationError):
    pass


def register_kernel(name: str) -> Callable[[Callable[..., Kernel]], Callable[..., Kernel]]:
    """Register a kernel factory under `name`; scenario `jump.params` are its keyword arguments."""

    def decorator(factory: Callable[..., Kernel]) -> Callable[..., Kernel]:
        KERNELS[name] = factory
        return factory

    return decorator


@register_kernel("uniform_disc")
def uniform_disc(center: Sequence[float], radius: float) -> Kernel:
    c = as_point(center)
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")

    def sample(gen: np.random.Generator, x: FloatArray) -> FloatArray:
        u = gen.random(2)
        r = radius * math.sqrt(u[0])
        angle = 2.0 * math.pi * u[1]
        return c + r * np.array([math.cos(angle), math.sin(angle)])

    return sample


@register_kernel("point_mass")
def point_mass(point: Sequence[float]) -> Kernel:
    p = as_point(point)

    def sample(gen: np.random.Generator, x: FloatArray) -> FloatArray:
        return p.copy()

    return sample


def make_kernel(name: str, params: dict[str, Any]) -> Kernel:
    if name not in KERNELS:
        raise ScenarioError(f"Unknown jump kernel {name!r}, expected one of {sorted(KERNELS)}")
    try:
        return KERNELS[name](**params)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"jump.params for {name}: {e}") from e


def smoothstep_cutoff(psi: FloatArray, radius: float) -> FloatArray:
    """1 on {psi >= 0}, 0 on {psi <= -radius}, C1 smoothstep in between."""
    s = np.clip(1.0 + psi / radius, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class JumpScenario:
    scenario: Scenario
    kernel: Kernel
    kernel_name: str
    cutoff_radius: float

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "JumpScenario":
        """Wrap a scenario carrying a `jump:` block.

        Raises:
            ScenarioError: If the block is missing, the domain has more than one piece or
                the kernel is unknown.
        """
        jump = scenario.config.jump
        if jump is None:
            raise ScenarioError(f"Scenario {scenario.name} has no jump block")
        if scenario.domain.m != 1:
            raise ScenarioError(f"A jump scenario needs a single smooth piece, got {scenario.domain.m}")
        return cls(scenario, make_kernel(jump.kernel, jump.params), jump.kernel, jump.cutoff_radius)

    def __reduce__(self) -> tuple[Any, ...]:
        # kernels are closures; workers rebuild them from the scenario
        return (JumpScenario.from_scenario, (self.scenario,))

    @property
    def domain(self) -> Domain:
        return self.scenario.domain

    @property
    def box(self) -> BoundingBox:
        return self.scenario.domain.box

    def cutoff(self, xs: FloatArray) -> FloatArray:
        psi = self.domain.pieces[0].psi.evaluate_many(xs, invalid="nan")
        return smoothstep_cutoff(np.nan_to_num(psi, nan=-math.inf), self.cutoff_radius)

    def coefficients(self, xs: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Drift and diffusion faded out beyond the cutoff band around the domain."""
        w = self.cutoff(xs)
        return self.scenario.b.evaluate_many(xs) * w[:, None], self.scenario.sigma.evaluate_many(xs) * w[:, None, None]

    def jump_target(self, gen: np.random.Generator, x: FloatArray, step: int = -1, path_id: int = -1) -> FloatArray:
        """Kernel sample for a jump from `x`.

        Raises:
            KernelEscapeError: If the sample is not in the open domain.
        """
        target = self.kernel(gen, x)
        if not self.domain.interior_many(target.reshape(1, 2))[0]:
            raise KernelEscapeError(
                f"Kernel {self.kernel_name} sampled {target.tolist()} outside the domain (step {step}, path {path_id})"
            )
        return target


def load_jump_scenario(path: Union[str, Path]) -> JumpScenario:
    return JumpScenario.from_scenario(load_scenario(path))


# Controlled construction


class _JumpStepper:
    """Control steps with exponential holds on the boundary clock followed by kernel jumps.

    Holds, jump targets and the residual diffusion after a jump draw from each path's
    auxiliary stream.
    """

    def __init__(self, js: JumpScenario, seed: int, path_ids: Sequence[int]) -> None:
        self.js = js
        self.path_ids = list(path_ids)
        self.aux = [path_generator(seed, pid, STREAM_AUX) for pid in path_ids]
        self.hold = np.full(len(self.path_ids), np.nan)
        self.events: list[list[Event]] = [[] for _ in self.path_ids]

    def _jump(self, k: int, r: int, x: FloatArray, interior: float) -> FloatArray:
        """Jump from x, then diffuse for the `interior` part of the step; a residual step leaving the domain is dropped."""
        gen = self.aux[r]
        target = self.js.jump_target(gen, x, k, self.path_ids[r])
        self.events[r].append(Event("jump", k, (float(x[0]), float(x[1])), (float(target[0]), float(target[1]))))
        z = gen.standard_normal(2) * math.sqrt(interior) if interior > 0 else np.zeros(2)
        pt = target.reshape(1, 2)
        drift, diffusion = self.js.coefficients(pt)
        prop = euler_proposal(pt, interior, z.reshape(1, 2), drift, diffusion)
        return prop[0] if self.js.domain.contains_many(prop)[0] else target

    def __call__(self, k: int, idx: np.ndarray, cur: FloatArray, dW: FloatArray, ds: float) -> ControlledStep:
        domain = self.js.domain
        n = len(cur)
        out = ControlledStep(
            y=cur.copy(),
            dl0=np.full(n, ds),
            dl1=np.zeros(n),
            u=np.full((n, 2), np.nan),
            contact=np.full((n, 2), np.nan),
            kind=np.full(n, DIFFUSE),
        )
        hold = self.hold[idx]
        holding = np.isfinite(hold)
        waiting = holding & (hold >= ds)
        rows = np.flatnonzero(waiting)
        out.dl0[rows] = 0.0
        out.dl1[rows] = ds
        out.contact[rows] = cur[rows]
        out.kind[rows] = HOLD
        self.hold[idx[rows]] = hold[rows] - ds
        for pos in np.flatnonzero(holding & ~waiting):
            r = int(idx[pos])
            dl0, dl1 = split_clock(np.array([ds - hold[pos]]), ds)
            out.dl0[pos], out.dl1[pos] = dl0[0], dl1[0]
            out.contact[pos] = cur[pos]
            out.y[pos] = self._jump(k, r, cur[pos], float(dl0[0]))
            out.kind[pos] = JUMP
            self.hold[r] = np.nan
        rows = np.flatnonzero(~holding)
        if rows.size == 0:
            return out
        drift, diffusion = self.js.coefficients(cur[rows])
        prop = euler_proposal(cur[rows], ds, dW[rows], drift, diffusion)
        leaving = ~domain.contains_many(prop)
        out.y[rows[~leaving]] = prop[~leaving]
        hit = rows[leaving]
        if hit.size == 0:
            return out
        f = crossing_fraction(domain, cur[hit], prop[leaving])
        crossing = cur[hit] + f[:, None] * (prop[leaving] - cur[hit])
        dl0, dl1 = split_clock(f * ds, ds)
        for j, pos in enumerate(hit):
            r = int(idx[pos])
            x = crossing[j]
            duration = float(self.aux[r].exponential())
            self.events[r].append(Event("hold", k, (float(x[0]), float(x[1])), duration=duration))
            out.dl0[pos], out.dl1[pos] = dl0[j], dl1[j]
            out.contact[pos] = x
            out.y[pos] = x
            out.kind[pos] = HOLD
            left = duration - dl1[j]
            if left > 0:
                self.hold[r] = left
            else:
                out.y[pos] = self._jump(k, r, x, 0.0)
                out.kind[pos] = JUMP
        return out


def _jump_initial(js: JumpScenario, seed: int, path_ids: Sequence[int]) -> FloatArray:
    return np.array([js.scenario.initial_point(seed, pid) for pid in path_ids]).reshape(len(path_ids), 2)


def simulate_jump_controlled(
    js: JumpScenario, seed: int, S: float, ds: float, path_id: int = 0, until_l0: Optional[float] = None
) -> ControlledPathRecord:
    """Controlled construction: diffuse on lambda0, hold on the boundary clock for Exp(1), then jump.

    Hold and jump events are recorded on the returned record.

    Raises:
        KernelEscapeError: If a jump target falls outside the domain.
    """
    y0 = _jump_initial(js, seed, [path_id])
    stepper = _JumpStepper(js, seed, [path_id])
    step_fn: StepFn = stepper
    run = run_controlled(y0, seed, [path_id], ds, steps_for(S, ds), step_fn, until_l0, settle=False)
    return run.record(0, y0, ds, seed, path_id, tuple(stepper.events[0]))


# Constrained construction


@dataclass
class _JumpTrajectories:
    x: FloatArray
    left_limit: FloatArray
    at_boundary: np.ndarray
    dW: FloatArray
    events: list[list[Event]]


def _constrained_run(js: JumpScenario, seed: int, path_ids: Sequence[int], T: float, dt: float) -> _JumpTrajectories:
    """Constrained Euler on a batch.

    A row crossing the boundary at fraction f of a step sits at the crossing point for one
    grid instant. The next step jumps and diffuses from the target for that step plus the
    (1 - f) dt left over from the crossing; a residual step leaving the domain is dropped.
    """
    domain = js.domain
    n = steps_for(T, dt)
    n_paths = len(path_ids)
    noise = np.stack([brownian_normals(seed, pid, n) for pid in path_ids])
    aux = [path_generator(seed, pid, STREAM_AUX) for pid in path_ids]
    events: list[list[Event]] = [[] for _ in path_ids]
    x = np.empty((n_paths, n + 1, 2))
    x[:, 0] = _jump_initial(js, seed, path_ids)
    left = np.full((n_paths, n + 1, 2), np.nan)
    at_boundary = np.zeros((n_paths, n + 1), dtype=bool)
    carried = np.zeros(n_paths)
    dW = np.zeros((n_paths, n, 2))
    root = math.sqrt(dt)
    for k in range(n):
        cur = x[:, k]
        x[:, k + 1] = cur
        jumping = at_boundary[:, k]
        for r in np.flatnonzero(jumping):
            target = js.jump_target(aux[r], cur[r], k, path_ids[r])
            left[r, k + 1] = cur[r]
            events[r].append(Event("jump", k + 1, (float(cur[r, 0]), float(cur[r, 1])), (float(target[0]), float(target[1]))))
            length = carried[r] + dt
            dW[r, k] = aux[r].standard_normal(2) * math.sqrt(length)
            pt = target.reshape(1, 2)
            drift, diffusion = js.coefficients(pt)
            prop = euler_proposal(pt, length, dW[r, k].reshape(1, 2), drift, diffusion)
            x[r, k + 1] = prop[0] if domain.contains_many(prop)[0] else target
            carried[r] = 0.0
        rows = np.flatnonzero(~jumping)
        if rows.size == 0:
            continue
        dW[rows, k] = noise[rows, k] * root
        drift, diffusion = js.coefficients(cur[rows])
        prop = euler_proposal(cur[rows], dt, dW[rows, k], drift, diffusion)
        leaving = ~domain.contains_many(prop)
        x[rows[~leaving], k + 1] = prop[~leaving]
        hit = rows[leaving]
        if hit.size:
            f = crossing_fraction(domain, cur[hit], prop[leaving])
            x[hit, k + 1] = cur[hit] + f[:, None] * (prop[leaving] - cur[hit])
            at_boundary[hit, k + 1] = True
            carried[hit] = (1.0 - f) * dt
    return _JumpTrajectories(x, left, at_boundary, dW, events)


def _constrained_record(traj: _JumpTrajectories, row: int, dt: float, seed: int, path_id: int) -> PathRecord:
    n = traj.dW.shape[1]
    return PathRecord(
        t=np.arange(n + 1) * dt,
        x=traj.x[row].copy(),
        lam=np.zeros(n + 1),
        gamma=np.full((n + 1, 2), np.nan),
        boundary=traj.at_boundary[row].copy(),
        dW=traj.dW[row].copy(),
        seed=seed,
        path_id=path_id,
        left_limit=traj.left_limit[row].copy(),
        events=tuple(traj.events[row]),
    )


def simulate_jump_constrained(js: JumpScenario, seed: int, T: float, dt: float, path_id: int = 0) -> PathRecord:
    """Euler path that stops at the boundary crossing and jumps on the next step.

    A state flagged `boundary` sits on the boundary for one grid instant. The following
    state starts from a kernel sample and diffuses for the time left since the crossing,
    with the boundary point kept as its left limit.
    """
    return _constrained_record(_constrained_run(js, seed, [path_id], T, dt), 0, dt, seed, path_id)


# Batches


@dataclass(frozen=True)
class _JumpJob:
    js: JumpScenario
    seed: int
    path_ids: tuple[int, ...]
    T: float
    dt: float
    construction: JumpConstruction


def _check_jump_construction(construction: str) -> None:
    if construction not in ("constrained", "controlled"):
        raise ValueError(f"Unknown jump construction {construction!r}, expected 'constrained' or 'controlled'")


def _jump_jobs(js: JumpScenario, seed: int, path_ids: Sequence[int], T: float, dt: float, construction: JumpConstruction) -> list[_JumpJob]:
    _check_jump_construction(construction)
    return [_JumpJob(js, seed, tuple(group), T, dt, construction) for group in batches(list(path_ids))]


def _jump_terminal_job(job: _JumpJob) -> FloatArray:
    if job.construction == "constrained":
        return _constrained_run(job.js, job.seed, job.path_ids, job.T, job.dt).x[:, -1].copy()
    y0 = _jump_initial(job.js, job.seed, job.path_ids)
    n_max = HOLD_STALL_FACTOR * steps_for(job.T, job.dt)
    stepper = _JumpStepper(job.js, job.seed, job.path_ids)
    run = run_controlled(y0, job.seed, job.path_ids, job.dt, n_max, stepper, until_l0=job.T, keep=False, settle=False)
    if not np.all(run.reached):
        pid = job.path_ids[int(np.argmin(run.reached))]
        raise ClockStalledError(f"Interior clock of path {pid} did not reach {job.T} within {n_max} control steps")
    return run.y_final


def _jump_record_job(job: _JumpJob) -> list[PathRecord]:
    if job.construction == "constrained":
        traj = _constrained_run(job.js, job.seed, job.path_ids, job.T, job.dt)
        return [_constrained_record(traj, r, job.dt, job.seed, pid) for r, pid in enumerate(job.path_ids)]
    S = HOLD_STALL_FACTOR * job.T
    return [
        time_change(simulate_jump_controlled(job.js, job.seed, S, job.dt, pid, until_l0=job.T), horizon=job.T, dt=job.dt)
        for pid in job.path_ids
    ]


def simulate_jump_batch(
    js: JumpScenario, seed: int, path_ids: Sequence[int], T: float, dt: float, construction: JumpConstruction = "constrained", workers: int = 1
) -> list[PathRecord]:
    """Real-time records; the controlled construction is mapped through `time_change`."""
    jobs = _jump_jobs(js, seed, path_ids, T, dt, construction)
    return [rec for group in dispatch(_jump_record_job, jobs, workers) for rec in group]


def simulate_jump_terminal(
    js: JumpScenario, seed: int, n_paths: int, T: float, dt: float, construction: JumpConstruction = "constrained", workers: int = 1
) -> TerminalSample:
    """Terminal states of paths 0..n_paths-1; local time is identically zero for jump paths."""
    jobs = _jump_jobs(js, seed, range(n_paths), T, dt, construction)
    x = np.concatenate(dispatch(_jump_terminal_job, jobs, workers))
    logging.info(f"Simulated {n_paths} {construction} jump paths of {js.scenario.name} to T={T} with dt={dt}")
    return TerminalSample(
        path_ids=np.arange(n_paths, dtype=np.int64),
        x=x,
        lam=np.zeros(n_paths),
        seed=seed,
        construction=construction,
    )


def hold_durations(records: Sequence[ControlledPathRecord]) -> FloatArray:
    """Sampled hold durations over all boundary visits, in record order."""
    return np.array([ev.duration for rec in records for ev in rec.events if ev.kind == "hold"])


# Exit compatibility


def check_exit_compatibility(js: JumpScenario, region: Union[ImplicitRegion, Ball]) -> CheckReport:
    """Check that the boundary of `region` meets the domain boundary in a null set.

    The boundary of `region` is sampled; samples lying on the domain boundary with parallel
    normals are contacts. Two or more contacts mean a shared arc and fail the check.
    Otherwise the smallest angle between the two boundaries near their crossings is
    reported.
    """
    tol = js.domain.tolerances
    implicit = region.as_implicit() if isinstance(region, Ball) else region
    piece = js.domain.pieces[0]
    settings = {"contact_tol": CONTACT_TOL, "parallel_tol": PARALLEL_TOL, "exit_samples": float(tol.exit_samples)}
    pts = sample_level_set(implicit.phi, js.box, tol.exit_samples, tol=tol.boundary_tol)
    if len(pts) == 0:
        return CheckReport(
            condition_id="EXIT", status="Pass", subject="region", tolerances=settings, notes=["Region boundary not met inside the box"]
        )
    psi = piece.psi.evaluate_many(pts, invalid="nan")
    n_region = implicit.phi.gradient.evaluate_many(pts, invalid="nan")
    n_domain = piece.grad.evaluate_many(pts, invalid="nan")
    norms = np.hypot(n_region[:, 0], n_region[:, 1]) * np.hypot(n_domain[:, 0], n_domain[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        sine = np.abs(n_region[:, 0] * n_domain[:, 1] - n_region[:, 1] * n_domain[:, 0]) / norms
    contact = (np.abs(psi) <= CONTACT_TOL) & (sine <= PARALLEL_TOL)
    spacing = _median_spacing(pts)
    estimates = {"samples": float(len(pts)), "contacts": float(contact.sum()), "shared_arclength": float(contact.sum()) * spacing}
    near = np.abs(psi) <= CROSSING_BAND
    if np.any(near & ~contact):
        estimates["min_crossing_angle"] = float(np.min(np.arcsin(np.clip(sine[near & ~contact], 0.0, 1.0))))
    if contact.sum() >= 2:
        first = pts[np.flatnonzero(contact)[0]]
        logging.debug(f"Exit region shares boundary with the domain near {point_key(first)}")
        witness = Witness(point=(float(first[0]), float(first[1])), evidence={"contacts": int(contact.sum())})
        return CheckReport(condition_id="EXIT", status="Fail", subject="region", witnesses=[witness], tolerances=settings, estimates=estimates)
    return CheckReport(condition_id="EXIT", status="Pass", subject="region", tolerances=settings, estimates=estimates)


def _median_spacing(pts: FloatArray) -> float:
    if len(pts) < 2:
        return 0.0
    anchors = pts[:SPACING_SAMPLES]
    d = np.hypot(anchors[:, None, 0] - pts[None, :, 0], anchors[:, None, 1] - pts[None, :, 1])
    d[np.arange(len(anchors)), np.arange(len(anchors))] = np.inf
    return float(np.median(d.min(axis=1)))
