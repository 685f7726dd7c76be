"""Pushback of proposals that leave the closure of D along the reflection directions."""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .base import FloatArray, ObliquaError, rowdot, unit_rows
from .geometry import Domain, newton_project


class SimulationError(ObliquaError):
    pass


class ProjectionFailureError(SimulationError):
    def __init__(self, message: str, step: int = -1, path_id: int = -1) -> None:
        self.step = step
        self.path_id = path_id
        super().__init__(f"{message} (step {step}, path {path_id})")


@dataclass
class PushResult:
    """Row-wise pushback outcome; rows without a push carry zero mass and NaN direction."""

    x: FloatArray
    mass: FloatArray
    direction: FloatArray
    pushed: np.ndarray


def violated_mask(domain: Domain, xs: FloatArray) -> np.ndarray:
    """Rows outside the closure of D by more than the boundary tolerance."""
    values = domain.psi_values(xs)
    return np.any(~(values >= -domain.tolerances.boundary_tol), axis=1)


def _push_single_many(domain: Domain, i: int, xs: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray, np.ndarray]:
    """Push rows of `xs` onto {psi_i = 0} along unit g_i at their Newton projections.

    Returns (landing points, masses, unit directions, success mask). Each row iterates
    independently and freezes once converged.
    """
    tol = domain.tolerances
    piece = domain.pieces[i]
    target = 0.01 * tol.boundary_tol
    feet = newton_project(piece.psi, xs, iters=tol.max_push_iters, tol=target)
    u = unit_rows(piece.g.evaluate_many(np.nan_to_num(feet), invalid="nan"))
    ok = np.isfinite(feet).all(axis=1) & np.isfinite(u).all(axis=1)
    eta = np.zeros(len(xs))
    active = ok.copy()
    done = np.zeros(len(xs), dtype=bool)
    for _ in range(tol.max_push_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        q = xs[idx] + eta[idx, None] * u[idx]
        values = piece.psi.evaluate_many(q, invalid="nan")
        slope = rowdot(piece.grad.evaluate_many(q, invalid="nan"), u[idx])
        converged = np.abs(values) <= target
        done[idx[converged]] = True
        stepping = ~converged & np.isfinite(values) & (slope > 0)
        eta[idx[stepping]] -= values[stepping] / slope[stepping]
        active[idx[~stepping]] = False
    success = done & (eta >= 0)
    return xs + eta[:, None] * u, eta, u, success


def _pair_push(domain: Domain, x: FloatArray, i: int, j: int) -> Optional[tuple[FloatArray, float, FloatArray]]:
    tol = domain.tolerances
    target = 0.01 * tol.boundary_tol
    pieces = (domain.pieces[i], domain.pieces[j])
    dirs = []
    for piece in pieces:
        foot = newton_project(piece.psi, x.reshape(1, 2), iters=tol.max_push_iters, tol=target)[0]
        if not np.all(np.isfinite(foot)):
            return None
        dirs.append(unit_rows(piece.g.evaluate_many(foot.reshape(1, 2), invalid="nan"))[0])
    basis = np.column_stack(dirs)
    if not np.all(np.isfinite(basis)):
        return None
    eta = np.zeros(2)
    for _ in range(tol.max_push_iters):
        q = x + basis @ eta
        try:
            values = np.array([p.psi.evaluate(q) for p in pieces])
            jac = np.array([p.grad.evaluate(q) @ basis for p in pieces])
        except ObliquaError:
            return None
        if np.max(np.abs(values)) <= target:
            break
        if abs(float(np.linalg.det(jac))) <= 1e-14:
            return None
        eta = eta - np.linalg.solve(jac, values)
    else:
        return None
    if np.any(eta < -1e-12):
        return None
    eta = np.maximum(eta, 0.0)
    push = basis @ eta
    return x + push, float(eta.sum()), push


def _push_along(domain: Domain, x: FloatArray, d: FloatArray) -> Optional[tuple[FloatArray, float]]:
    """Smallest eta >= 0 with x + eta d in the closure of D, by doubling then bracketing."""

    def depth(eta: float) -> float:
        values = domain.psi_values((x + eta * d).reshape(1, 2))[0]
        return float(np.min(values)) if np.all(np.isfinite(values)) else -math.inf

    reach = 1e-8
    limit = 2.0 * domain.box.diameter
    while depth(reach) < 0:
        reach *= 2.0
        if reach > limit:
            return None
    eta = brentq(depth, 0.0, reach, xtol=1e-15) if depth(0.0) < 0 else 0.0
    while depth(eta) < -domain.tolerances.boundary_tol and eta < reach:
        eta = min(reach, eta + 1e-14 + 1e-12 * eta)
    return x + eta * d, eta


def push_one(domain: Domain, x: FloatArray, step: int = -1, path_id: int = -1) -> tuple[FloatArray, float, FloatArray]:
    """Minimal-mass pushback of one proposal outside the closure of D.

    Candidates are single-piece pushes and two-piece pushes solved by Newton on the
    nonnegative coefficients; among those landing in the closure the one with the smallest
    coefficient sum wins, and its mass is the length of its push. Near a declared corner
    the corner push direction is the fallback.

    Raises:
        ProjectionFailureError: If no candidate lands in the closure of D.
    """
    tol = domain.tolerances
    values = domain.psi_values(x.reshape(1, 2))[0]
    violated = [k for k in range(domain.m) if not values[k] >= -tol.boundary_tol]
    # (sum of coefficients, pushed distance, landing, unit direction)
    candidates: list[tuple[float, float, FloatArray, FloatArray]] = []
    for i in violated:
        pts, eta, u, ok = _push_single_many(domain, i, x.reshape(1, 2))
        if ok[0] and not violated_mask(domain, pts)[0]:
            candidates.append((float(eta[0]), float(eta[0]), pts[0], u[0]))
    for i, j in itertools.combinations(range(domain.m), 2):
        if i not in violated and j not in violated:
            continue
        result = _pair_push(domain, x, i, j)
        if result is not None and not violated_mask(domain, result[0].reshape(1, 2))[0]:
            landing, total, push = result
            norm = float(np.hypot(push[0], push[1]))
            if norm > 0:
                candidates.append((total, norm, landing, push / norm))
    if candidates:
        _, mass, landing, direction = min(candidates, key=lambda c: c[0])
        return landing, mass, direction
    corner, _ = domain.nearest_corner(x)
    if corner is not None:
        d = domain.corner_push_directions.get(corner.point)
        if d is not None:
            result = _push_along(domain, x, d)
            if result is not None:
                logging.debug(f"Corner fallback push at step {step}, path {path_id}")
                return result[0], result[1], d
    raise ProjectionFailureError(f"No pushback lands in the closure of D from {x.tolist()}", step, path_id)


def reflect_many(domain: Domain, xs: FloatArray, step: int = -1, path_ids: Optional[list[int]] = None) -> PushResult:
    """Push every row of `xs` lying outside the closure of D back onto it.

    Rows with one violated piece go through a vectorized single-piece push; the rest,
    and rows whose single push lands outside, go through `push_one`.
    """
    tol = domain.tolerances
    out = xs.copy()
    mass = np.zeros(len(xs))
    direction = np.full((len(xs), 2), np.nan)
    values = domain.psi_values(xs)
    bad = ~(values >= -tol.boundary_tol)
    pushed = np.any(bad, axis=1)
    if not np.any(pushed):
        return PushResult(out, mass, direction, pushed)
    leftover = np.zeros(len(xs), dtype=bool)
    single = pushed & (bad.sum(axis=1) == 1)
    leftover |= pushed & ~single
    for i in range(domain.m):
        rows = np.flatnonzero(single & bad[:, i])
        if rows.size == 0:
            continue
        pts, eta, u, ok = _push_single_many(domain, i, xs[rows])
        ok &= ~violated_mask(domain, pts)
        out[rows[ok]] = pts[ok]
        mass[rows[ok]] = eta[ok]
        direction[rows[ok]] = u[ok]
        leftover[rows[~ok]] = True
    for r in np.flatnonzero(leftover):
        pid = -1 if path_ids is None else path_ids[r]
        out[r], mass[r], direction[r] = push_one(domain, xs[r], step, pid)
    return PushResult(out, mass, direction, pushed)


def control_directions(domain: Domain, xs: FloatArray) -> FloatArray:
    """Boundary control direction at points on (or just off) the boundary.

    Within the corner band of a declared corner this is the corner push direction;
    elsewhere it is unit g of the piece with the smallest psi.
    """
    tol = domain.tolerances
    values = domain.psi_values(xs)
    active = np.argmin(np.where(np.isfinite(values), values, np.inf), axis=1)
    out = np.full((len(xs), 2), np.nan)
    for i in range(domain.m):
        rows = np.flatnonzero(active == i)
        if rows.size:
            out[rows] = unit_rows(domain.pieces[i].g.evaluate_many(xs[rows], invalid="nan"))
    for corner in domain.corners:
        d = domain.corner_push_directions.get(corner.point)
        if d is None:
            continue
        near = np.hypot(xs[:, 0] - corner.point[0], xs[:, 1] - corner.point[1]) <= tol.corner_band
        out[near] = d
    return out
