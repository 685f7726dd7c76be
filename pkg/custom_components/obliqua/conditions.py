"""Evidence-bearing checks of the domain, direction and coefficient conditions."""

import logging
import math
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .base import FloatArray, PointLike, as_point, point_key, unit_rows
from .expr import EvaluationDomainError, KinkError, MatrixField, VectorField
from .geometry import (
    AmbiguousTangentError,
    Corner,
    DegenerateGradientError,
    Domain,
    EmptyBoundaryError,
    NotACornerError,
    NotACuspError,
    boundary_sample,
    classify_corner,
    direction_generators,
    feasible_direction,
    local_components,
    normal_cone,
    normal_with_fallback,
    normals_many,
    undeclared_corners,
)
from .models import CheckReport, CheckStatus, ConditionId, Witness

if TYPE_CHECKING:
    from .scenario import Scenario

REGULARITY_SCALES = tuple(2.0**-k for k in range(4, 19))
CONNECTIVITY_RADII = (2.0**-4, 2.0**-6)
MINIMALITY_GRIDS = (128, 512)
MINIMALITY_NUDGES = (1e-3, 1e-5, 1e-7)
LIPSCHITZ_SUBSAMPLE = 512
COEFFICIENT_GRID = 33


def _report(
    condition_id: ConditionId,
    status: CheckStatus,
    subject: str,
    tolerances: dict[str, float],
    witnesses: Optional[list[Witness]] = None,
    estimates: Optional[dict[str, float]] = None,
    notes: Optional[list[str]] = None,
) -> CheckReport:
    report = CheckReport(
        condition_id=condition_id,
        status=status,
        subject=subject,
        witnesses=witnesses or [],
        tolerances=tolerances,
        estimates=estimates or {},
        notes=notes or [],
    )
    logging.debug(f"{condition_id} [{subject}]: {status}")
    return report


def _witness(x: Optional[PointLike], **evidence: float) -> Witness:
    point = None if x is None else (float(x[0]), float(x[1]))
    return Witness(point=point, evidence=evidence)


def sample_boundaries(domain: Domain, count: Optional[int] = None) -> dict[int, FloatArray]:
    """Boundary samples for every piece; pieces with an empty boundary map to an empty array."""
    count = count or domain.tolerances.boundary_samples
    samples: dict[int, FloatArray] = {}
    for i, piece in enumerate(domain.pieces):
        try:
            samples[i] = boundary_sample(domain, i, count)
        except EmptyBoundaryError:
            logging.warning(f"Piece {piece.name} has no boundary points in the closure of D")
            samples[i] = np.empty((0, 2))
    return samples


def _lipschitz_estimate(points: FloatArray, values: FloatArray) -> float:
    """Largest difference quotient |f(x) - f(y)| / |x - y| over pairs at distance > 1e-9."""
    if len(points) < 2:
        return 0.0
    stride = max(1, len(points) // LIPSCHITZ_SUBSAMPLE)
    pts, vals = points[::stride], values[::stride].reshape(len(points[::stride]), -1)
    dist = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    diff = np.sqrt(np.sum((vals[:, None, :] - vals[None, :, :]) ** 2, axis=2))
    mask = dist > 1e-9
    if not np.any(mask):
        return 0.0
    return float(np.max(diff[mask] / dist[mask]))


# Domain conditions


def _enlarging_point(domain: Domain, j: int, boundary: FloatArray) -> Optional[FloatArray]:
    others = [i for i in range(domain.m) if i != j]
    for n in MINIMALITY_GRIDS:
        grid = domain.box.grid(n, margin=0.25)
        values = domain.psi_values(grid)
        ok = np.all(values[:, others] > 0, axis=1) & (values[:, j] <= 0) if others else values[:, j] <= 0
        hits = np.flatnonzero(ok)
        if hits.size:
            return grid[hits[0]]
    if len(boundary):
        normals = normals_many(domain.pieces[j], boundary)
        for delta in MINIMALITY_NUDGES:
            pushed = boundary - delta * normals
            values = domain.psi_values(pushed)
            ok = np.all(values[:, others] > 0, axis=1) & (values[:, j] <= 0) if others else values[:, j] <= 0
            hits = np.flatnonzero(ok)
            if hits.size:
                return pushed[hits[0]]
    return None


def check_minimality(domain: Domain, samples: Optional[dict[int, FloatArray]] = None) -> CheckReport:
    """For each piece j, search for a point of the other pieces' intersection outside D.

    Passes iff such a point exists for every j, i.e. dropping any piece strictly enlarges D.
    The search scans a coarse then a fine grid over the enlarged bounding box, then nudges
    boundary samples of piece j outward.
    """
    samples = samples if samples is not None else sample_boundaries(domain)
    witnesses: list[Witness] = []
    failed: list[int] = []
    for j in range(domain.m):
        found = _enlarging_point(domain, j, samples.get(j, np.empty((0, 2))))
        if found is not None:
            witnesses.append(_witness(found, piece=j, psi=float(domain.pieces[j].psi.evaluate(found))))
            continue
        failed.append(j)
        grid = domain.box.grid(MINIMALITY_GRIDS[-1], margin=0.25)
        values = domain.psi_values(grid)
        others = [i for i in range(domain.m) if i != j]
        inside = np.all(values[:, others] > 0, axis=1) if others else np.ones(len(grid), dtype=bool)
        if np.any(inside):
            k = int(np.flatnonzero(inside)[np.argmin(values[inside, j])])
            witnesses.append(_witness(grid[k], piece=j, min_psi=float(values[k, j])))
        else:
            witnesses.append(_witness(None, piece=j))
    if failed:
        return _report(
            "D.i",
            "Fail",
            "minimality",
            {},
            [w for w in witnesses if w.evidence.get("piece") in failed],
            {"redundant_piece": float(failed[0])},
            [f"Dropping piece {j} does not enlarge D" for j in failed],
        )
    return _report("D.i", "Pass", "minimality", {}, witnesses)


def check_gradient_floor(domain: Domain, samples: dict[int, FloatArray]) -> list[CheckReport]:
    floor = domain.tolerances.grad_floor
    reports = []
    for i, pts in sorted(samples.items()):
        piece = domain.pieces[i]
        subject = f"gradient:{piece.name}"
        if len(pts) == 0:
            reports.append(
                _report("D.i", "Fail", subject, {"grad_floor": floor}, [_witness(None, piece=i)], notes=["Empty boundary"])
            )
            continue
        grads = piece.grad.evaluate_many(pts, invalid="nan")
        norms = np.hypot(grads[:, 0], grads[:, 1])
        norms = np.where(np.isfinite(norms), norms, 0.0)
        k = int(np.argmin(norms))
        estimates = {"min_grad_norm": float(norms[k])}
        if norms[k] > floor:
            reports.append(_report("D.i", "Pass", subject, {"grad_floor": floor}, estimates=estimates))
        else:
            reports.append(
                _report("D.i", "Fail", subject, {"grad_floor": floor}, [_witness(pts[k], grad_norm=float(norms[k]))], estimates)
            )
    return reports


def check_corner_declarations(domain: Domain, samples: dict[int, FloatArray]) -> CheckReport:
    """Declared corners lie on exactly their two pieces; no undeclared near-corners are sampled."""
    tol = domain.tolerances.corner_tol
    witnesses: list[Witness] = []
    notes: list[str] = []
    for corner in domain.corners:
        values = np.abs(domain.psi_values(np.array([corner.point]))[0])
        active = sorted(int(k) for k in np.flatnonzero(values <= tol))
        if active != sorted(corner.pieces):
            witnesses.append(_witness(corner.point, **{f"psi_{k}": float(values[k]) for k in range(domain.m)}))
            notes.append(f"Corner {corner.point}: active pieces {active}, declared {list(corner.pieces)}")
    for x, pair in undeclared_corners(domain, samples):
        witnesses.append(_witness(x, piece_i=pair[0], piece_j=pair[1]))
        notes.append(f"Undeclared near-corner at {point_key(x)} between pieces {pair[0]} and {pair[1]}")
        logging.warning(notes[-1])
    status: CheckStatus = "Fail" if witnesses else "Pass"
    return _report("D.ii", status, "corners", {"corner_tol": tol}, witnesses, {"declared": float(len(domain.corners))}, notes)


def _boundary_point_near(domain: Domain, index: int, origin: FloatArray, n0: FloatArray, rho: float) -> Optional[FloatArray]:
    psi = domain.pieces[index].psi

    def along(s: float) -> float:
        return psi.evaluate(origin + s * n0)

    try:
        lo, hi = along(-rho), along(rho)
    except EvaluationDomainError:
        return None
    if lo * hi > 0:
        return None
    s = brentq(along, -rho, rho, xtol=max(rho * rho * 1e-8, 1e-300))
    x = origin + s * n0
    if not domain.contains(x, slack=domain.tolerances.corner_tol):
        return None
    return x


def _curvature_quotients(domain: Domain, corner: Corner, index: int, n0: FloatArray) -> list[float]:
    x0 = np.array(corner.location)
    t = np.array([n0[1], -n0[0]])
    quotients = []
    for rho in REGULARITY_SCALES:
        best: Optional[float] = None
        for side in (1.0, -1.0):
            x = _boundary_point_near(domain, index, x0 + side * rho * t, n0, rho)
            if x is None:
                continue
            try:
                n, _ = normal_with_fallback(domain.pieces[index], x, domain.tolerances.grad_floor)
            except DegenerateGradientError:
                continue
            q = float(np.hypot(*(n - n0)) / np.hypot(*(x - x0)))
            best = q if best is None else max(best, q)
        if best is not None:
            quotients.append(best)
    return quotients


def check_corner_regularity(domain: Domain, corner: Corner) -> CheckReport:
    """Regularity near a corner.

    Cone point: the quotients |n(x) - n(x0)| / |x - x0| along each piece, sampled at dyadic
    distances, must settle below the regularity cap. Cusp point: the cusp limit must converge.
    """
    tol = domain.tolerances
    subject = point_key(corner.location)
    if corner.kind == "cusp":
        spread = corner.cusp_limit_spread
        limit = corner.cusp_limit_L
        tolerances = {"cusp_tol": tol.cusp_tol}
        if limit is None or spread is None:
            return _report("D.iii", "Inconclusive", subject, tolerances, notes=["Cusp limit could not be estimated"])
        estimates = {"cusp_limit_L": limit, "spread": spread}
        verdict: CheckStatus = "Pass" if spread < 1e-3 * max(1.0, abs(limit)) else "Inconclusive"
        return _report("D.iii", verdict, subject, tolerances, [_witness(corner.location, L=limit)], estimates)

    tolerances = {"regularity_cap": tol.regularity_cap}
    estimates: dict[str, float] = {}
    witnesses: list[Witness] = []
    status: CheckStatus = "Pass"
    for index, n0 in zip(corner.index_set, corner.normals):
        quotients = _curvature_quotients(domain, corner, index, np.array(n0))
        if len(quotients) < 4:
            return _report(
                "D.iii",
                "Inconclusive",
                subject,
                tolerances,
                notes=[f"Too few boundary points of piece {index} found near the corner"],
            )
        tail = quotients[-4:]
        estimates[f"limsup_{index}"] = max(tail)
        trace = {f"q_{k}": q for k, q in enumerate(quotients)}
        if max(tail) > tol.regularity_cap:
            status = "Fail"
            witnesses.append(_witness(corner.location, piece=index, **trace))
        elif max(tail) > 1.5 * min(tail) + 1e-3 and status == "Pass":
            status = "Inconclusive"
            witnesses.append(_witness(corner.location, piece=index, **trace))
    return _report("D.iii", status, subject, tolerances, witnesses, estimates)


def check_connectivity(domain: Domain, corner: Corner) -> CheckReport:
    """Heuristic: D near a cusp must be connected, tested by flood fill on annuli."""
    subject = f"connectivity:{point_key(corner.location)}"
    counts = {f"components_r{r:.6g}": float(local_components(domain, corner.location, r)) for r in CONNECTIVITY_RADII}
    notes = ["Flood fill on a log-polar grid; heuristic"]
    if corner.tau_ambiguous:
        notes.append("Both tangent directions enter D")
    if all(c == 1.0 for c in counts.values()):
        return _report("D.iii", "Pass", subject, {}, estimates=counts, notes=notes)
    return _report("D.iii", "Fail", subject, {}, [_witness(corner.location, **counts)], counts, notes)


def check_cusp_hessian(domain: Domain, corner: Corner) -> CheckReport:
    """Second-order cusp test: tau . (H_j / |grad psi_j| + H_i / |grad psi_i|) tau must not vanish.

    Falls back to the regularity report when a Hessian hits a kink at the cusp.

    Raises:
        NotACuspError: If the corner is a cone point.
    """
    if corner.kind != "cusp" or corner.tau is None:
        raise NotACuspError(f"Corner {corner.location} is a {corner.kind} point")
    tol = domain.tolerances
    x0 = np.array(corner.location)
    tau = np.array(corner.tau)
    subject = point_key(corner.location)
    form = 0.0
    try:
        for index in corner.index_set:
            psi = domain.pieces[index].psi
            grad = psi.gradient.evaluate(x0, strict=True)
            hess = psi.hessian.evaluate(x0, strict=True)
            form += float(tau @ hess @ tau) / float(np.hypot(grad[0], grad[1]))
    except (KinkError, EvaluationDomainError) as e:
        fallback = check_corner_regularity(domain, corner)
        return fallback.model_copy(
            update={
                "condition_id": "C2cusp",
                "notes": [*fallback.notes, f"Hessian undefined at the cusp ({e}); regularity result used"],
            }
        )
    estimates = {"form": form}
    tolerances = {"hessian_tol": tol.hessian_tol}
    if abs(form) > tol.hessian_tol:
        return _report("C2cusp", "Pass", subject, tolerances, [_witness(x0, form=form)], estimates)
    return _report("C2cusp", "Fail", subject, tolerances, [_witness(x0, form=form)], estimates)


# Direction conditions


def check_G1(domain: Domain, samples: Optional[dict[int, FloatArray]] = None) -> list[CheckReport]:
    """inf of unit(g_i) . n_i over sampled boundary points of each piece, with a Lipschitz estimate of g_i."""
    samples = samples if samples is not None else sample_boundaries(domain)
    floor = domain.tolerances.g_dot_n_floor
    reports = []
    for i, pts in sorted(samples.items()):
        piece = domain.pieces[i]
        subject = f"piece:{piece.name}"
        if len(pts) == 0:
            reports.append(_report("G.i", "Inconclusive", subject, {"g_dot_n_floor": floor}, notes=["Empty boundary"]))
            continue
        raw = piece.g.evaluate_many(pts, invalid="nan")
        products = np.einsum("ij,ij->i", unit_rows(raw), normals_many(piece, pts))
        products = np.where(np.isfinite(products), products, -np.inf)
        k = int(np.argmin(products))
        estimates = {"min_g_dot_n": float(products[k]), "lipschitz_g": _lipschitz_estimate(pts, raw)}
        notes = ["Lipschitz constant is a sampled estimate and does not gate the status"]
        if products[k] > floor:
            reports.append(_report("G.i", "Pass", subject, {"g_dot_n_floor": floor}, estimates=estimates, notes=notes))
        else:
            witness = _witness(pts[k], g_dot_n=float(products[k]))
            reports.append(_report("G.i", "Fail", subject, {"g_dot_n_floor": floor}, [witness], estimates, notes))
    return reports


def check_G2(domain: Domain, x0: PointLike) -> CheckReport:
    """Existence of a unit e in N(x0) with e . g > 0 for every active direction g.

    Decided on angular intervals; the witness is the midpoint of the feasible arc.
    """
    pt = as_point(x0)
    cone = normal_cone(domain, pt)
    generators = direction_generators(domain, pt)
    e = feasible_direction(cone, generators)
    tolerances = {"angle_tol": domain.tolerances.angle_tol}
    subject = point_key(pt)
    cone_estimates = {"normal_cone_lo": cone.angle_lo, "normal_cone_hi": cone.angle_hi}
    if e is None:
        evidence = {f"g_angle_{k}": math.atan2(g[1], g[0]) for k, g in enumerate(generators)}
        return _report("G.ii", "Fail", subject, tolerances, [_witness(pt, **evidence)], cone_estimates)
    margin = min(float(e @ g) / float(np.hypot(g[0], g[1])) for g in generators)
    witness = _witness(pt, e1=float(e[0]), e2=float(e[1]), min_e_dot_g=margin)
    return _report("G.ii", "Pass", subject, tolerances, [witness], {**cone_estimates, "min_e_dot_g": margin})


def check_G2_boundary(domain: Domain, samples: dict[int, FloatArray]) -> CheckReport:
    """G.ii at smooth boundary points, where it reduces to unit(g_i) . n_i > 0."""
    worst: Optional[tuple[float, FloatArray]] = None
    for i, pts in sorted(samples.items()):
        if len(pts) == 0:
            continue
        piece = domain.pieces[i]
        products = np.einsum("ij,ij->i", unit_rows(piece.g.evaluate_many(pts, invalid="nan")), normals_many(piece, pts))
        products = np.where(np.isfinite(products), products, -np.inf)
        k = int(np.argmin(products))
        if worst is None or products[k] < worst[0]:
            worst = (float(products[k]), pts[k])
    tolerances = {"angle_tol": domain.tolerances.angle_tol}
    if worst is None:
        return _report("G.ii", "Inconclusive", "boundary", tolerances, notes=["No boundary samples"])
    estimates = {"min_g_dot_n": worst[0]}
    if worst[0] > 0.0:
        return _report("G.ii", "Pass", "boundary", tolerances, estimates=estimates)
    return _report("G.ii", "Fail", "boundary", tolerances, [_witness(worst[1], g_dot_n=worst[0])], estimates)


# Coefficient conditions


def _coefficient_lipschitz(domain: Domain, b: VectorField, sigma: MatrixField) -> tuple[dict[str, float], Optional[FloatArray]]:
    grid = domain.box.grid(COEFFICIENT_GRID)
    try:
        b_values = b.evaluate_many(grid)
        s_values = sigma.evaluate_many(grid).reshape(len(grid), 4)
    except EvaluationDomainError as e:
        logging.warning(f"Coefficient evaluation failed: {e}")
        bad = None
        for x in grid:
            try:
                b.evaluate(x)
                sigma.evaluate(x)
            except EvaluationDomainError:
                bad = x
                break
        return {}, bad
    return {"lipschitz_b": _lipschitz_estimate(grid, b_values), "lipschitz_sigma": _lipschitz_estimate(grid, s_values)}, None


def check_A(domain: Domain, b: VectorField, sigma: MatrixField) -> CheckReport:
    """|det sigma| above the floor at every declared corner; Lipschitz estimates of b and sigma reported."""
    floor = domain.tolerances.det_floor
    estimates, _ = _coefficient_lipschitz(domain, b, sigma)
    witnesses = []
    dets = {}
    for corner in domain.corners:
        det = float(np.linalg.det(sigma.evaluate(np.array(corner.point))))
        dets[f"det_{point_key(corner.point)}"] = det
        if abs(det) <= floor:
            witnesses.append(_witness(corner.point, det=det))
    notes = [] if domain.corners else ["No declared corners"]
    status: CheckStatus = "Fail" if witnesses else "Pass"
    return _report("A.ii", status, "corners", {"det_floor": floor}, witnesses, {**estimates, **dets}, notes)


def check_coefficient_regularity(domain: Domain, b: VectorField, sigma: MatrixField) -> CheckReport:
    """b and sigma must be defined on the bounding box; their Lipschitz constants are estimated."""
    estimates, bad = _coefficient_lipschitz(domain, b, sigma)
    if bad is not None:
        return _report("A.i", "Fail", "coefficients", {}, [_witness(bad)], notes=["Coefficient undefined"])
    notes = ["Lipschitz constants are sampled estimates"]
    return _report("A.i", "Pass", "coefficients", {}, estimates=estimates, notes=notes)


# Aggregation


def check_domain(domain: Domain) -> list[CheckReport]:
    """Domain and direction checks for a bare domain, sorted by (condition_id, subject)."""
    samples = sample_boundaries(domain)
    reports = [check_minimality(domain, samples), check_corner_declarations(domain, samples)]
    reports.extend(check_gradient_floor(domain, samples))
    reports.extend(check_G1(domain, samples))
    reports.append(check_G2_boundary(domain, samples))
    for declared in domain.corners:
        subject = point_key(declared.point)
        try:
            corner = classify_corner(domain, declared.point)
        except AmbiguousTangentError as e:
            reports.append(_report("D.iii", "Fail", subject, {}, [_witness(declared.point)], notes=[str(e)]))
            continue
        except (NotACornerError, DegenerateGradientError) as e:
            reports.append(_report("D.ii", "Fail", subject, {}, [_witness(declared.point)], notes=[str(e)]))
            continue
        reports.append(check_corner_regularity(domain, corner))
        if corner.kind == "cusp":
            reports.append(check_connectivity(domain, corner))
            reports.append(check_cusp_hessian(domain, corner))
        g2 = check_G2(domain, declared.point)
        if corner.direction_jump:
            g2 = g2.model_copy(update={"notes": [*g2.notes, "Reflection direction switches pieces here"]})
        reports.append(g2)
    return sorted(reports, key=CheckReport.sort_key)


def check_all(scenario: "Scenario") -> list[CheckReport]:
    """Every condition report for a scenario, sorted by (condition_id, subject)."""
    reports = check_domain(scenario.domain)
    reports.append(check_A(scenario.domain, scenario.b, scenario.sigma))
    reports.append(check_coefficient_regularity(scenario.domain, scenario.b, scenario.sigma))
    return sorted(reports, key=CheckReport.sort_key)


def overall_status(reports: Sequence[CheckReport]) -> CheckStatus:
    if any(r.status == "Fail" for r in reports):
        return "Fail"
    if any(r.status == "Inconclusive" for r in reports):
        return "Inconclusive"
    return "Pass"
