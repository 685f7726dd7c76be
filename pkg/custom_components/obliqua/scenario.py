"""Scenario and polygon files: YAML/JSON in, validated runtime objects out."""

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, TypeVar, Union

import numpy as np
import yaml
from pydantic import ValidationError

from .base import FloatArray, ScenarioError, as_point
from .expr import ExpressionError, MatrixField, VectorField, parse
from .geometry import BoundingBox, DeclaredCorner, Domain, DomainPiece
from .models import RunConfig, ScenarioConfig, Tolerances
from .polyhedral import PolygonSpec
from .streams import STREAM_INITIAL, path_generator

INITIAL_PERIMETER_CHECKS = 64

T = TypeVar("T")


@dataclass(frozen=True)
class Scenario:
    name: str
    config: ScenarioConfig
    domain: Domain
    b: VectorField
    sigma: MatrixField
    tolerances: Tolerances
    sha256: str = ""

    @property
    def parameters(self) -> dict[str, float]:
        return dict(self.config.parameters)

    @property
    def run(self) -> RunConfig:
        return self.config.run

    def initial_point(self, seed: int, path_id: int) -> FloatArray:
        """Draw X(0) for a path: the point mass, or uniform over the disc from the initial stream."""
        initial = self.config.initial
        center = np.array(initial.point, dtype=np.float64)
        if initial.kind == "point":
            return center
        u = path_generator(seed, path_id, STREAM_INITIAL).random(2)
        radius = initial.radius * math.sqrt(u[0])
        angle = 2.0 * math.pi * u[1]
        return center + radius * np.array([math.cos(angle), math.sin(angle)])

    def provenance(self, seed: int) -> dict[str, Any]:
        return {
            "scenario": self.name,
            "scenario_sha256": self.sha256,
            "seed": seed,
            "tolerances": self.tolerances.model_dump(),
        }


def _parsed(where: str, fn: Callable[..., T], *args: Any) -> T:
    try:
        return fn(*args)
    except ExpressionError as e:
        raise ScenarioError(f"{where}: {e}") from e


def build_domain(config: ScenarioConfig, tolerances: Tolerances) -> Domain:
    constants = config.parameters
    pieces = tuple(
        DomainPiece(
            name=p.name,
            psi=_parsed(f"domain.pieces[{i}].psi", parse, p.psi, constants),
            g=_parsed(f"domain.pieces[{i}].g", VectorField.parse, p.g, constants),
        )
        for i, p in enumerate(config.domain.pieces)
    )
    corners = tuple(DeclaredCorner(tuple(c.point), tuple(c.pieces)) for c in config.domain.corners)  # type: ignore[arg-type]
    try:
        return Domain(pieces, corners, BoundingBox(*config.domain.bounding_box), tolerances)
    except ValueError as e:
        raise ScenarioError(str(e)) from e


def _check_initial(config: ScenarioConfig, domain: Domain) -> None:
    initial = config.initial
    center = as_point(initial.point)
    points = [center]
    if initial.kind == "disc":
        if initial.radius <= 0:
            raise ScenarioError(f"initial.radius must be positive for a disc, got {initial.radius}")
        angles = np.linspace(0.0, 2.0 * math.pi, INITIAL_PERIMETER_CHECKS, endpoint=False)
        points.extend(center + initial.radius * np.column_stack([np.cos(angles), np.sin(angles)]))
    inside = domain.contains_many(np.array(points), slack=domain.tolerances.boundary_tol)
    if not np.all(inside):
        bad = np.array(points)[int(np.argmin(inside))]
        raise ScenarioError(f"Initial distribution leaves the closure of D at {bad.tolist()}")


def build_scenario(config: ScenarioConfig, sha256: str = "", profile: Optional[str] = None) -> Scenario:
    """Parse every expression and assemble the runtime scenario.

    Raises:
        ScenarioError: On parse errors, unknown tolerance fields or an initial
            distribution outside the closure of D.
    """
    try:
        tolerances = Tolerances.from_profile(profile, **config.tolerances)
    except (ValidationError, ValueError) as e:
        raise ScenarioError(f"tolerances: {e}") from e
    domain = build_domain(config, tolerances)
    constants = config.parameters
    b = _parsed("coefficients.b", VectorField.parse, config.coefficients.b, constants)
    sigma = _parsed("coefficients.sigma", MatrixField.parse, config.coefficients.sigma, constants)
    _check_initial(config, domain)
    logging.debug(f"Built scenario {config.name} with {domain.m} pieces and {len(domain.corners)} corners")
    return Scenario(config.name, config, domain, b, sigma, tolerances, sha256)


def _read(path: Union[str, Path]) -> tuple[Any, str]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ScenarioError(f"Cannot read {path}: {e}") from e
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ScenarioError(f"{path} is not valid YAML/JSON: {e}") from e
    if not isinstance(data, dict):
        raise ScenarioError(f"{path} must contain a mapping at the top level")
    return data, hashlib.sha256(raw).hexdigest()


def load_scenario(path: Union[str, Path], profile: Optional[str] = None) -> Scenario:
    """Load and validate a scenario file.

    Raises:
        ScenarioError: For unreadable files, schema violations and invalid expressions.
    """
    data, digest = _read(path)
    try:
        config = ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ScenarioError(f"{path}: {e}") from e
    return build_scenario(config, digest, profile)


def load_polygon(path: Union[str, Path]) -> tuple[str, PolygonSpec, str]:
    """Load a polygon file (`name`, `normals`, `offsets`, `directions`); returns (name, polygon, sha256)."""
    data, digest = _read(path)
    name = str(data.pop("name", Path(path).stem))
    try:
        return name, PolygonSpec.model_validate(data), digest
    except ValidationError as e:
        raise ScenarioError(f"{path}: {e}") from e
