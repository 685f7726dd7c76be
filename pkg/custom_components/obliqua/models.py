import os
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ConditionId = Literal[
    "A.i",
    "A.ii",
    "C2cusp",
    "D.i",
    "D.ii",
    "D.iii",
    "DW",
    "EXIT",
    "G.i",
    "G.ii",
]
CheckStatus = Literal["Pass", "Fail", "Inconclusive"]

TOLERANCE_PROFILE_ENV = "OBLIQUA_TOL_PROFILE"


class Tolerances(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grad_floor: float = 1e-6
    """Lower bound for |grad psi| on sampled boundary points."""

    corner_tol: float = 1e-9
    """|psi| bound at declared corners, also the index-set tolerance."""

    boundary_tol: float = 1e-10
    """|psi| bound for a point to count as on the boundary."""

    cusp_tol: float = 1e-8
    """A corner is a cusp when |n_i + n_j| is at most this."""

    angle_tol: float = 1e-9
    """Slack in radians for sector membership."""

    hessian_tol: float = 1e-9
    """The second-order cusp form must exceed this in absolute value."""

    g_dot_n_floor: float = 1e-6
    """Lower bound for g.n over sampled boundary points."""

    det_floor: float = 1e-9
    """Lower bound for |det sigma| at corners."""

    regularity_cap: float = 1e6
    """Largest admissible curvature-type quotient near a cone point."""

    max_push_iters: int = 64
    """Iteration cap for the reflection pushback solver."""

    boundary_samples: int = 2048
    """Boundary points sampled per piece."""

    corner_band: float = 1e-3
    """Distance to a declared corner below which corner push directions apply."""

    exit_samples: int = 4096
    """Samples of the stopping region's boundary for the exit compatibility check."""

    @classmethod
    def from_profile(cls, name: Optional[str] = None, **overrides: Any) -> "Tolerances":
        """Build tolerances from a named profile plus field overrides.

        Args:
            name: Profile name. Defaults to the `OBLIQUA_TOL_PROFILE` environment variable,
                then to `default`.
            overrides: Individual fields replacing the profile values.

        Raises:
            ValueError: If the profile is unknown.

        Examples:
            >>> Tolerances.from_profile("strict").boundary_tol
            1e-12
        """
        name = name or os.environ.get(TOLERANCE_PROFILE_ENV, "default")
        if name not in TOLERANCE_PROFILES:
            raise ValueError(
                f"Unknown tolerance profile {name!r}, expected one of {sorted(TOLERANCE_PROFILES)}"
            )
        values = {**TOLERANCE_PROFILES[name], **overrides}
        return cls(**values)


TOLERANCE_PROFILES: dict[str, dict[str, Any]] = {
    "default": {},
    "strict": {
        "grad_floor": 1e-4,
        "corner_tol": 1e-11,
        "boundary_tol": 1e-12,
        "cusp_tol": 1e-10,
        "angle_tol": 1e-11,
        "g_dot_n_floor": 1e-4,
        "det_floor": 1e-6,
        "regularity_cap": 1e4,
        "boundary_samples": 4096,
    },
    "loose": {
        "grad_floor": 1e-8,
        "corner_tol": 1e-7,
        "boundary_tol": 1e-8,
        "cusp_tol": 1e-6,
        "angle_tol": 1e-7,
        "g_dot_n_floor": 1e-8,
        "det_floor": 1e-12,
        "regularity_cap": 1e8,
        "boundary_samples": 512,
    },
}


class Witness(BaseModel):
    point: Optional[tuple[float, float]] = None
    """Location the evidence refers to, when there is one."""

    evidence: dict[str, Any] = Field(default_factory=dict)
    """Numeric values supporting the verdict."""


class CheckReport(BaseModel):
    condition_id: ConditionId
    """Which condition was checked."""

    status: CheckStatus
    """Outcome of the check."""

    subject: str = "domain"
    """What was checked: the domain, a corner, a piece."""

    witnesses: list[Witness] = Field(default_factory=list)
    """Points and values backing the status."""

    tolerances: dict[str, float] = Field(default_factory=dict)
    """The tolerances that influenced this check."""

    estimates: dict[str, float] = Field(default_factory=dict)
    """Reported estimates that do not gate the status (Lipschitz constants, limits)."""

    notes: list[str] = Field(default_factory=list)
    """Free-text remarks, e.g. heuristic fallbacks."""

    @model_validator(mode="after")
    def _fail_needs_witness(self) -> "CheckReport":
        if self.status == "Fail" and not self.witnesses:
            raise ValueError(f"{self.condition_id} Fail report without a witness")
        return self

    @property
    def passed(self) -> bool:
        return self.status == "Pass"

    def sort_key(self) -> tuple[str, str]:
        return (self.condition_id, self.subject)


class SampleSummary(BaseModel):
    n: int
    mean: float
    std_error: float
    """Sample standard deviation divided by sqrt(n)."""

    minimum: float
    maximum: float
    seeds: list[int] = Field(default_factory=list)
    """Seeds of the streams that produced the sample."""


class RefinementRow(BaseModel):
    dt: float
    estimate: float
    std_error: float


class PieceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    psi: str
    """Expression for psi; the piece is {psi > 0}."""

    g: tuple[str, str]
    """Expressions for the reflection direction field."""


class CornerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    point: tuple[float, float]
    pieces: tuple[int, int]
    """0-based indices of the two pieces meeting at the corner."""


class DomainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pieces: list[PieceConfig] = Field(min_length=1)
    corners: list[CornerConfig] = Field(default_factory=list)
    bounding_box: tuple[float, float, float, float]
    """(x1_min, x2_min, x1_max, x2_max), must contain the closure of the domain."""

    @field_validator("bounding_box")
    @classmethod
    def _box_ordered(cls, box: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"bounding_box must be (x1_min, x2_min, x1_max, x2_max), got {box}")
        return box


class CoefficientsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    b: tuple[str, str] = ("0", "0")
    sigma: tuple[tuple[str, str], tuple[str, str]] = (("1", "0"), ("0", "1"))


class InitialConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["point", "disc"] = "point"
    point: tuple[float, float] = (0.0, 0.0)
    """Point mass location, or disc center for kind=disc."""

    radius: float = 0.0


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    horizon: float = Field(default=1.0, gt=0)
    dt: float = Field(default=1e-3, gt=0)
    n_paths: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    cover_radius: Optional[float] = None
    """Corner ball radius for the localized construction."""


class JumpConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kernel: str = "uniform_disc"
    params: dict[str, Any] = Field(default_factory=dict)
    cutoff_radius: float = Field(default=0.1, gt=0)
    """Width of the band outside the domain over which b and sigma fade to zero."""


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    parameters: dict[str, float] = Field(default_factory=dict)
    """Named constants usable inside every expression."""

    domain: DomainConfig
    coefficients: CoefficientsConfig = Field(default_factory=CoefficientsConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    tolerances: dict[str, float] = Field(default_factory=dict)
    jump: Optional[JumpConfig] = None
