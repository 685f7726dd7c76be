__version__ = "0.1.0"

from .base import ObliquaError, ScenarioError
from .conditions import (
    check_A,
    check_all,
    check_corner_regularity,
    check_domain,
    check_G1,
    check_G2,
    overall_status,
)
from .expr import (
    ExpressionError,
    MatrixField,
    ScalarField,
    VectorField,
    evaluate,
    gradient,
    hessian,
    parse,
    to_text,
)
from .geometry import (
    BoundingBox,
    Domain,
    DomainPiece,
    classify_corner,
    direction_cone,
    normal_cone,
    unit_normal,
)
from .jump_boundary import (
    JumpScenario,
    check_exit_compatibility,
    load_jump_scenario,
    simulate_jump_batch,
    simulate_jump_constrained,
    simulate_jump_controlled,
    simulate_jump_terminal,
)
from .models import CheckReport, ScenarioConfig, Tolerances, Witness
from .polyhedral import (
    PolygonSpec,
    check_DW_assumption,
    check_minimal_representation,
    compare_deciders,
    enumerate_vertices,
    equivalence_test,
    is_completely_S,
    maximal_sets,
)
from .scenario import Scenario, load_polygon, load_scenario
from .sde_sim import (
    ControlledPathRecord,
    PathRecord,
    build_cover,
    localized_simulate,
    paste,
    simulate_batch,
    simulate_controlled,
    simulate_path,
    simulate_terminal,
    stop_at_exit,
    time_change,
)
from .stats import ks_distance, ks_statistic, mc_estimate, refinement_study

__all__ = [
    "BoundingBox",
    "CheckReport",
    "ControlledPathRecord",
    "Domain",
    "DomainPiece",
    "ExpressionError",
    "JumpScenario",
    "MatrixField",
    "ObliquaError",
    "PathRecord",
    "PolygonSpec",
    "ScalarField",
    "Scenario",
    "ScenarioConfig",
    "ScenarioError",
    "Tolerances",
    "VectorField",
    "Witness",
    "build_cover",
    "check_A",
    "check_DW_assumption",
    "check_G1",
    "check_G2",
    "check_all",
    "check_corner_regularity",
    "check_domain",
    "check_exit_compatibility",
    "check_minimal_representation",
    "classify_corner",
    "compare_deciders",
    "direction_cone",
    "enumerate_vertices",
    "equivalence_test",
    "evaluate",
    "gradient",
    "hessian",
    "is_completely_S",
    "ks_distance",
    "ks_statistic",
    "load_jump_scenario",
    "load_polygon",
    "load_scenario",
    "localized_simulate",
    "maximal_sets",
    "mc_estimate",
    "normal_cone",
    "overall_status",
    "parse",
    "paste",
    "refinement_study",
    "simulate_batch",
    "simulate_controlled",
    "simulate_jump_batch",
    "simulate_jump_constrained",
    "simulate_jump_controlled",
    "simulate_jump_terminal",
    "simulate_path",
    "simulate_terminal",
    "stop_at_exit",
    "time_change",
    "to_text",
    "unit_normal",
]
