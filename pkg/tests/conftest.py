import copy
from pathlib import Path
from typing import Any, Callable

import pytest
import yaml
from obliqua.models import ScenarioConfig
from obliqua.scenario import Scenario, build_scenario

SCENARIOS = Path(__file__).parent.parent / "scenarios"


@pytest.fixture
def scenarios_dir() -> Path:
    return SCENARIOS


@pytest.fixture
def raw_scenario() -> Callable[[str], dict[str, Any]]:
    """The parsed YAML of a shipped scenario, as a fresh dict."""

    def load(name: str) -> dict[str, Any]:
        return copy.deepcopy(yaml.safe_load((SCENARIOS / f"{name}.yaml").read_text()))

    return load


@pytest.fixture
def make_scenario() -> Callable[[dict[str, Any]], Scenario]:
    def build(data: dict[str, Any]) -> Scenario:
        return build_scenario(ScenarioConfig.model_validate(data))

    return build


@pytest.fixture
def still_half_plane(make_scenario) -> Scenario:
    """Half-plane without noise, drifting up at unit speed from (0, 1)."""
    return make_scenario(
        {
            "name": "still",
            "domain": {"pieces": [{"name": "floor", "psi": "x2", "g": ["0", "1"]}], "bounding_box": [-1, -0.5, 1, 3]},
            "coefficients": {"b": ["0", "1"], "sigma": [["0", "0"], ["0", "0"]]},
            "initial": {"point": [0.0, 1.0]},
        }
    )
