import json

import pytest
from obliqua import __version__
from obliqua.cli import main


def test_check_passes_on_the_half_plane(scenarios_dir, tmp_path):
    out = tmp_path / "check.json"
    assert main(["check", str(scenarios_dir / "half_plane.yaml"), "--out", str(out)]) == 0
    payload = json.loads(out.read_text())
    assert payload["status"] == "Pass"
    assert payload["provenance"]["scenario"] == "half_plane"
    assert all(r["status"] == "Pass" for r in payload["reports"])


def test_check_fails_on_tangential_directions(scenarios_dir, tmp_path):
    out = tmp_path / "check.json"
    assert main(["check", str(scenarios_dir / "half_disc_tangential.yaml"), "--out", str(out)]) == 1
    failing = [r for r in json.loads(out.read_text())["reports"] if r["status"] == "Fail"]
    assert "G.i" in {r["condition_id"] for r in failing}
    assert all(r["witnesses"] for r in failing)


@pytest.mark.parametrize(
    "polygon, code, dw_status",
    [("square_normal", 0, "Pass"), ("square_bad_corner", 1, "Fail"), ("non_minimal", 1, "Pass")],
)
def test_dw(scenarios_dir, tmp_path, polygon, code, dw_status):
    out = tmp_path / "dw.json"
    assert main(["dw", str(scenarios_dir / "polygons" / f"{polygon}.yaml"), "--out", str(out)]) == code
    payload = json.loads(out.read_text())
    assert payload["equivalence"] == "agree"
    assert payload["dw"]["status"] == dw_status
    assert payload["provenance"]["polygon"] == polygon


def test_dw_reports_the_redundant_constraint(scenarios_dir, tmp_path):
    out = tmp_path / "dw.json"
    main(["dw", str(scenarios_dir / "polygons" / "non_minimal.yaml"), "--out", str(out)])
    minimality = json.loads(out.read_text())["minimality"]
    assert minimality["status"] == "Fail"
    assert [w["evidence"]["redundant_index"] for w in minimality["witnesses"]] == [4]


def test_simulate_writes_paths_and_summary(scenarios_dir, tmp_path):
    out = tmp_path / "run"
    args = ["simulate", str(scenarios_dir / "half_plane.yaml"), "--paths", "5", "--horizon", "0.01", "--dt", "0.001"]
    assert main([*args, "--save-paths", "2", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["path_000000.csv", "path_000001.csv", "summary.json", "terminal.csv"]
    lines = (out / "path_000001.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,lambda,gamma1,gamma2,boundary_flag"
    assert len(lines) == 12
    assert len((out / "terminal.csv").read_text().splitlines()) == 6
    summary = json.loads((out / "summary.json").read_text())
    assert summary["provenance"]["n_paths"] == 5
    assert summary["provenance"]["version"] == __version__
    assert len(summary["estimates"]["terminal_x"]) == 2


def test_simulate_refuses_failing_scenarios(scenarios_dir, tmp_path):
    out = tmp_path / "run"
    args = ["simulate", str(scenarios_dir / "half_disc_tangential.yaml"), "--paths", "2", "--horizon", "0.01"]
    assert main([*args, "--out", str(out)]) == 1
    assert not out.exists()


def test_jump_scenarios_have_no_localized_construction(scenarios_dir, tmp_path):
    args = ["simulate", str(scenarios_dir / "jump_disc.yaml"), "--construction", "localized", "--force"]
    assert main([*args, "--paths", "2", "--horizon", "0.01", "--dt", "0.005", "--out", str(tmp_path)]) == 2


def test_compare(scenarios_dir, tmp_path):
    scenario = str(scenarios_dir / "half_plane.yaml")
    flags = ["--paths", "5", "--horizon", "0.01", "--dt", "0.001"]
    assert main(["compare", scenario, "--constructions", "direct,euler", *flags]) == 2
    out = tmp_path / "compare.json"
    assert main(["compare", scenario, "--threshold", "1.01", "--out", str(out), *flags]) == 0
    payload = json.loads(out.read_text())
    assert payload["verdict"] == "pass"
    assert payload["provenance"]["b"]["seed"] == payload["provenance"]["a"]["seed"] + 1
    assert 0.0 <= payload["ks"] <= 1.0


def test_configuration_errors(tmp_path):
    assert main(["check", str(tmp_path / "absent.yaml")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
