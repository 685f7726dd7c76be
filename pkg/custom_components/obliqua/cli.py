"""Command line: `obliqua check | simulate | compare | dw`.

Exit codes: 0 success, 1 a check failed (or a comparison did not pass), 2 configuration
error, 3 inconclusive checks under `--strict`.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from dotenv import load_dotenv

from . import __version__
from .base import ObliquaError, ScenarioError
from .conditions import check_all, overall_status
from .jump_boundary import JumpScenario, simulate_jump_batch, simulate_jump_terminal
from .models import CheckReport, CheckStatus
from .polyhedral import UnboundedOrEmptyError, compare_deciders, minimality_report
from .scenario import Scenario, load_polygon, load_scenario
from .sde_sim import CONSTRUCTIONS, PathRecord, TerminalSample, simulate_batch, simulate_terminal
from .stats import FUNCTIONALS, functional, ks_distance, summarize

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_INCONCLUSIVE = 3

DEFAULT_THRESHOLD = 0.015
JUMP_CONSTRUCTIONS = {"direct": "constrained", "controlled": "controlled"}


def _exit_code(status: CheckStatus, strict: bool) -> int:
    if status == "Fail":
        return EXIT_FAIL
    if status == "Inconclusive" and strict:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _dumps(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _emit(payload: Any, out: Optional[Path]) -> None:
    text = _dumps(payload)
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


def _reports_json(reports: Sequence[CheckReport]) -> list[dict[str, Any]]:
    return [r.model_dump(mode="json") for r in reports]


class _Run:
    """Run parameters: command-line flags over the scenario's `run` block."""

    def __init__(self, scenario: Scenario, args: argparse.Namespace) -> None:
        run = scenario.run
        self.seed: int = run.seed if args.seed is None else args.seed
        self.n_paths: int = run.n_paths if args.paths is None else args.paths
        self.horizon: float = run.horizon if args.horizon is None else args.horizon
        self.dt: float = run.dt if args.dt is None else args.dt
        self.workers: int = args.workers

    def provenance(self, scenario: Scenario, construction: str) -> dict[str, Any]:
        return {
            **scenario.provenance(self.seed),
            "construction": construction,
            "dt": self.dt,
            "horizon": self.horizon,
            "n_paths": self.n_paths,
            "version": __version__,
        }


def _jump_construction(construction: str) -> str:
    if construction not in JUMP_CONSTRUCTIONS:
        raise ScenarioError(f"Construction {construction!r} is not available for jump scenarios")
    return JUMP_CONSTRUCTIONS[construction]


def _terminal(scenario: Scenario, construction: str, run: _Run, seed: int) -> TerminalSample:
    if scenario.config.jump is not None:
        js = JumpScenario.from_scenario(scenario)
        return simulate_jump_terminal(js, seed, run.n_paths, run.horizon, run.dt, _jump_construction(construction), run.workers)  # type: ignore[arg-type]
    return simulate_terminal(scenario, seed, run.n_paths, run.horizon, run.dt, construction, run.workers)  # type: ignore[arg-type]


def _records(scenario: Scenario, construction: str, run: _Run, path_ids: Sequence[int]) -> list[PathRecord]:
    if scenario.config.jump is not None:
        js = JumpScenario.from_scenario(scenario)
        return simulate_jump_batch(js, run.seed, path_ids, run.horizon, run.dt, _jump_construction(construction), run.workers)  # type: ignore[arg-type]
    return simulate_batch(scenario, run.seed, path_ids, run.horizon, run.dt, construction, run.workers)  # type: ignore[arg-type]


def cmd_check(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    reports = check_all(scenario)
    status = overall_status(reports)
    _emit({"provenance": scenario.provenance(scenario.run.seed), "status": status, "reports": _reports_json(reports)}, args.out)
    logging.info(f"{scenario.name}: {status} over {len(reports)} reports")
    return _exit_code(status, args.strict)


def _write_terminal(path: Path, sample: TerminalSample) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(("path_id", "x1", "x2", "lambda"))
        for pid, x, lam in zip(sample.path_ids, sample.x, sample.lam):
            writer.writerow([int(pid), repr(float(x[0])), repr(float(x[1])), repr(float(lam))])


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    run = _Run(scenario, args)
    if not args.force:
        reports = check_all(scenario)
        code = _exit_code(overall_status(reports), args.strict)
        if code != EXIT_OK:
            failing = [f"{r.condition_id} {r.subject}" for r in reports if r.status != "Pass"]
            logging.error(f"Conditions not met for {scenario.name}: {', '.join(failing)}; use --force to simulate anyway")
            return code
    out: Path = args.out or Path("out")
    out.mkdir(parents=True, exist_ok=True)
    saved = list(range(min(args.save_paths, run.n_paths)))
    for record in _records(scenario, args.construction, run, saved):
        with (out / f"path_{record.path_id:06d}.csv").open("w", newline="") as handle:
            record.write_csv(handle, args.thin)
    sample = _terminal(scenario, args.construction, run, run.seed)
    _write_terminal(out / "terminal.csv", sample)
    summary = {
        "provenance": run.provenance(scenario, args.construction),
        "estimates": {name: [s.model_dump() for s in summarize(sample, name)] for name in sorted(FUNCTIONALS)},
    }
    (out / "summary.json").write_text(_dumps(summary))
    logging.info(f"Wrote {len(saved)} path files and the summary of {run.n_paths} paths to {out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    constructions = [c.strip() for c in args.constructions.split(",")]
    if len(constructions) != 2 or any(c not in CONSTRUCTIONS for c in constructions):
        raise ScenarioError(f"--constructions needs two of {list(CONSTRUCTIONS)}, got {args.constructions!r}")
    if args.functional not in FUNCTIONALS:
        raise ScenarioError(f"Unknown functional {args.functional!r}, expected one of {sorted(FUNCTIONALS)}")
    first = load_scenario(args.scenario)
    second = load_scenario(args.other_scenario) if args.other_scenario else first
    run = _Run(first, args)
    samples = [
        _terminal(first, constructions[0], run, run.seed),
        _terminal(second, constructions[1], run, run.seed + 1),
    ]
    fn = functional(args.functional)
    ks = ks_distance(fn(samples[0]), fn(samples[1]))
    verdict = "pass" if ks < args.threshold else "fail"
    payload = {
        "provenance": {
            "a": run.provenance(first, constructions[0]),
            "b": {**run.provenance(second, constructions[1]), "seed": run.seed + 1},
        },
        "functional": args.functional,
        "ks": ks,
        "threshold": args.threshold,
        "verdict": verdict,
        "summaries": {
            "a": [s.model_dump() for s in summarize(samples[0], args.functional)],
            "b": [s.model_dump() for s in summarize(samples[1], args.functional)],
        },
    }
    _emit(payload, args.out)
    logging.info(f"KS {ks:.4f} against threshold {args.threshold}: {verdict}")
    return EXIT_OK if verdict == "pass" else EXIT_FAIL


def cmd_dw(args: argparse.Namespace) -> int:
    name, poly, digest = load_polygon(args.polygon)
    try:
        minimality = minimality_report(poly)
        result = compare_deciders(poly)
    except (UnboundedOrEmptyError, ValueError) as e:
        raise ScenarioError(f"{args.polygon}: {e}") from e
    reports = [minimality, result.dw, *result.g2]
    status = overall_status(reports)
    payload = {
        "provenance": {"polygon": name, "polygon_sha256": digest, "version": __version__},
        "minimality": minimality.model_dump(mode="json"),
        "dw": result.dw.model_dump(mode="json"),
        "g2": _reports_json(result.g2),
        "equivalence": "agree" if result.agree else "disagree",
        "status": status,
    }
    _emit(payload, args.out)
    return _exit_code(status, args.strict)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--paths", type=int, default=None, help="Number of paths (default: scenario run.n_paths)")
    parser.add_argument("--dt", type=float, default=None)
    parser.add_argument("--horizon", type=float, default=None)
    parser.add_argument("--workers", type=int, default=1, help="Worker processes; never changes results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obliqua", description="Oblique reflecting diffusions in planar domains")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    check = sub.add_parser("check", help="Run every condition check on a scenario")
    check.add_argument("scenario", type=Path)
    check.add_argument("--out", type=Path, default=None)
    check.add_argument("--strict", action="store_true", help="Treat Inconclusive as a failure (exit 3)")
    check.set_defaults(handler=cmd_check)

    simulate = sub.add_parser("simulate", help="Simulate paths and write CSV files and a JSON summary")
    simulate.add_argument("scenario", type=Path)
    simulate.add_argument("--construction", choices=CONSTRUCTIONS, default="direct")
    simulate.add_argument("--out", type=Path, default=None, help="Output directory (default: ./out)")
    simulate.add_argument("--save-paths", type=int, default=10, help="Paths written as full CSV records")
    simulate.add_argument("--thin", type=int, default=1, help="Keep every n-th grid point in path CSVs")
    simulate.add_argument("--strict", action="store_true")
    simulate.add_argument("--force", action="store_true", help="Simulate even if checks do not pass")
    _add_run_flags(simulate)
    simulate.set_defaults(handler=cmd_simulate)

    compare = sub.add_parser("compare", help="Two-sample KS comparison of a terminal functional")
    compare.add_argument("scenario", type=Path)
    compare.add_argument("--constructions", default="direct,controlled")
    compare.add_argument("--functional", default="terminal_x")
    compare.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    compare.add_argument("--other-scenario", type=Path, default=None, help="Scenario for the second sample")
    compare.add_argument("--out", type=Path, default=None)
    _add_run_flags(compare)
    compare.set_defaults(handler=cmd_compare)

    dw = sub.add_parser("dw", help="Polygon checks and the equivalence of the two direction conditions")
    dw.add_argument("polygon", type=Path)
    dw.add_argument("--out", type=Path, default=None)
    dw.add_argument("--strict", action="store_true")
    dw.set_defaults(handler=cmd_dw)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        handlers=[logging.StreamHandler()],
    )
    try:
        return args.handler(args)
    except ScenarioError as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except ObliquaError as e:
        logging.error(f"{type(e).__name__}: {e}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
