"""Command-line entry points.

    faastrain run <spec.json> --out DIR [--seed N] [--override k=v ...]
    faastrain experiment <preset> --out DIR [--seed N] [--override k=v ...]

Exit codes: 0 success, 2 spec parse error, 3 infeasible goal, 4 restart
storm, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import InfeasibleGoalError, JobSpecError, RestartStormError
from .experiments import PRESETS, run_preset
from .optimizer import write_observations_csv
from .scheduler import JobRunner, job_from_dict

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_RESTART_STORM = 4


def _parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise JobSpecError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = _parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise JobSpecError(f"override path {text!r} crosses a non-object")
        node[path[-1]] = value
    return raw


def cmd_run(spec_path: str, out_dir: str, seed: int | None,
            overrides: list[str]) -> int:
    try:
        try:
            with open(spec_path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            print(f"error: cannot read {spec_path}: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except json.JSONDecodeError as exc:
            print(f"error: {spec_path}:{exc.lineno}:{exc.colno}: {exc.msg}",
                  file=sys.stderr)
            return EXIT_PARSE
        if not isinstance(raw, dict):
            print(f"error: {spec_path}: top level must be a JSON object",
                  file=sys.stderr)
            return EXIT_PARSE
        if seed is not None:
            raw["seed"] = seed
            raw.setdefault("platform", {})["rng_seed"] = seed
        _apply_overrides(raw, overrides)
        job = job_from_dict(raw)
    except JobSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE

    os.makedirs(out_dir, exist_ok=True)
    runner = JobRunner(job)
    try:
        ledger = runner.run()
    except InfeasibleGoalError as exc:
        print(f"infeasible goal: {exc}", file=sys.stderr)
        if exc.observations:
            write_observations_csv(os.path.join(out_dir, "observations.csv"),
                                   exc.observations)
        return EXIT_INFEASIBLE
    except RestartStormError as exc:
        print(f"restart storm: {exc}", file=sys.stderr)
        return EXIT_RESTART_STORM

    ledger.write_iterations_csv(os.path.join(out_dir, "iterations.csv"))
    ledger.write_events_csv(os.path.join(out_dir, "events.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(ledger.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if ledger.observations:
        write_observations_csv(os.path.join(out_dir, "observations.csv"),
                               ledger.observations, runner.last_objective)
    runner.platform.write_ledger_csv(os.path.join(out_dir, "invocations.csv"))
    print(f"wall_time={ledger.wall_time:.6g}s cost=${ledger.total_cost:.6g} "
          f"final_loss={ledger.final_loss:.6g}")
    return EXIT_OK


def cmd_experiment(preset: str, out_dir: str, seed: int,
                   overrides: list[str]) -> int:
    if preset not in PRESETS:
        print(f"error: unknown preset {preset!r}; choose from: "
              f"{', '.join(PRESETS)}", file=sys.stderr)
        return EXIT_PARSE
    params: dict = {}
    try:
        for text in overrides:
            path, value = _parse_override(text)
            params[".".join(path)] = value
        summary = run_preset(preset, out_dir, seed=seed, overrides=params)
    except JobSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleGoalError as exc:
        print(f"infeasible goal: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except RestartStormError as exc:
        print(f"restart storm: {exc}", file=sys.stderr)
        return EXIT_RESTART_STORM
    print(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faastrain",
        description="Simulated serverless ML training: run jobs and experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a training job from a JSON spec")
    run_p.add_argument("spec", help="path to the job spec (JSON)")
    run_p.add_argument("--out", required=True, help="output directory for CSVs")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the job seed")
    run_p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override any spec field (dotted path, JSON value)")

    exp_p = sub.add_parser("experiment", help="run a built-in experiment preset")
    exp_p.add_argument("preset", help=f"one of: {', '.join(PRESETS)}")
    exp_p.add_argument("--out", required=True, help="output directory for CSVs")
    exp_p.add_argument("--seed", type=int, default=0)
    exp_p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a preset parameter")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.spec, args.out, args.seed, args.override)
        return cmd_experiment(args.preset, args.out, args.seed, args.override)
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
