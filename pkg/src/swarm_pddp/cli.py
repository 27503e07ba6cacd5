"""Command line entry point: ``swarm-pddp run | compare | validate``.

Exit codes: 0 converged and valid, 1 usage/config/IO error,
2 not converged within the iteration cap, 3 a true-constraint check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import __version__
from .artifacts import SolutionFormatError, read_solution, write_all
from .consensus import Engine, EngineOptions
from .penalty import SCHEMES, make_scheme
from .scenarios import ConfigError, builtin, load, validate

log = logging.getLogger("swarm_pddp")

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_INVALID = 0, 1, 2, 3
RECORD_SCHEMA = "swarm-pddp/run-record"
RECORD_VERSION = 1


@dataclass
class RunRecord:
    scenario: str
    scheme: str
    iterations: int
    wall_time_s: float
    converged: bool
    final_times: list
    validation_ok: bool
    failures: list = field(default_factory=list)
    error: str | None = None

    def as_dict(self) -> dict:
        d = {"schema": RECORD_SCHEMA, "version": RECORD_VERSION}
        d.update(self.__dict__)
        return d


class _UsageError(Exception):
    pass


def _scenario_from_args(args):
    if args.config and args.scenario is not None:
        raise _UsageError("give either --scenario or --config, not both")
    if args.config:
        return load(args.config), str(args.config)
    sid = 1 if args.scenario is None else args.scenario
    return builtin(sid), f"scenario-{sid}"


def _apply_max_iter(scenario, max_iter):
    if max_iter is None:
        return scenario
    if max_iter < 1:
        raise _UsageError("--max-iter must be at least 1")
    return replace(scenario, stop=replace(scenario.stop, max_iter=max_iter))


def _trace_sink(path):
    if not path:
        return None, None
    handle = open(path, "w")
    return handle, (lambda line: handle.write(line + "\n"))


def execute(scenario, scheme_name: str, trace=None):
    """One solve plus validation; returns (solution, report, scheme, seconds)."""
    scheme = make_scheme(scheme_name)
    engine = Engine(scenario, scheme, EngineOptions(trace=trace))
    t0 = time.perf_counter()
    solution = engine.run()
    elapsed = time.perf_counter() - t0
    report = validate(solution.trajectories, scenario, solution.topology,
                      converged=solution.converged, iterations=solution.iterations)
    return solution, report, scheme, elapsed


def _status(solution, report) -> int:
    if not report.ok:
        return EXIT_INVALID
    if not solution.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_run(args) -> int:
    scenario, label = _scenario_from_args(args)
    scenario = _apply_max_iter(scenario, args.max_iter)
    handle, trace = _trace_sink(args.trace)
    try:
        solution, report, scheme, elapsed = execute(scenario, args.scheme, trace)
    finally:
        if handle:
            handle.close()
    print(f"{label} / {args.scheme}: {solution.iterations} iterations, "
          f"{'converged' if solution.converged else 'NOT converged'}, {elapsed:.1f} s")
    print(report.summary())
    if args.out:
        info = scheme.describe()
        info["seed"] = args.seed
        paths = write_all(args.out, solution, scenario, report, info)
        if args.svg:
            from .plots import write_svgs

            paths += write_svgs(args.out, solution, scenario)
        print(f"wrote {len(paths)} files to {args.out}")
    return _status(solution, report)


def _reduction(base: int | None, other: int | None) -> str:
    if base is None or other is None or base == 0:
        return "n/a"
    return f"{100.0 * (base - other) / base:.2f}%"


def compare_table(records: list, scenarios: list, schemes: list) -> tuple[str, str]:
    """Text and CSV tables; reductions are relative to the 'fixed' row (or the first scheme)."""
    baseline = "fixed" if "fixed" in schemes else schemes[0]
    by_key = {(r.scenario, r.scheme): r for r in records}
    text_rows = [f"{'scenario':<14}{'scheme':<13}{'iters':>7}{'time [s]':>10}{'reduction':>11}  status"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "scheme", "iterations", "wall_time_s", "converged", "valid", "reduction_vs_" + baseline])
    for sc in scenarios:
        base = by_key.get((sc, baseline))
        base_iters = base.iterations if base and base.error is None else None
        for name in schemes:
            r = by_key[(sc, name)]
            if r.error is not None:
                text_rows.append(f"{sc:<14}{name:<13}{'-':>7}{'-':>10}{'-':>11}  FAILED: {r.error}")
                w.writerow([sc, name, "", "", "", "", ""])
                continue
            red = _reduction(base_iters, r.iterations)
            status = ("ok" if r.converged else "not converged") + ("" if r.validation_ok else ", invalid")
            text_rows.append(f"{sc:<14}{name:<13}{r.iterations:>7}{r.wall_time_s:>10.1f}{red:>11}  {status}")
            w.writerow([sc, name, r.iterations, f"{r.wall_time_s:.3f}", r.converged, r.validation_ok, red])
    return "\n".join(text_rows), buf.getvalue()


def cmd_compare(args) -> int:
    schemes = args.schemes or ["fixed", "ap"]
    if len(schemes) < 2:
        raise _UsageError("compare needs at least two schemes")
    if args.config:
        configs = [(str(p), load(p)) for p in args.config]
    else:
        configs = [(f"scenario-{s}", builtin(s)) for s in (args.scenarios or [1, 2, 3, 4])]
    records = []
    for label, scenario in configs:
        scenario = _apply_max_iter(scenario, args.max_iter)
        for name in schemes:
            for rep in range(args.repeats):
                try:
                    solution, report, _, elapsed = execute(scenario, name)
                    rec = RunRecord(label, name, solution.iterations, elapsed, solution.converged,
                                    [float(t.t_final) for t in solution.trajectories], report.ok, report.failures)
                except Exception as exc:  # a failed cell must not sink the table
                    log.exception("run %s / %s failed", label, name)
                    rec = RunRecord(label, name, 0, 0.0, False, [], False, error=f"{type(exc).__name__}: {exc}")
                if rep == 0:
                    records.append(rec)
                elif rec.iterations != records[-1].iterations or rec.final_times != records[-1].final_times:
                    log.warning("repeat %d of %s / %s differs from the first run", rep, label, name)
    labels = [label for label, _ in configs]
    text, table_csv = compare_table(records, labels, schemes)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(table_csv)
        (out / "compare.json").write_text(json.dumps([r.as_dict() for r in records], indent=1) + "\n")
    return EXIT_OK


def cmd_validate(args) -> int:
    scenario, trajectories, topology, payload = read_solution(args.solution)
    if args.config:
        scenario = load(args.config)
    elif args.scenario is not None:
        scenario = builtin(args.scenario)
    if len(trajectories) != scenario.m:
        raise _UsageError(f"solution has {len(trajectories)} agents, scenario has {scenario.m}")
    report = validate(trajectories, scenario, topology)
    print(report.summary())
    return EXIT_OK if report.ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarm-pddp", description="Distributed PDDP/ADMM trajectory optimizer")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="solve one scenario")
    run.add_argument("--scenario", type=int, choices=[1, 2, 3, 4], help="built-in scenario id (default 1)")
    run.add_argument("--config", type=Path, help="scenario YAML file")
    run.add_argument("--scheme", choices=SCHEMES, default="fixed")
    run.add_argument("--seed", type=int, default=0, help="recorded in the output; the solver is deterministic")
    run.add_argument("--max-iter", type=int)
    run.add_argument("--out", type=Path, help="directory for JSON/CSV/SVG artifacts")
    run.add_argument("--trace", type=Path, help="write the message-bus trace to this file")
    run.add_argument("--svg", action=argparse.BooleanOptionalAction, default=True)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare penalty schemes")
    cmp_.add_argument("--scenario", dest="scenarios", type=int, action="append", choices=[1, 2, 3, 4])
    cmp_.add_argument("--config", type=Path, action="append")
    cmp_.add_argument("--scheme", dest="schemes", action="append", choices=SCHEMES)
    cmp_.add_argument("--repeats", type=int, default=1)
    cmp_.add_argument("--seed", type=int, default=0)
    cmp_.add_argument("--max-iter", type=int)
    cmp_.add_argument("--out", type=Path)
    cmp_.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="check a solution file against the true constraints")
    val.add_argument("solution", type=Path)
    val.add_argument("--scenario", type=int, choices=[1, 2, 3, 4], help="override the embedded scenario")
    val.add_argument("--config", type=Path, help="override the embedded scenario")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; map to 1
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SolutionFormatError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
