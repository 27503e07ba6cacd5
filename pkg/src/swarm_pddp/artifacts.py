"""Solution files: versioned JSON, per-agent CSV and the residual trace CSV.

Everything written here is a pure function of the solution and the
scenario, so repeated runs with the same inputs give byte-identical
files.  Wall-clock timings are deliberately left out.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import AgentTrajectory
from .network import Topology
from .scenarios import ConfigError, ScenarioConfig, ValidationReport, _parse, _Reader, to_dict

SOLUTION_SCHEMA = "swarm-pddp/solution"
SOLUTION_VERSION = 1
RESIDUAL_FAMILIES = ("U", "X", "Xa", "T", "Ta")


class SolutionFormatError(ValueError):
    """A solution file could not be read."""


def _floats(arr) -> list:
    return np.asarray(arr, dtype=float).tolist()


def solution_dict(solution, scenario: ScenarioConfig, report: ValidationReport | None = None,
                  scheme_info: dict | None = None) -> dict:
    agents = []
    for i, traj in enumerate(solution.trajectories):
        agents.append({
            "id": i,
            "t_final_s": float(traj.t_final),
            "states": _floats(traj.states),
            "controls": _floats(np.asarray(traj.controls).reshape(-1)),
        })
    out = {
        "schema": SOLUTION_SCHEMA,
        "version": SOLUTION_VERSION,
        "scenario": to_dict(scenario),
        "scheme": scheme_info or {"scheme": solution.scheme},
        "converged": bool(solution.converged),
        "iterations": int(solution.iterations),
        "topology": [list(ns) for ns in solution.topology.neighbor_sets],
        "agents": agents,
    }
    if report is not None:
        out["validation"] = report_dict(report)
    return out


def report_dict(report: ValidationReport) -> dict:
    d = asdict(report)
    d["ok"] = report.ok
    d["closest_pair"] = list(report.closest_pair)
    d["comm_pair"] = list(report.comm_pair)
    d["time_gaps"] = [list(g) for g in report.time_gaps]
    return d


def write_solution(path, solution, scenario, report=None, scheme_info=None) -> None:
    text = json.dumps(solution_dict(solution, scenario, report, scheme_info), indent=1, sort_keys=False)
    Path(path).write_text(text + "\n")


def read_solution(path):
    """Returns (scenario, trajectories, topology, payload) from a solution JSON file."""
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise SolutionFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise SolutionFormatError(f"{path}:{exc.lineno}: not valid JSON ({exc.msg})") from exc
    if not isinstance(payload, dict) or payload.get("schema") != SOLUTION_SCHEMA:
        raise SolutionFormatError(f"{path}: not a {SOLUTION_SCHEMA} file")
    if payload.get("version") != SOLUTION_VERSION:
        raise SolutionFormatError(f"{path}: unsupported solution version {payload.get('version')!r}")
    try:
        scenario = scenario_from_dict(payload["scenario"], f"{path}#scenario")
        trajectories = []
        for entry in payload["agents"]:
            states = np.asarray(entry["states"], dtype=float)
            controls = np.asarray(entry["controls"], dtype=float)
            if states.ndim != 2 or states.shape[1] != 3 or controls.shape[0] != states.shape[0] - 1:
                raise SolutionFormatError(f"{path}: agent {entry.get('id')} has inconsistent array shapes")
            trajectories.append(AgentTrajectory(states, controls, float(entry["t_final_s"])))
        topology = Topology.from_neighbor_sets(payload["topology"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SolutionFormatError):
            raise
        raise SolutionFormatError(f"{path}: malformed solution ({exc})") from exc
    if len(trajectories) != scenario.m:
        raise SolutionFormatError(f"{path}: {len(trajectories)} agents in solution, scenario has {scenario.m}")
    return scenario, trajectories, topology, payload


def scenario_from_dict(data: dict, source: str) -> ScenarioConfig:
    """Re-read an embedded scenario through the YAML config reader (same checks, same errors)."""
    import yaml

    text = yaml.safe_dump(data, sort_keys=False)
    try:
        return _parse(yaml.compose(text), _Reader(source))
    except ConfigError as exc:
        raise SolutionFormatError(str(exc)) from exc


def agent_csv(traj: AgentTrajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "t_s", "x_m", "y_m", "heading_rad", "omega_radps"])
    times = traj.times()
    controls = np.asarray(traj.controls).reshape(-1)
    for k, (t, s) in enumerate(zip(times, traj.states)):
        omega = repr(float(controls[k])) if k < controls.shape[0] else ""
        w.writerow([k, repr(float(t)), repr(float(s[0])), repr(float(s[1])), repr(float(s[2])), omega])
    return buf.getvalue()


def residual_csv(solution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["iteration"]
    header += [f"primal_{f}" for f in RESIDUAL_FAMILIES] + [f"dual_{f}" for f in RESIDUAL_FAMILIES]
    header += ["qp_infeasible", "inner_nonconverged"]
    w.writerow(header)
    for row in solution.iteration_trace:
        line = [row["iteration"]]
        line += [repr(float(row["primal"][f])) for f in RESIDUAL_FAMILIES]
        line += [repr(float(row["dual"][f])) for f in RESIDUAL_FAMILIES]
        line += [row["qp_infeasible"], row["inner_nonconverged"]]
        w.writerow(line)
    return buf.getvalue()


def write_all(out_dir, solution, scenario, report=None, scheme_info=None) -> list:
    """Writes solution.json, agent_XX.csv and residuals.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "solution.json"]
    write_solution(paths[0], solution, scenario, report, scheme_info)
    for i, traj in enumerate(solution.trajectories):
        p = out / f"agent_{i:02d}.csv"
        p.write_text(agent_csv(traj))
        paths.append(p)
    p = out / "residuals.csv"
    p.write_text(residual_csv(solution))
    paths.append(p)
    return paths
