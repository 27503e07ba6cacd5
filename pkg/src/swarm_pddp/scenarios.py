"""Scenario definitions, YAML configs and post-hoc validation.

Configs are YAML documents whose keys carry their units (``x_m``,
``heading_deg``, ``guess_s``).  Headings are kept in degrees inside the
config objects and converted to radians only when a state vector is
requested, so a dumped config reloads to an identical object.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .model import AgentState, DynamicsParams
from .network import Topology, build_topology
from .pddp import CostWeights
from .qp import TimeSequenceSpec

CONFIG_VERSION = 1
SAFETY_TOL = 0.1  # [m] slack allowed by the post-hoc checks
TIME_TOL = 1e-3  # [s] numeric slack on top of the configured relaxation


class ConfigError(ValueError):
    """Schema violation; the message names the field and, when known, the line."""


@dataclass(frozen=True)
class Pose:
    x_m: float
    y_m: float
    heading_deg: float

    def state(self) -> AgentState:
        return AgentState(self.x_m, self.y_m, math.radians(self.heading_deg))


@dataclass(frozen=True)
class AgentSpec:
    start: Pose
    target: Pose

    def initial_state(self) -> np.ndarray:
        return self.start.state().as_array()

    def target_state(self) -> np.ndarray:
        """Target with its heading moved to the branch closest to the initial heading."""
        s0 = self.initial_state()
        tgt = self.target.state().as_array()
        tgt[2] = s0[2] + math.remainder(tgt[2] - s0[2], 2.0 * math.pi)
        return tgt


@dataclass(frozen=True)
class Obstacle:
    x_m: float
    y_m: float
    radius_m: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x_m, self.y_m])


@dataclass(frozen=True)
class TimeSequence:
    """Arrival-time relations between neighbours.

    ``kind`` is ``none``, ``simultaneous`` or ``intervals``.  For intervals,
    agent ``i`` should arrive ``interval_s * i`` after agent 0 (chain by id),
    each relation relaxed by ``relax_s``.
    """

    kind: str = "none"
    interval_s: float = 0.0
    relax_s: float = 0.0

    def offset(self, agent: int) -> float:
        return self.interval_s * agent if self.kind == "intervals" else 0.0

    def spec_for(self, topology: Topology, agent: int) -> TimeSequenceSpec | None:
        if self.kind == "none":
            return None
        nbrs = topology.neighbor_sets[agent]
        if len(nbrs) < 2:
            return None
        rows = np.zeros((len(nbrs) - 1, len(nbrs)))
        delta = np.zeros(len(nbrs) - 1)
        for r, j in enumerate(nbrs[1:]):
            rows[r, 0] = 1.0
            rows[r, r + 1] = -1.0
            delta[r] = self.offset(agent) - self.offset(j)
        relax = 0.0 if self.kind == "simultaneous" else self.relax_s
        return TimeSequenceSpec(rows, delta, relax)


@dataclass(frozen=True)
class Weights:
    terminal: tuple = (25.0, 25.0, 25.0)
    control: float = 1.0
    state: tuple = (0.0, 0.0, 0.0)

    def cost_weights(self, target: np.ndarray) -> CostWeights:
        return CostWeights(np.diag(self.terminal), self.control, np.diag(self.state), target)


@dataclass(frozen=True)
class Penalties:
    tau: float = 0.2
    rho: float = 2.0
    mu: float = 1.0
    sigma: float = 2.0
    gamma: float = 1.0


@dataclass(frozen=True)
class StopCriteria:
    eps_abs: float = 1e-3
    eps_rel: float = 6e-2
    max_iter: int = 300

    def __post_init__(self):
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValueError("stopping tolerances must be non-negative")


@dataclass(frozen=True)
class SolverSettings:
    alpha_l: float = 0.4
    max_inner: int = 10
    inner_tol: float = 1e-4
    line_search: bool = True
    activation_factor: float = 2.0  # constraints generated within factor * d_obstacle of activity
    warm_start_iters: int = 100
    lateral_shift: float = 3.0  # sideways shift of linearization points, in units of the safe distance
    second_order: bool = True  # include dynamics curvature in the local solver
    buffer_m: float = 2.0  # extra distance added to keep-out radii (and removed from keep-in) inside the QPs


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    agents: tuple
    dynamics: DynamicsParams = DynamicsParams()
    t_guess: float = 9.3
    t_bounds: tuple = (0.1, 20.0)
    obstacles: tuple = ()
    d_obstacle_safe: float = 10.0
    d_collision: float = 10.0
    d_comm: float = 300.0
    topology_size: Any = "all"
    time_sequence: TimeSequence = TimeSequence()
    weights: Weights = Weights()
    stop: StopCriteria = StopCriteria()
    penalties: Penalties = Penalties()
    solver: SolverSettings = SolverSettings()

    def __post_init__(self):
        if not self.d_collision < self.d_comm:
            raise ConfigError("d_collision must be smaller than d_comm")
        if not self.t_bounds[0] < self.t_bounds[1]:
            raise ConfigError("time bounds must satisfy min < max")
        if any(o.radius_m <= 0 for o in self.obstacles):
            raise ConfigError("obstacle radii must be positive")
        if not self.agents:
            raise ConfigError("at least one agent is required")

    @property
    def m(self) -> int:
        return len(self.agents)

    def topology(self) -> Topology:
        return build_topology([a.initial_state()[:2] for a in self.agents], self.topology_size)


# ---------------------------------------------------------------------------
# built-in scenarios


def _scenario1() -> ScenarioConfig:
    agents = (
        AgentSpec(Pose(15.0, 110.0, 0.0), Pose(285.0, 110.0, 0.0)),
        AgentSpec(Pose(15.0, 140.0, 0.0), Pose(285.0, 140.0, 0.0)),
        AgentSpec(Pose(285.0, 110.0, 180.0), Pose(15.0, 110.0, 180.0)),
        AgentSpec(Pose(285.0, 140.0, 180.0), Pose(15.0, 140.0, 180.0)),
    )
    return ScenarioConfig(
        name="scenario-1", agents=agents, t_guess=9.3, obstacles=(Obstacle(150.0, 125.0, 20.0),),
        d_comm=300.0, topology_size="all",
    )


def _scenario2() -> ScenarioConfig:
    starts = [(328.75, 26.5, 60.0), (484.0, 95.6, 120.0), (587.0, 242.8, 120.0),
              (551.2, 411.85, 180.0), (437.5, 538.16, 240.0)]
    targets = [(302.6, 275.14, 120.0), (324.45, 281.42, 180.0), (342.45, 294.8, 210.0),
               (322.84, 310.17, 240.0), (312.5, 321.65, 270.0)]
    agents = tuple(AgentSpec(Pose(*s), Pose(*t)) for s, t in zip(starts, targets))
    return ScenarioConfig(
        name="scenario-2", agents=agents, t_guess=9.0,
        obstacles=(Obstacle(400.0, 200.0, 40.0), Obstacle(450.0, 380.0, 40.0)),
        d_comm=380.0, topology_size=3,
        time_sequence=TimeSequence("intervals", 0.1, 0.01),
        stop=StopCriteria(eps_abs=5e-4),
        # Time penalties raised to the order of the final-time curvature that the
        # position consensus terms induce (about rho * V^2 * N / 3); with the
        # default values the arrival times barely move within the iteration cap.
        penalties=Penalties(sigma=1000.0, gamma=1000.0),
    )


def formation_agents(count: int, radius: float, center=(0.0, 0.0)) -> tuple:
    """Agents evenly spaced on a circle, each flying through the centre to the opposite point."""
    agents = []
    for i in range(count):
        ang_deg = 360.0 * i / count
        ang = math.radians(ang_deg)
        px, py = radius * math.cos(ang), radius * math.sin(ang)
        heading = (ang_deg + 180.0) % 360.0
        agents.append(AgentSpec(Pose(center[0] + px, center[1] + py, heading),
                                Pose(center[0] - px, center[1] - py, heading)))
    return tuple(agents)


S3_FORMATION_RADIUS = 135.0


def _scenario3() -> ScenarioConfig:
    return ScenarioConfig(
        name="scenario-3", agents=formation_agents(16, S3_FORMATION_RADIUS), t_guess=9.2,
        obstacles=(Obstacle(0.0, 0.0, 20.0),), d_comm=120.0, topology_size=5,
        time_sequence=TimeSequence("simultaneous"),
        penalties=Penalties(sigma=1000.0, gamma=1000.0),  # see scenario 2
    )


def _scenario4() -> ScenarioConfig:
    agents = []
    for i in range(1, 21):
        y = 100.0 + (i - 1) * 30.0
        agents.append(AgentSpec(Pose(20.0 + 10.0 * (-1) ** i, y, 0.0), Pose(290.0 + 10.0 * (-1) ** i, y, 0.0)))
    obstacles = (
        Obstacle(200.0, 200.0, 15.0), Obstacle(150.0, 120.0, 20.0), Obstacle(180.0, 300.0, 20.0),
        Obstacle(150.0, 390.0, 20.0), Obstacle(210.0, 500.0, 20.0), Obstacle(150.0, 580.0, 15.0),
        Obstacle(180.0, 680.0, 20.0),
    )
    return ScenarioConfig(
        name="scenario-4", agents=tuple(agents), t_guess=9.2, obstacles=obstacles,
        d_comm=170.0, topology_size=5,
    )


_BUILTIN = {1: _scenario1, 2: _scenario2, 3: _scenario3, 4: _scenario4}


def builtin(scenario_id: int) -> ScenarioConfig:
    try:
        return _BUILTIN[int(scenario_id)]()
    except (KeyError, ValueError):
        raise ConfigError(f"unknown built-in scenario {scenario_id!r}; choose 1-4") from None


# ---------------------------------------------------------------------------
# YAML round trip


def to_dict(cfg: ScenarioConfig) -> dict:
    dyn = cfg.dynamics
    return {
        "version": CONFIG_VERSION,
        "name": cfg.name,
        "dynamics": {"speed_mps": dyn.speed, "omega_max_radps": dyn.omega_max,
                     "n_steps": dyn.n_steps, "integrator": dyn.integrator},
        "time": {"guess_s": cfg.t_guess, "min_s": cfg.t_bounds[0], "max_s": cfg.t_bounds[1]},
        "agents": [{"start": asdict(a.start), "target": asdict(a.target)} for a in cfg.agents],
        "obstacles": [asdict(o) for o in cfg.obstacles],
        "safety": {"d_obstacle_m": cfg.d_obstacle_safe, "d_collision_m": cfg.d_collision,
                   "d_comm_m": cfg.d_comm},
        "topology": {"size": cfg.topology_size},
        "time_sequence": asdict(cfg.time_sequence),
        "weights": {"terminal": list(cfg.weights.terminal), "control": cfg.weights.control,
                    "state": list(cfg.weights.state)},
        "penalties": asdict(cfg.penalties),
        "stop": asdict(cfg.stop),
        "solver": asdict(cfg.solver),
    }


def dump(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


class _Reader:
    """Walks a composed YAML node tree so errors can cite line numbers."""

    def __init__(self, source: str):
        self.source = source

    def where(self, node) -> str:
        return f"{self.source}:{node.start_mark.line + 1}" if node is not None else self.source

    def mapping(self, node, path: str, required: set, optional: set = frozenset()):
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{self.where(node)}: '{path}' must be a mapping")
        out = {}
        for key_node, val_node in node.value:
            key = key_node.value
            if key not in required and key not in optional:
                raise ConfigError(f"{self.where(key_node)}: unknown key '{path}.{key}'")
            if key in out:
                raise ConfigError(f"{self.where(key_node)}: duplicate key '{path}.{key}'")
            out[key] = val_node
        for key in sorted(required):
            if key not in out:
                raise ConfigError(f"{self.where(node)}: missing required field '{path}.{key}'")
        return out

    def scalar(self, node, path: str, kind):
        if not isinstance(node, yaml.ScalarNode):
            raise ConfigError(f"{self.where(node)}: '{path}' must be a scalar")
        value = yaml.safe_load(node.value) if node.style is None else node.value
        try:
            if kind is float:
                if isinstance(value, bool):
                    raise TypeError
                return float(value)
            if kind is int:
                if isinstance(value, bool) or not float(value).is_integer():
                    raise TypeError
                return int(value)
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            return str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.where(node)}: '{path}' must be of type {kind.__name__}") from None

    def sequence(self, node, path: str):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{self.where(node)}: '{path}' must be a list")
        return node.value


def _parse(root, reader: _Reader) -> ScenarioConfig:
    top = reader.mapping(
        root, "config",
        {"version", "name", "dynamics", "time", "agents", "safety"},
        {"obstacles", "topology", "time_sequence", "weights", "penalties", "stop", "solver"},
    )
    version = reader.scalar(top["version"], "version", int)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{reader.where(top['version'])}: unsupported config version {version}")

    def block(name, fields: dict, required=None):
        if name not in top:
            return {}
        req = set(fields) if required is None else required
        nodes = reader.mapping(top[name], name, req, set(fields) - req)
        return {k: reader.scalar(v, f"{name}.{k}", fields[k]) for k, v in nodes.items()}

    dyn = block("dynamics", {"speed_mps": float, "omega_max_radps": float, "n_steps": int, "integrator": str},
                {"speed_mps", "omega_max_radps"})
    time = block("time", {"guess_s": float, "min_s": float, "max_s": float})
    safety = block("safety", {"d_obstacle_m": float, "d_collision_m": float, "d_comm_m": float})

    def pose(node, path):
        fields = reader.mapping(node, path, {"x_m", "y_m", "heading_deg"})
        return Pose(*(reader.scalar(fields[k], f"{path}.{k}", float) for k in ("x_m", "y_m", "heading_deg")))

    agents = []
    for i, node in enumerate(reader.sequence(top["agents"], "agents")):
        fields = reader.mapping(node, f"agents[{i}]", {"start", "target"})
        agents.append(AgentSpec(pose(fields["start"], f"agents[{i}].start"),
                                pose(fields["target"], f"agents[{i}].target")))
    obstacles = []
    if "obstacles" in top:
        for i, node in enumerate(reader.sequence(top["obstacles"], "obstacles")):
            fields = reader.mapping(node, f"obstacles[{i}]", {"x_m", "y_m", "radius_m"})
            obstacles.append(Obstacle(*(reader.scalar(fields[k], f"obstacles[{i}].{k}", float)
                                        for k in ("x_m", "y_m", "radius_m"))))
    size = "all"
    if "topology" in top:
        fields = reader.mapping(top["topology"], "topology", {"size"})
        raw = reader.scalar(fields["size"], "topology.size", str)
        size = raw if raw == "all" else reader.scalar(fields["size"], "topology.size", int)
    seq = block("time_sequence", {"kind": str, "interval_s": float, "relax_s": float}, {"kind"})
    if seq and seq["kind"] not in ("none", "simultaneous", "intervals"):
        raise ConfigError(f"{reader.where(top['time_sequence'])}: time_sequence.kind must be none, simultaneous or intervals")

    weights = Weights()
    if "weights" in top:
        fields = reader.mapping(top["weights"], "weights", set(), {"terminal", "control", "state"})
        kw = {}
        for key in ("terminal", "state"):
            if key in fields:
                items = reader.sequence(fields[key], f"weights.{key}")
                if len(items) != 3:
                    raise ConfigError(f"{reader.where(fields[key])}: 'weights.{key}' needs 3 entries")
                kw[key] = tuple(reader.scalar(v, f"weights.{key}", float) for v in items)
        if "control" in fields:
            kw["control"] = reader.scalar(fields["control"], "weights.control", float)
        weights = Weights(**kw)
    pen = block("penalties", {k: float for k in ("tau", "rho", "mu", "sigma", "gamma")}, set())
    stop = block("stop", {"eps_abs": float, "eps_rel": float, "max_iter": int}, set())
    solver = block("solver", {"alpha_l": float, "max_inner": int, "inner_tol": float, "line_search": bool,
                              "activation_factor": float, "warm_start_iters": int,
                              "lateral_shift": float, "buffer_m": float,
                              "second_order": bool}, set())

    try:
        dynamics = DynamicsParams(dyn["speed_mps"], dyn["omega_max_radps"], dyn.get("n_steps", 100),
                                  dyn.get("integrator", "euler"))
        return ScenarioConfig(
            name=reader.scalar(top["name"], "name", str),
            agents=tuple(agents), dynamics=dynamics,
            t_guess=time["guess_s"], t_bounds=(time["min_s"], time["max_s"]),
            obstacles=tuple(obstacles),
            d_obstacle_safe=safety["d_obstacle_m"], d_collision=safety["d_collision_m"], d_comm=safety["d_comm_m"],
            topology_size=size,
            time_sequence=TimeSequence(**seq) if seq else TimeSequence(),
            weights=weights, stop=StopCriteria(**stop), penalties=Penalties(**pen),
            solver=SolverSettings(**solver),
        )
    except ConfigError as exc:
        raise ConfigError(f"{reader.source}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{reader.source}: {exc}") from None


def loads(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    if root is None:
        raise ConfigError(f"{source}: empty config")
    return _parse(root, _Reader(source))


def load(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return loads(text, str(path))


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    min_pairwise_distance: float
    closest_pair: tuple
    closest_instant: int
    min_obstacle_clearance: float  # distance to the obstacle centre minus (r_o + d_o)
    clearance_agent: int
    clearance_instant: int
    clearance_obstacle: int
    max_comm_distance: float
    comm_pair: tuple
    comm_instant: int
    terminal_position_errors: list
    final_times: list
    time_gaps: list = field(default_factory=list)  # (i, j, t_j - t_i, expected)
    min_physical_distance: float = float("inf")
    converged: bool | None = None
    iterations: int | None = None
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [
            f"min pairwise distance  {self.min_pairwise_distance:.3f} m  (agents {self.closest_pair}, k={self.closest_instant})",
            f"min obstacle margin    {self.min_obstacle_clearance:.3f} m  (agent {self.clearance_agent}, obstacle {self.clearance_obstacle}, k={self.clearance_instant})",
            f"min physical distance  {self.min_physical_distance:.3f} m  (shared clock, informational)",
            f"max neighbour distance {self.max_comm_distance:.3f} m  (agents {self.comm_pair}, k={self.comm_instant})",
            "final times            " + ", ".join(f"{t:.4f}" for t in self.final_times),
            "terminal errors        " + ", ".join(f"{e:.3f}" for e in self.terminal_position_errors),
        ]
        for i, j, gap, want in self.time_gaps:
            lines.append(f"time gap {i}->{j}          {gap:+.4f} s (expected {want:+.4f})")
        if self.converged is not None:
            lines.append(f"converged              {self.converged} after {self.iterations} iterations")
        lines += [f"FAIL: {f}" for f in self.failures] or ["all checks passed"]
        return "\n".join(lines)


def validate(trajectories, scenario: ScenarioConfig, topology: Topology | None = None,
             converged: bool | None = None, iterations: int | None = None) -> ValidationReport:
    """Check the true (nonlinear) constraints on every instant of every agent pair.

    Separation is measured at equal normalized instants, the same pairing
    the optimizer's constraints use; the minimum over a common physical
    time grid is reported alongside for information.
    """
    topology = topology or scenario.topology()
    pos = np.stack([np.asarray(t.states)[:, :2] for t in trajectories])  # (m, N+1, 2)
    m, n1, _ = pos.shape
    failures = []

    best = (np.inf, (-1, -1), -1)
    for i in range(m):
        for j in range(i + 1, m):
            d = np.linalg.norm(pos[i] - pos[j], axis=1)
            k = int(np.argmin(d))
            if d[k] < best[0]:
                best = (float(d[k]), (i, j), k)
    if m > 1 and best[0] < scenario.d_collision - SAFETY_TOL:
        failures.append(f"agents {best[1]} are {best[0]:.3f} m apart at k={best[2]} (< {scenario.d_collision})")

    clear = (np.inf, -1, -1, -1)
    for o_idx, obs in enumerate(scenario.obstacles):
        d = np.linalg.norm(pos - obs.center, axis=2) - (obs.radius_m + scenario.d_obstacle_safe)
        i, k = np.unravel_index(int(np.argmin(d)), d.shape)
        if d[i, k] < clear[0]:
            clear = (float(d[i, k]), int(i), int(k), o_idx)
    if clear[0] < -SAFETY_TOL:
        failures.append(f"agent {clear[1]} enters the keep-out of obstacle {clear[3]} at k={clear[2]} "
                        f"(margin {clear[0]:.3f} m)")

    comm = (0.0, (-1, -1), -1)
    for i in range(m):
        for j in topology.neighbor_sets[i][1:]:
            d = np.linalg.norm(pos[i] - pos[j], axis=1)
            k = int(np.argmax(d))
            if d[k] > comm[0]:
                comm = (float(d[k]), (i, j), k)
    if comm[0] > scenario.d_comm + SAFETY_TOL:
        failures.append(f"neighbours {comm[1]} are {comm[0]:.3f} m apart at k={comm[2]} (> {scenario.d_comm})")

    finals = [float(t.t_final) for t in trajectories]
    gaps = []
    seq = scenario.time_sequence
    if seq.kind != "none":
        pairs = sorted({(min(i, j), max(i, j)) for i in range(m) for j in topology.neighbor_sets[i][1:]})
        relax = 0.0 if seq.kind == "simultaneous" else seq.relax_s
        for i, j in pairs:
            want = seq.offset(j) - seq.offset(i)
            gap = finals[j] - finals[i]
            gaps.append((i, j, gap, want))
            if abs(gap - want) > relax + TIME_TOL:
                failures.append(f"arrival gap {i}->{j} is {gap:.4f} s, expected {want:.4f} +/- {relax + TIME_TOL:g}")

    # informational: separation on a shared physical clock
    t_end = min(finals)
    grid = np.linspace(0.0, t_end, 4 * n1)
    phys = np.stack([
        np.stack([np.interp(grid, traj.times(), pos[a, :, c]) for c in range(2)], axis=1)
        for a, traj in enumerate(trajectories)
    ])
    min_phys = min((float(np.min(np.linalg.norm(phys[i] - phys[j], axis=1)))
                    for i in range(m) for j in range(i + 1, m)), default=float("inf"))

    errors = [float(np.linalg.norm(pos[a, -1] - spec.target_state()[:2])) for a, spec in enumerate(scenario.agents)]
    return ValidationReport(
        best[0], best[1], best[2], clear[0], clear[1], clear[2], clear[3],
        comm[0], comm[1], comm[2], errors, finals, gaps, min_phys, converged, iterations, failures,
    )


def with_overrides(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    return replace(cfg, **changes)
