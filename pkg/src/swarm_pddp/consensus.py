"""Consensus-ADMM engine around the per-agent PDDP solver.

One iteration, for every agent ``i`` with neighbour set ``N_i``:

1. local update: PDDP on the augmented Lagrangian (controls and final time);
2. safe update: per-instant QPs for the position copies of ``i`` and its
   neighbours with linearized keep-out / keep-in constraints, a clamp for
   the control copy and a small QP for the time copies;
3. global update: every agent averages the copies that its deemed
   neighbours hold of it, then publishes the result;

followed by the dual ascent step, the penalty-scheme hook and the
residual-based stopping test.  Residuals are gathered globally by the
harness; they are telemetry, not part of any agent's logic.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import AgentTrajectory, Unicycle
from .network import CopyMessage, GlobalMessage, MessageBus, SyncError, Topology
from .pddp import AugmentedTerms, Bounds, PDDPOptions, SolverFailure, solve_local
from .penalty import FAMILIES, FixedPenalty, PenaltyScheme
from .qp import (
    HalfPlane, keepin_row, obstacle_row, project_box, separation_row, solve_state_safe, solve_time_safe,
)
from .scenarios import ScenarioConfig

log = logging.getLogger(__name__)

RESIDUAL_FAMILIES = ("U", "X", "Xa", "T", "Ta")


@dataclass
class AgentVars:
    """Everything agent ``i`` stores.  Stack blocks follow ``nbrs`` (self first)."""

    index: int
    nbrs: tuple
    x0: np.ndarray
    weights: object
    X: np.ndarray  # (N+1, 3) local states
    U: np.ndarray  # (N, 1) local controls
    t: float  # local final time
    xt: np.ndarray  # (nb, N+1, 3) state copies
    ut: np.ndarray  # (N, 1) control copy
    tt: np.ndarray  # (nb,) time copies
    z: np.ndarray  # (N+1, 3) own global state
    s: float  # own global time
    za: np.ndarray  # (nb, N+1, 3) cached globals of the neighbours
    sa: np.ndarray  # (nb,)
    zeta: np.ndarray
    lam: np.ndarray
    nu: float
    y: np.ndarray
    eta: np.ndarray
    pen: dict
    inner_ok: bool = True
    qp_infeasible: int = 0

    def trajectory(self) -> AgentTrajectory:
        return AgentTrajectory(self.X, self.U, self.t)

    def copy(self) -> "AgentVars":
        out = AgentVars(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        for name in ("X", "U", "xt", "ut", "tt", "z", "za", "sa", "zeta", "lam", "y", "eta"):
            setattr(out, name, getattr(self, name).copy())
        out.pen = dict(self.pen)
        return out


@dataclass
class ConsensusState:
    agents: list
    topology: Topology
    iteration: int = 0

    def copy(self) -> "ConsensusState":
        return ConsensusState([a.copy() for a in self.agents], self.topology, self.iteration)


@dataclass
class ResidualReport:
    primal: dict  # family -> ||r^p||
    dual: dict  # family -> ||r^d||
    dual_stack: dict  # family -> ||stacked dual||
    primal_scale: dict  # family -> max(||a||, ||b||)
    dims: dict  # family -> count

    def thresholds(self, eps_abs: float, eps_rel: float):
        pri = {f: np.sqrt(self.dims[f]) * eps_abs + eps_rel * self.primal_scale[f] for f in RESIDUAL_FAMILIES}
        dua = {f: np.sqrt(self.dims[f]) * eps_abs + eps_rel * self.dual_stack[f] for f in RESIDUAL_FAMILIES}
        return pri, dua

    def combined(self) -> float:
        return float(np.sqrt(sum(v * v for v in self.primal.values()) + sum(v * v for v in self.dual.values())))


@dataclass
class EngineOptions:
    threads: int | None = None
    trace: object = None  # callable receiving bus trace lines
    max_iter: int | None = None


@dataclass
class SwarmSolution:
    trajectories: list
    converged: bool
    iterations: int
    iteration_trace: list
    residual_trace: list
    timings: dict
    topology: Topology
    scheme: str
    copies: list = field(default_factory=list)  # safe state copies per agent (N+1, 3)


def check_stop(report: ResidualReport, eps_abs: float, eps_rel: float) -> bool:
    """True iff all ten residual inequalities hold."""
    pri, dua = report.thresholds(eps_abs, eps_rel)
    return all(report.primal[f] <= pri[f] and report.dual[f] <= dua[f] for f in RESIDUAL_FAMILIES)


def _thread_count(requested):
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("SWARM_PDDP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer SWARM_PDDP_THREADS=%r", env)
    return 1


class Engine:
    """Runs the distributed iteration for one scenario."""

    def __init__(self, scenario: ScenarioConfig, scheme: PenaltyScheme | None = None,
                 options: EngineOptions | None = None):
        self.scenario = scenario
        self.scheme = scheme or FixedPenalty()
        self.options = options or EngineOptions()
        self.model = Unicycle(scenario.dynamics)
        self.topology = scenario.topology()
        self.bus = MessageBus(self.topology, self.options.trace)
        self.bounds = Bounds(-scenario.dynamics.omega_max, scenario.dynamics.omega_max, *scenario.t_bounds)
        sv = scenario.solver
        self.pddp_opts = PDDPOptions(sv.inner_tol, sv.max_inner, sv.alpha_l, False, sv.line_search,
                                     second_order=sv.second_order)
        self.seq_specs = [scenario.time_sequence.spec_for(self.topology, i) for i in range(scenario.m)]
        self._threads = _thread_count(self.options.threads)
        self._round = 0

    # -- helpers -----------------------------------------------------------

    def _map(self, fn, items):
        items = list(items)
        if self._threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self._threads) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    # -- initialization ----------------------------------------------------

    def warm_start(self) -> ConsensusState:
        sc = self.scenario
        n_steps = sc.dynamics.n_steps
        opts = PDDPOptions(sc.solver.inner_tol, sc.solver.warm_start_iters, 1.0, True, True,
                           second_order=sc.solver.second_order)

        def solve(i):
            spec = sc.agents[i]
            weights = sc.weights.cost_weights(spec.target_state())
            init = self.model.rollout(spec.initial_state(), np.zeros(n_steps), sc.t_guess)
            try:
                res = solve_local(self.model, init, weights, None, self.bounds, opts)
            except SolverFailure as exc:
                raise SolverFailure(exc.step_index, f"warm start failed for agent {i}: {exc}") from exc
            return weights, res.trajectory

        solved = self._map(solve, range(sc.m))
        trajs = [t for _, t in solved]
        agents = []
        pen = sc.penalties
        for i in range(sc.m):
            nbrs = self.topology.neighbor_sets[i]
            tr = trajs[i]
            xt = np.stack([trajs[j].states for j in nbrs])
            tt = np.array([trajs[j].t_final for j in nbrs])
            agents.append(AgentVars(
                index=i, nbrs=nbrs, x0=sc.agents[i].initial_state(), weights=solved[i][0],
                X=tr.states.copy(), U=tr.controls.copy(), t=tr.t_final,
                xt=xt, ut=tr.controls.copy(), tt=tt,
                z=tr.states.copy(), s=tr.t_final, za=xt.copy(), sa=tt.copy(),
                zeta=np.zeros_like(tr.controls), lam=np.zeros_like(tr.states), nu=0.0,
                y=np.zeros_like(xt), eta=np.zeros_like(tt),
                pen={"tau": pen.tau, "rho": pen.rho, "mu": pen.mu, "sigma": pen.sigma, "gamma": pen.gamma},
            ))
        return ConsensusState(agents, self.topology, 0)

    # -- step 1 ------------------------------------------------------------

    def aug_terms(self, a: AgentVars) -> AugmentedTerms:
        return AugmentedTerms(a.xt[0], a.ut, float(a.tt[0]), a.lam, a.zeta, a.nu,
                              a.pen["rho"], a.pen["tau"], a.pen["sigma"])

    def step1_all(self, state: ConsensusState) -> None:
        def local(a: AgentVars):
            res = solve_local(self.model, a.trajectory(), a.weights, self.aug_terms(a), self.bounds, self.pddp_opts)
            return res

        results = self._map(local, state.agents)
        for a, res in zip(state.agents, results):
            a.X = res.trajectory.states
            a.U = res.trajectory.controls
            a.t = res.trajectory.t_final
            a.inner_ok = res.converged

    # -- step 2 ------------------------------------------------------------

    def encounter_sides(self, a: AgentVars, nominal: np.ndarray):
        """Passing side for every obstacle and every neighbour, fixed for the whole pass.

        The side is read at the instant of closest approach of the nominal
        trajectories (exact ties go to the right-hand side), so all instants
        of one encounter are shifted the same way, and two neighbours
        linearizing about the same shared nominal agree with each other.
        """
        sc = self.scenario
        pos = nominal[:, 1:, :2]
        vel = _velocity(nominal[:, 1:, 2], sc.dynamics.speed)
        obs_sides = []
        for obs in sc.obstacles:
            diff = pos[0] - obs.center
            k = int(np.argmin(np.einsum("ki,ki->k", diff, diff)))
            obs_sides.append(_side(diff[k], vel[0, k]))
        nbr_sides = [1.0]
        for b in range(1, nominal.shape[0]):
            diff = pos[0] - pos[b]
            k = int(np.argmin(np.einsum("ki,ki->k", diff, diff)))
            nbr_sides.append(_side(diff[k], vel[0, k] - vel[b, k]))
        return obs_sides, nbr_sides

    def constraints_at(self, a: AgentVars, k: int, nominal: np.ndarray, sides) -> list:
        """Linearized constraints at instant k around nominal blocks (nb, 3).

        Supporting planes are taken at the nominal point shifted sideways
        on the encounter's passing side (see `lateral_normal`).  Every such
        plane is still an inner approximation of the keep-out disc; the
        shift only breaks the symmetry of head-on geometries where the
        plain normal points along the path.
        """
        sc = self.scenario
        nb = len(a.nbrs)
        margin = sc.solver.activation_factor * sc.d_obstacle_safe
        speed = sc.dynamics.speed
        obs_sides, nbr_sides = sides
        buf = sc.solver.buffer_m
        rows = []
        p0 = nominal[0, :2]
        vel = _velocity(nominal[:, 2], speed)
        for o, obs in enumerate(sc.obstacles):
            keep = obs.radius_m + sc.d_obstacle_safe + buf
            diff = p0 - obs.center
            if np.hypot(diff[0], diff[1]) < keep + margin:
                normal = lateral_normal(diff, vel[0], speed, obs_sides[o] * sc.solver.lateral_shift * sc.d_obstacle_safe)
                rows.append(obstacle_row(nb, 2, 0, _plane(normal, keep + normal @ obs.center)))
        for b in range(1, nb):
            diff = p0 - nominal[b, :2]
            dist = float(np.hypot(diff[0], diff[1]))
            if dist < sc.d_collision + margin:
                normal = lateral_normal(diff, vel[0] - vel[b], 2.0 * speed,
                                        nbr_sides[b] * sc.solver.lateral_shift * sc.d_collision)
                rows.append(separation_row(nb, 2, 0, b, normal, sc.d_collision + buf))
            if dist > sc.d_comm - margin:
                rows.append(keepin_row(nb, 2, 0, b, diff / dist, sc.d_comm - buf))
        return rows

    def step2_agent(self, a: AgentVars) -> tuple:
        rho, mu = a.pen["rho"], a.pen["mu"]
        own = a.X + a.lam / rho
        stack = a.za - a.y / mu
        new = stack.copy()  # (nb, N+1, 3); unconstrained minimizer, refined below where needed
        new[0] = (rho * own + mu * stack[0]) / (rho + mu)
        infeasible = 0
        nominal = a.za
        sides = self.encounter_sides(a, nominal)
        for k in range(1, a.X.shape[0]):
            rows = self.constraints_at(a, k, nominal[:, k], sides)
            if not rows:
                continue
            pos, res = solve_state_safe(own[k, :2], rho, stack[:, k, :2], mu, rows)
            new[:, k, :2] = pos
            if res is not None and not res.feasible:
                infeasible += 1
        ut = project_box(a.U + a.zeta / a.pen["tau"], self.bounds.u_min, self.bounds.u_max)
        tt, tres = solve_time_safe(a.t + a.nu / a.pen["sigma"], a.pen["sigma"], a.sa - a.eta / a.pen["gamma"],
                                   a.pen["gamma"], self.seq_specs[a.index], self.scenario.t_bounds)
        if not tres.feasible:
            infeasible += 1
        return new, ut, tt, infeasible

    def step2_all(self, state: ConsensusState) -> None:
        results = self._map(self.step2_agent, state.agents)
        for a, (xt, ut, tt, bad) in zip(state.agents, results):
            a.xt, a.ut, a.tt, a.qp_infeasible = xt, ut, tt, bad

    # -- step 3 ------------------------------------------------------------

    def step3_global(self, state: ConsensusState) -> None:
        self._round += 1
        outgoing = {
            a.index: [CopyMessage(j, a.index, a.xt[b], float(a.tt[b]), a.y[b], float(a.eta[b]),
                                  a.pen["mu"], a.pen["gamma"]) for b, j in enumerate(a.nbrs)]
            for a in state.agents
        }
        inbox = self.bus.exchange_copies(self._round, outgoing)
        for a in state.agents:
            box = inbox[a.index]
            if len(box) != len(self.topology.deemed_sets[a.index]):
                raise SyncError(f"agent {a.index} is missing copies")
            a.z, a.s = global_average(box)
        g_inbox = self.bus.exchange_globals(self._round, {a.index: GlobalMessage(a.index, a.z, a.s) for a in state.agents})
        for a in state.agents:
            by_id = {msg.about: msg for msg in g_inbox[a.index]}
            a.za = np.stack([by_id[j].z for j in a.nbrs])
            a.sa = np.array([by_id[j].s for j in a.nbrs])

    # -- duals -------------------------------------------------------------

    @staticmethod
    def dual_update_all(state: ConsensusState) -> None:
        for a in state.agents:
            dual_update(a)

    # -- main loop ---------------------------------------------------------

    def iterate(self, state: ConsensusState) -> None:
        self.step1_all(state)
        self.step2_all(state)
        self.step3_global(state)
        self.dual_update_all(state)
        state.iteration += 1

    def run(self, max_iter: int | None = None) -> SwarmSolution:
        sc = self.scenario
        max_iter = max_iter or self.options.max_iter or sc.stop.max_iter
        timings = {"warm_start": 0.0, "iterations": 0.0}
        t0 = time.perf_counter()
        state = self.warm_start()
        timings["warm_start"] = time.perf_counter() - t0
        self.scheme.begin(state)
        it_trace, res_trace = [], []
        converged = False
        t1 = time.perf_counter()
        while state.iteration < max_iter:
            prev = state.copy()
            self.iterate(state)
            report = residuals(state, prev)
            stop = check_stop(report, sc.stop.eps_abs, sc.stop.eps_rel)
            it_trace.append(_trace_row(state, report, self.scheme))
            res_trace.append(report)
            if stop:
                converged = True
                break
            self.scheme.update(state.iteration, state, prev, report)
        timings["iterations"] = time.perf_counter() - t1
        self.state = state
        return SwarmSolution(
            [a.trajectory() for a in state.agents], converged, state.iteration, it_trace, res_trace,
            timings, self.topology, self.scheme.name, [a.xt[0].copy() for a in state.agents],
        )


def lateral_normal(diff, rel_velocity, v_scale: float, shift: float) -> np.ndarray:
    """Unit normal of the keep-out plane for relative position `diff`.

    The linearization point is moved by `shift` (signed) along the
    right-hand perpendicular of `rel_velocity`, scaled by
    |rel_velocity| / v_scale so that pairs flying in parallel keep the
    plain radial normal.
    """
    vnorm = float(np.hypot(rel_velocity[0], rel_velocity[1]))
    point = np.asarray(diff, dtype=float)
    if shift != 0 and vnorm > 1e-9:
        right = np.array([rel_velocity[1], -rel_velocity[0]]) / vnorm
        point = point + shift * min(1.0, vnorm / v_scale) * right
    dist = float(np.hypot(point[0], point[1]))
    if dist < 1e-12:
        return np.array([1.0, 0.0])
    return point / dist


SIDE_TIE_M = 1e-6  # lateral offsets below this count as dead-ahead


def _side(diff, rel_velocity) -> float:
    """+1 if `diff` lies on the right of `rel_velocity` (or dead ahead), else -1.

    Symmetric geometries put the closest approach exactly on the path, where
    the sign of the cross product is rounding noise; treating those as ties
    makes every agent in such a geometry pick the same side.
    """
    cross = diff[0] * rel_velocity[1] - diff[1] * rel_velocity[0]
    speed = float(np.hypot(rel_velocity[0], rel_velocity[1]))
    if speed == 0.0 or cross / speed > -SIDE_TIE_M:
        return 1.0
    return -1.0


def _velocity(headings, speed: float) -> np.ndarray:
    return speed * np.stack([np.cos(headings), np.sin(headings)], axis=-1)


def _plane(normal, offset):
    return HalfPlane(normal, float(offset))


def global_average(messages) -> tuple:
    """z = mean(copy + y/mu), s = mean(time copy + eta/gamma) over the senders' messages."""
    z = sum(msg.state_copy + msg.dual_y / msg.mu for msg in messages) / len(messages)
    s = sum(msg.time_copy + msg.dual_eta / msg.gamma for msg in messages) / len(messages)
    return np.asarray(z, dtype=float), float(s)


def dual_update(a: AgentVars) -> None:
    p = a.pen
    a.zeta = a.zeta + p["tau"] * (a.U - a.ut)
    a.lam = a.lam + p["rho"] * (a.X - a.xt[0])
    a.y = a.y + p["mu"] * (a.xt - a.za)
    a.nu = a.nu + p["sigma"] * (a.t - a.tt[0])
    a.eta = a.eta + p["gamma"] * (a.tt - a.sa)


def residuals(state: ConsensusState, prev: ConsensusState) -> ResidualReport:
    """Primal/dual residual norms; each agent's dual block uses its own penalty."""
    acc = {f: np.zeros(6) for f in RESIDUAL_FAMILIES}  # p^2, d^2, dualstack^2, a^2, b^2, dim

    def add(f, primal_a, primal_b, dual_delta, pen, dual_vals):
        v = acc[f]
        r = primal_a - primal_b
        v[0] += float(np.sum(r * r))
        v[1] += float(pen * pen * np.sum(dual_delta * dual_delta))
        v[2] += float(np.sum(np.square(dual_vals)))
        v[3] += float(np.sum(np.square(primal_a)))
        v[4] += float(np.sum(np.square(primal_b)))
        v[5] += np.size(primal_a)

    for a, b in zip(state.agents, prev.agents):
        p = a.pen
        add("U", a.U, a.ut, a.ut - b.ut, p["tau"], a.zeta)
        add("X", a.X, a.xt[0], a.xt[0] - b.xt[0], p["rho"], a.lam)
        add("Xa", a.xt, a.za, a.za - b.za, p["mu"], a.y)
        add("T", np.array([a.t]), a.tt[:1], a.tt[:1] - b.tt[:1], p["sigma"], np.array([a.nu]))
        add("Ta", a.tt, a.sa, a.sa - b.sa, p["gamma"], a.eta)
    return ResidualReport(
        primal={f: float(np.sqrt(v[0])) for f, v in acc.items()},
        dual={f: float(np.sqrt(v[1])) for f, v in acc.items()},
        dual_stack={f: float(np.sqrt(v[2])) for f, v in acc.items()},
        primal_scale={f: float(max(np.sqrt(v[3]), np.sqrt(v[4]))) for f, v in acc.items()},
        dims={f: int(v[5]) for f, v in acc.items()},
    )


def _trace_row(state: ConsensusState, report: ResidualReport, scheme) -> dict:
    row = {
        "iteration": state.iteration,
        "times": [float(a.t) for a in state.agents],
        "primal": dict(report.primal),
        "dual": dict(report.dual),
        "penalties": {f: [float(a.pen[f]) for a in state.agents] for f in FAMILIES},
        "qp_infeasible": int(sum(a.qp_infeasible for a in state.agents)),
        "inner_nonconverged": int(sum(not a.inner_ok for a in state.agents)),
    }
    extra = getattr(scheme, "last_event", None)
    if extra:
        row["scheme_event"] = extra
    return row


def run(scenario: ScenarioConfig, scheme: PenaltyScheme | None = None, max_iter: int | None = None,
        options: EngineOptions | None = None) -> SwarmSolution:
    return Engine(scenario, scheme, options).run(max_iter)
