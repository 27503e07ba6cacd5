"""Parameterized DDP: joint optimization of controls and the final time.

The final time is a scalar parameter ``theta`` that enters every step of
the normalized-time dynamics.  The backward sweep carries the usual value
expansion plus its cross terms with ``theta``; the parameter increment is
taken from the value expansion at the initial instant, where the state
deviation is zero because the initial state is fixed.

When an :class:`AugmentedTerms` bundle is supplied, the running and
terminal costs gain the ADMM penalty terms that tie the local trajectory
to its safe copies.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._kernels import FAIL_NONE, FAIL_THETA, backward_kernel, unicycle_forward
from .model import RK4, AgentTrajectory, Unicycle

log = logging.getLogger(__name__)

REG_MIN = 1e-6
REG_MAX = 1e6


class SolverFailure(RuntimeError):
    """Q_uu (or the parameter curvature) stayed indefinite at maximum regularization."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        where = "final-time curvature" if step_index == FAIL_THETA else f"step {step_index}"
        super().__init__(message or f"backward pass failed at {where}")


@dataclass(frozen=True)
class CostWeights:
    w_terminal: np.ndarray
    r_control: np.ndarray
    w_state: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w_terminal", np.atleast_2d(np.asarray(self.w_terminal, dtype=float)))
        object.__setattr__(self, "r_control", np.atleast_2d(np.asarray(self.r_control, dtype=float)))
        object.__setattr__(self, "w_state", np.atleast_2d(np.asarray(self.w_state, dtype=float)))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        assert np.all(np.diag(self.w_terminal) >= 0) and np.all(np.diag(self.w_state) >= 0)
        assert np.all(np.linalg.eigvalsh(self.r_control) > 0), "r_control must be positive definite"


@dataclass
class AugmentedTerms:
    """Copies, duals and penalties entering one agent's local subproblem.

    Arrays follow the trajectory shapes: ``x_tilde``/``lam`` are (N+1, n),
    ``u_tilde``/``zeta`` are (N, m).
    """

    x_tilde: np.ndarray
    u_tilde: np.ndarray
    t_tilde: float
    lam: np.ndarray
    zeta: np.ndarray
    nu: float
    rho: float
    tau: float
    sigma: float

    def __post_init__(self):
        if min(self.rho, self.tau, self.sigma) <= 0:
            raise ValueError("penalties must be positive")

    @classmethod
    def at_consensus(cls, traj: AgentTrajectory, rho=2.0, tau=0.2, sigma=2.0) -> "AugmentedTerms":
        return cls(
            traj.states.copy(), traj.controls.copy(), traj.t_final,
            np.zeros_like(traj.states), np.zeros_like(traj.controls), 0.0, rho, tau, sigma,
        )


@dataclass(frozen=True)
class Bounds:
    u_min: float = -np.inf
    u_max: float = np.inf
    t_min: float = 0.0
    t_max: float = np.inf


@dataclass(frozen=True)
class PDDPOptions:
    epsilon_rel: float = 1e-4
    max_inner: int = 10
    alpha_l: float = 0.4
    freeze_theta: bool = False
    line_search: bool = False
    alpha_floor: float = 1e-3
    second_order: bool = False  # add dynamics curvature (full DDP) to the Q expansion


@dataclass
class GainSchedule:
    k: np.ndarray  # (N, m) feedforward
    K: np.ndarray  # (N, m, n) state feedback
    M: np.ndarray  # (N, m) final-time coupling
    delta_theta_star: float
    alpha_l: float
    reg: float = 0.0
    expected: tuple = (0.0, 0.0)
    v_theta: float = 0.0
    v_thetatheta: float = 0.0

    @classmethod
    def zeros(cls, n_steps: int, n: int, m: int, alpha_l: float = 1.0) -> "GainSchedule":
        return cls(np.zeros((n_steps, m)), np.zeros((n_steps, m, n)), np.zeros((n_steps, m)), 0.0, alpha_l)


@dataclass
class LocalResult:
    trajectory: AgentTrajectory
    cost: float
    iterations: int
    converged: bool
    reg: float
    costs: list = field(default_factory=list)


def local_cost(traj: AgentTrajectory, weights: CostWeights, aug: AugmentedTerms | None = None) -> float:
    """Quadratic tracking cost, plus the ADMM penalty terms when `aug` is given."""
    x = traj.states
    u = traj.controls
    n_steps = u.shape[0]
    if aug is not None and (aug.x_tilde.shape != x.shape or aug.u_tilde.shape != u.shape):
        raise ValueError("augmented terms do not match the trajectory length")
    err = x - weights.target
    run = 0.5 * np.einsum("ki,ij,kj->", u, weights.r_control, u)
    run += 0.5 * np.einsum("ki,ij,kj->", err[:n_steps], weights.w_state, err[:n_steps])
    term = 0.5 * err[-1] @ weights.w_terminal @ err[-1]
    total = run + term
    if aug is not None:
        gap_x = x - aug.x_tilde + aug.lam / aug.rho
        gap_u = u - aug.u_tilde + aug.zeta / aug.tau
        gap_t = traj.t_final - aug.t_tilde + aug.nu / aug.sigma
        total += 0.5 * aug.rho * np.sum(gap_x * gap_x)
        total += 0.5 * aug.tau * np.sum(gap_u * gap_u)
        total += 0.5 * aug.sigma * gap_t * gap_t
    return float(total)


def _cost_derivatives(traj: AgentTrajectory, weights: CostWeights, aug: AugmentedTerms | None):
    x = traj.states
    u = traj.controls
    n_steps, m = u.shape
    n = x.shape[1]
    err = x - weights.target
    lx = err[:n_steps] @ weights.w_state.T
    lu = u @ weights.r_control.T
    lxx = np.broadcast_to(weights.w_state, (n_steps, n, n)).copy()
    luu = np.broadcast_to(weights.r_control, (n_steps, m, m)).copy()
    vx = weights.w_terminal @ err[-1]
    vxx = weights.w_terminal.copy()
    vt = 0.0
    vtt = 0.0
    if aug is not None:
        lx += aug.rho * (x[:n_steps] - aug.x_tilde[:n_steps]) + aug.lam[:n_steps]
        lu += aug.tau * (u - aug.u_tilde) + aug.zeta
        lxx += aug.rho * np.eye(n)
        luu += aug.tau * np.eye(m)
        vx = vx + aug.rho * (x[-1] - aug.x_tilde[-1]) + aug.lam[-1]
        vxx = vxx + aug.rho * np.eye(n)
        vt = aug.sigma * (traj.t_final - aug.t_tilde) + aug.nu
        vtt = aug.sigma
    return lx, lxx, lu, luu, vx, vxx, vt, vtt


def backward_pass(traj: AgentTrajectory, weights: CostWeights, aug, model, reg: float = 0.0,
                  alpha_l: float = 0.4, freeze_theta: bool = False, bounds: Bounds | None = None,
                  second_order: bool = False) -> GainSchedule:
    """One backward sweep at a fixed regularization; raises SolverFailure on indefiniteness."""
    if reg < 0:
        raise ValueError("reg must be non-negative")
    fx, fu, ft = model.linearize(traj.states, traj.controls, traj.t_final)
    lx, lxx, lu, luu, vx, vxx, vt, vtt = _cost_derivatives(traj, weights, aug)
    if second_order:
        fzz = np.ascontiguousarray(model.hessians(traj.states, traj.controls, traj.t_final))
    else:
        fzz = np.zeros((1, 1, 1, 1))
    k, kf, mt, dtheta, fail, dv1, dv2, vt0, vtt0 = backward_kernel(
        fx, fu, np.ascontiguousarray(ft), lx, lxx, lu, luu, vx, vxx, float(vt), float(vtt),
        float(reg), bool(freeze_theta), np.ascontiguousarray(traj.controls, dtype=float),
        float(bounds.u_min) if bounds is not None else -np.inf,
        float(bounds.u_max) if bounds is not None else np.inf, fzz, bool(second_order),
    )
    if fail != FAIL_NONE:
        raise SolverFailure(int(fail))
    return GainSchedule(k, kf, mt, float(dtheta), alpha_l, reg, (dv1, dv2), float(vt0), float(vtt0))


def forward_pass(traj: AgentTrajectory, gains: GainSchedule, model, bounds: Bounds,
                 alpha: float | None = None) -> AgentTrajectory:
    """Apply the gains with step size `alpha` (defaults to the schedule's alpha_l)."""
    alpha = gains.alpha_l if alpha is None else alpha
    t_new = float(np.clip(traj.t_final + alpha * gains.delta_theta_star, bounds.t_min, bounds.t_max))
    dtheta = t_new - traj.t_final
    if isinstance(model, Unicycle):
        states, controls = unicycle_forward(
            traj.states, traj.controls, t_new, gains.k, gains.K, gains.M, float(alpha), dtheta,
            model.params.speed, float(bounds.u_min), float(bounds.u_max), model.params.integrator == RK4,
        )
        return AgentTrajectory(states, controls, t_new)
    states = np.empty_like(traj.states)
    controls = np.empty_like(traj.controls)
    states[0] = traj.states[0]
    for i in range(traj.n_steps):
        du = alpha * gains.k[i] + gains.K[i] @ (states[i] - traj.states[i]) + gains.M[i] * dtheta
        controls[i] = np.clip(traj.controls[i] + du, bounds.u_min, bounds.u_max)
        states[i + 1] = model.step(states[i], controls[i], t_new)
    return AgentTrajectory(states, controls, t_new)


def _backward_with_ladder(traj, weights, aug, model, reg, opts, bounds):
    reg = max(reg, 0.0)
    while True:
        try:
            return backward_pass(traj, weights, aug, model, reg, opts.alpha_l, opts.freeze_theta, bounds,
                                 opts.second_order)
        except SolverFailure:
            if reg >= REG_MAX:
                raise
            reg = REG_MIN if reg < REG_MIN else reg * 10.0


def solve_local(model, init_traj: AgentTrajectory, weights: CostWeights, aug: AugmentedTerms | None = None,
                bounds: Bounds = Bounds(), opts: PDDPOptions = PDDPOptions(), reg: float = 0.0) -> LocalResult:
    """Iterate backward/forward sweeps until the cost change is small or `max_inner` is hit.

    A step that would raise the cost is rejected; the regularization is
    then increased (and, with ``line_search``, the step halved first).
    The returned trajectory is always the best accepted iterate.
    """
    traj = init_traj
    cost = local_cost(traj, weights, aug)
    costs = [cost]
    converged = False
    iterations = 0
    while iterations < opts.max_inner:
        iterations += 1
        gains = _backward_with_ladder(traj, weights, aug, model, reg, opts, bounds)
        reg = gains.reg
        accepted = None
        alpha = opts.alpha_l
        while True:
            cand = forward_pass(traj, gains, model, bounds, alpha)
            cand_cost = local_cost(cand, weights, aug)
            if cand_cost <= cost:
                accepted = cand
                break
            if opts.line_search and alpha * 0.5 >= opts.alpha_floor:
                alpha *= 0.5
                continue
            break
        if accepted is None:
            if reg >= REG_MAX:
                log.debug("no descent at maximum regularization; stopping")
                converged = True
                break
            reg = REG_MIN if reg < REG_MIN else reg * 10.0
            continue
        delta = cost - cand_cost
        traj, cost = accepted, cand_cost
        costs.append(cost)
        reg = 0.0 if reg <= REG_MIN else reg / 10.0
        if delta < opts.epsilon_rel * (1.0 + abs(cost)):
            converged = True
            break
    return LocalResult(traj, cost, iterations, converged, reg, costs)
