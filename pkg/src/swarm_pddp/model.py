"""Fixed-speed unicycle kinematics on a normalized time grid.

The final time ``t_final`` is a free parameter, so the dynamics are
integrated over the normalized interval [0, 1] split into ``n_steps``
pieces: one step advances physical time by ``t_final / n_steps``.

    x' = V cos(heading)
    y' = V sin(heading)
    heading' = omega
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._kernels import unicycle_forward, unicycle_step

EULER = "euler"
RK4 = "rk4"


class NumericDomainError(ValueError):
    """Raised when a dynamics call receives non-finite or out-of-domain input."""


class AgentState(NamedTuple):
    x: float  # [m] east
    y: float  # [m] north
    heading: float  # [rad], unwrapped

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading], dtype=float)


@dataclass(frozen=True)
class DynamicsParams:
    speed: float = 30.0  # [m/s]
    omega_max: float = 0.5768  # [rad/s]
    n_steps: int = 100
    integrator: str = EULER

    def __post_init__(self) -> None:
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if not self.omega_max > 0:
            raise ValueError("omega_max must be positive")
        if self.n_steps < 2:
            raise ValueError("n_steps must be at least 2")
        if self.integrator not in (EULER, RK4):
            raise ValueError(f"unknown integrator {self.integrator!r}")


@dataclass
class AgentTrajectory:
    """States (N+1, n), controls (N, m) and the final time of one agent."""

    states: np.ndarray
    controls: np.ndarray
    t_final: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim == 1:
            self.controls = self.controls[:, None]
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError(
                f"states has {self.states.shape[0]} rows, expected {self.controls.shape[0] + 1}"
            )
        self.t_final = float(self.t_final)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_final, self.n_steps + 1)

    def copy(self) -> "AgentTrajectory":
        return AgentTrajectory(self.states.copy(), self.controls.copy(), self.t_final, dict(self.meta))


def _check_finite(*values) -> None:
    for v in values:
        if not np.all(np.isfinite(v)):
            raise NumericDomainError(f"non-finite input: {v!r}")


class Unicycle:
    """Constant-speed unicycle with turn-rate control and free final time."""

    n_state = 3
    n_control = 1

    def __init__(self, params: DynamicsParams | None = None):
        self.params = params or DynamicsParams()

    @property
    def n_steps(self) -> int:
        return self.params.n_steps

    def step(self, state, control, t_final: float) -> np.ndarray:
        """Advance one normalized step of length 1/N."""
        state = np.asarray(state, dtype=float)
        omega = float(np.asarray(control, dtype=float).reshape(-1)[0])
        _check_finite(state, omega, t_final)
        if t_final <= 0:
            raise NumericDomainError(f"t_final must be positive, got {t_final}")
        h = t_final / self.params.n_steps
        out = unicycle_step(
            state[0], state[1], state[2], omega, h, self.params.speed, self.params.integrator == RK4
        )
        return np.array(out)

    def jacobians(self, state, control, t_final: float):
        """Partials of `step` w.r.t. state (3x3), control (3x1) and t_final (3,)."""
        fx, fu, ft = self.linearize(
            np.asarray(state, dtype=float)[None, :],
            np.asarray(control, dtype=float).reshape(1, -1),
            t_final,
        )
        return fx[0], fu[0], ft[0]

    def linearize(self, states: np.ndarray, controls: np.ndarray, t_final: float):
        """Jacobians along a trajectory; `states` may carry the extra terminal row."""
        _check_finite(states, controls, t_final)
        n = controls.shape[0]
        heading = states[:n, 2]
        omega = controls[:, 0]
        v = self.params.speed
        big_n = self.params.n_steps
        h = t_final / big_n
        if self.params.integrator == EULER:
            c, s = np.cos(heading), np.sin(heading)
            fx = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            fx[:, 0, 2] = -h * v * s
            fx[:, 1, 2] = h * v * c
            fu = np.zeros((n, 3, 1))
            fu[:, 2, 0] = h
            ft = np.stack([v * c, v * s, omega], axis=1) / big_n
            return fx, fu, ft
        fx = np.empty((n, 3, 3))
        fu = np.empty((n, 3, 1))
        ft = np.empty((n, 3))
        for k in range(n):
            tangent = _rk4_tangent(heading[k], omega[k], h, v, big_n)
            fx[k] = tangent[:, :3]
            fu[k, :, 0] = tangent[:, 3]
            ft[k] = tangent[:, 4]
        return fx, fu, ft

    def hessians(self, states: np.ndarray, controls: np.ndarray, t_final: float) -> np.ndarray:
        """Second derivatives of each step output, shape (N, 3, 5, 5).

        The joint variable is (x, y, heading, omega, t_final).  Euler steps
        are differentiated analytically; RK4 steps use central differences
        of the analytic Jacobians (only heading, omega and t_final enter).
        """
        n = controls.shape[0]
        heading = states[:n, 2]
        v = self.params.speed
        big_n = self.params.n_steps
        out = np.zeros((n, 3, 5, 5))
        if self.params.integrator == EULER:
            h = t_final / big_n
            c, s = np.cos(heading), np.sin(heading)
            out[:, 0, 2, 2] = -h * v * c
            out[:, 1, 2, 2] = -h * v * s
            out[:, 0, 2, 4] = out[:, 0, 4, 2] = -v * s / big_n
            out[:, 1, 2, 4] = out[:, 1, 4, 2] = v * c / big_n
            out[:, 2, 3, 4] = out[:, 2, 4, 3] = 1.0 / big_n
            return out

        def joint(st, ct, tf):
            fx, fu, ft = self.linearize(st, ct, tf)
            return np.concatenate([fx, fu, ft[:, :, None]], axis=2)  # (n, 3, 5)

        eps = 1e-6
        for col in (2, 3, 4):
            st, ct, tf = [states.copy(), states.copy()], [controls.copy(), controls.copy()], [t_final, t_final]
            for sign, idx in ((1.0, 0), (-1.0, 1)):
                if col == 2:
                    st[idx][:n, 2] += sign * eps
                elif col == 3:
                    ct[idx][:, 0] += sign * eps
                else:
                    tf[idx] = t_final + sign * eps
            out[:, :, :, col] = (joint(st[0], ct[0], tf[0]) - joint(st[1], ct[1], tf[1])) / (2 * eps)
        return 0.5 * (out + np.swapaxes(out, 2, 3))

    def rollout(self, x0, controls, t_final: float) -> AgentTrajectory:
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 1:
            controls = controls[:, None]
        if controls.shape[0] != self.params.n_steps:
            raise ValueError(f"expected {self.params.n_steps} controls, got {controls.shape[0]}")
        x0 = np.asarray(x0, dtype=float)
        _check_finite(x0, controls, t_final)
        if t_final <= 0:
            raise NumericDomainError(f"t_final must be positive, got {t_final}")
        big_n = controls.shape[0]
        states = np.zeros((big_n + 1, 3))
        states[0] = x0
        # Zero gains and an open box turn the closed-loop kernel into a plain rollout.
        states, controls = unicycle_forward(
            states, controls.copy(), float(t_final),
            np.zeros((big_n, 1)), np.zeros((big_n, 1, 3)), np.zeros((big_n, 1)),
            0.0, 0.0, self.params.speed, -np.inf, np.inf, self.params.integrator == RK4,
        )
        return AgentTrajectory(states, controls, t_final)


def _rk4_tangent(heading: float, omega: float, h: float, v: float, big_n: int) -> np.ndarray:
    # Forward-mode derivative of one RK4 step; columns are (x, y, heading, omega, t_final).
    def rates(hd):
        return np.array([v * math.cos(hd), v * math.sin(hd), omega])

    def jac(hd):
        a = np.zeros((3, 3))
        a[0, 2] = -v * math.sin(hd)
        a[1, 2] = v * math.cos(hd)
        return a

    b = np.array([0.0, 0.0, 1.0])
    d_state = np.zeros((3, 5))
    d_state[:, :3] = np.eye(3)
    d_u = np.zeros(5)
    d_u[3] = 1.0
    d_h = np.zeros(5)
    d_h[4] = 1.0 / big_n

    k1 = rates(heading)
    dk1 = jac(heading) @ d_state + np.outer(b, d_u)
    hd2 = heading + 0.5 * h * k1[2]
    dx2 = d_state + 0.5 * np.outer(k1, d_h) + 0.5 * h * dk1
    k2 = rates(hd2)
    dk2 = jac(hd2) @ dx2 + np.outer(b, d_u)
    hd3 = heading + 0.5 * h * k2[2]
    dx3 = d_state + 0.5 * np.outer(k2, d_h) + 0.5 * h * dk2
    k3 = rates(hd3)
    dk3 = jac(hd3) @ dx3 + np.outer(b, d_u)
    hd4 = heading + h * k3[2]
    dx4 = d_state + np.outer(k3, d_h) + h * dk3
    k4 = rates(hd4)
    dk4 = jac(hd4) @ dx4 + np.outer(b, d_u)
    ksum = k1 + 2 * k2 + 2 * k3 + k4
    dksum = dk1 + 2 * dk2 + 2 * dk3 + dk4
    return d_state + np.outer(ksum, d_h) / 6.0 + h / 6.0 * dksum


class LinearDynamics:
    """x_{k+1} = A x_k + B u_k + c, independent of the final time.

    Used for linear-quadratic checks of the trajectory optimizer.
    """

    def __init__(self, a, b, n_steps: int, c=None):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.zeros(self.a.shape[0]) if c is None else np.asarray(c, dtype=float)
        self.n_state = self.a.shape[0]
        self.n_control = self.b.shape[1]
        self._n_steps = n_steps

    @property
    def n_steps(self) -> int:
        return self._n_steps

    def step(self, state, control, t_final: float) -> np.ndarray:
        return self.a @ np.asarray(state, dtype=float) + self.b @ np.atleast_1d(control) + self.c

    def linearize(self, states, controls, t_final):
        n = controls.shape[0]
        fx = np.broadcast_to(self.a, (n,) + self.a.shape).copy()
        fu = np.broadcast_to(self.b, (n,) + self.b.shape).copy()
        return fx, fu, np.zeros((n, self.n_state))

    def hessians(self, states, controls, t_final):
        nz = self.n_state + self.n_control + 1
        return np.zeros((controls.shape[0], self.n_state, nz, nz))

    def rollout(self, x0, controls, t_final: float) -> AgentTrajectory:
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 1:
            controls = controls[:, None]
        states = np.empty((controls.shape[0] + 1, self.n_state))
        states[0] = x0
        for k in range(controls.shape[0]):
            states[k + 1] = self.step(states[k], controls[k], t_final)
        return AgentTrajectory(states, controls, t_final)


def step(state, control, t_final: float, params: DynamicsParams) -> np.ndarray:
    return Unicycle(params).step(state, control, t_final)


def jacobians(state, control, t_final: float, params: DynamicsParams):
    return Unicycle(params).jacobians(state, control, t_final)


def rollout(x0, controls, t_final: float, params: DynamicsParams) -> AgentTrajectory:
    return Unicycle(params).rollout(x0, controls, t_final)
