"""Projections and a small dense QP solver for the safe-copy subproblems.

The QPs solved here are tiny (a few position blocks at one time instant,
or one time stack per agent), so the solver favours clarity over speed:
a Goldfarb-Idnani dual active-set method that starts from the
unconstrained minimizer and adds violated constraints one at a time,
recomputing the small projected systems directly at every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FEAS_TOL = 1e-10
ELASTIC_WEIGHT = 1e6


class DegenerateLinearization(ValueError):
    """The nominal point coincides with the constraint center, so no normal is defined."""


class QPInfeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class HalfPlane:
    """Constraint ``normal . p >= offset`` in the plane."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        if abs(np.linalg.norm(normal) - 1.0) > 1e-12:
            raise ValueError("half-plane normal must be a unit vector")
        object.__setattr__(self, "normal", normal)

    def margin(self, p) -> float:
        return float(self.normal @ np.asarray(p, dtype=float) - self.offset)


@dataclass(frozen=True)
class TimeSequenceSpec:
    """Rows ``t_self - t_neighbor`` with targets ``t_delta`` and tolerance ``relax``.

    ``matrix_a`` acts on the agent's time stack (self first).
    """

    matrix_a: np.ndarray
    t_delta: np.ndarray
    relax: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix_a, dtype=float))
        delta = np.asarray(self.t_delta, dtype=float).reshape(-1)
        relax = np.broadcast_to(np.asarray(self.relax, dtype=float), delta.shape).copy()
        if a.shape[0] != delta.shape[0]:
            raise ValueError("one t_delta entry per row of matrix_a is required")
        if np.any(np.abs(a.sum(axis=1)) > 0):
            raise ValueError("every row of matrix_a must sum to zero")
        if np.any(relax < 0):
            raise ValueError("relax must be non-negative")
        object.__setattr__(self, "matrix_a", a)
        object.__setattr__(self, "t_delta", delta)
        object.__setattr__(self, "relax", relax)


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    active: list = field(default_factory=list)
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feasible: bool = True
    iterations: int = 0


def linearize_keepout(p_nominal, center, radius: float) -> HalfPlane:
    """Supporting half-plane of the disc around `center`, facing `p_nominal`."""
    p_nominal = np.asarray(p_nominal, dtype=float)
    center = np.asarray(center, dtype=float)
    diff = p_nominal - center
    dist = float(np.hypot(diff[0], diff[1]))
    if dist == 0.0:
        raise DegenerateLinearization("nominal point coincides with the keep-out center")
    normal = diff / dist
    return HalfPlane(normal, float(radius + normal @ center))


def project_box(v, lo, hi) -> np.ndarray:
    """Clamp `v` to [lo, hi]; the exact minimizer of a separable quadratic over a box."""
    return np.minimum(np.maximum(np.asarray(v, dtype=float), lo), hi)


def solve_qp(p, q, g=None, h=None, a_eq=None, b_eq=None, max_iter: int = 200) -> QPResult:
    """Minimize ``0.5 x'Px + q'x`` s.t. ``G x >= h`` and ``A x = b``.

    Goldfarb-Idnani dual active-set method.  Equalities enter the working
    set first and are never dropped.  Raises :class:`QPInfeasible` when
    the constraints admit no solution.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    nvar = q.shape[0]
    g = np.zeros((0, nvar)) if g is None else np.atleast_2d(np.asarray(g, dtype=float))
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
    a_eq = np.zeros((0, nvar)) if a_eq is None else np.atleast_2d(np.asarray(a_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)

    # the degeneracy tests below are absolute, so work with P scaled to unit size
    # (adaptive penalties can push P to 1e12); x is unchanged, multipliers scale back
    p_scale = float(np.abs(np.diag(p)).max()) if nvar else 1.0
    p_scale = p_scale if p_scale > 0.0 else 1.0
    p_inv = np.linalg.inv(p / p_scale)
    x = -p_inv @ (q / p_scale)
    normals: list[np.ndarray] = []
    keys: list[tuple] = []  # ("eq", i) or ("in", i)
    mult: list[float] = []
    iterations = 0

    def directions(n_p):
        if not normals:
            return p_inv @ n_p, np.zeros(0)
        nmat = np.column_stack(normals)
        pn = p_inv @ nmat
        r = np.linalg.lstsq(nmat.T @ pn, pn.T @ n_p, rcond=None)[0]
        z = p_inv @ n_p - pn @ r
        return z, r

    def add(n_p, slack_fn, key):
        # Drive the constraint with normal n_p to zero slack (slack_fn(x) < 0 initially).
        nonlocal x, iterations
        u_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                raise QPInfeasible("active-set iteration limit reached")
            z, r = directions(n_p)
            t1, drop = np.inf, -1
            for j, (kj, rj) in enumerate(zip(keys, r)):
                if kj[0] == "in" and rj > 1e-12:
                    ratio = mult[j] / rj
                    if ratio < t1:
                        t1, drop = ratio, j
            zn = float(z @ n_p)
            scale = 1.0 + float(np.abs(n_p).max())
            t2 = -slack_fn(x) / zn if np.linalg.norm(z) > 1e-12 * scale and zn > 1e-14 else np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise QPInfeasible(f"constraint {key} cannot be satisfied")
            t = min(t1, t2)
            if np.isfinite(t2):
                x = x + t * z
            for j in range(len(mult)):
                mult[j] -= t * r[j]
            u_p += t
            if t2 <= t1:
                normals.append(n_p)
                keys.append(key)
                mult.append(u_p)
                return
            normals.pop(drop)
            keys.pop(drop)
            mult.pop(drop)

    for i in range(a_eq.shape[0]):
        res = float(a_eq[i] @ x - b_eq[i])
        sign = -1.0 if res > 0 else 1.0
        n_p = sign * a_eq[i]
        z, _ = directions(n_p)
        if np.linalg.norm(z) <= 1e-12 * (1.0 + np.abs(n_p).max()):
            if abs(res) <= FEAS_TOL * (1.0 + abs(b_eq[i])):
                continue  # redundant equality
            raise QPInfeasible(f"equality {i} is inconsistent with the others")
        if res == 0.0:
            normals.append(n_p)
            keys.append(("eq", i))
            mult.append(0.0)
            continue
        off = sign * b_eq[i]
        add(n_p, lambda xx, n_p=n_p, off=off: float(n_p @ xx - off), ("eq", i))

    while True:
        active_in = {k[1] for k in keys if k[0] == "in"}
        slack = g @ x - h
        worst, worst_val = -1, 0.0
        for j in range(g.shape[0]):
            if j in active_in:
                continue
            tol = FEAS_TOL * (1.0 + abs(h[j]))
            if slack[j] < -tol and slack[j] < worst_val:
                worst, worst_val = j, slack[j]
        if worst < 0:
            break
        add(g[worst], lambda xx, j=worst: float(g[j] @ xx - h[j]), ("in", worst))

    obj = float(0.5 * x @ p @ x + q @ x)
    return QPResult(x, obj, list(keys), p_scale * np.array(mult), True, iterations)


def solve_qp_elastic(p, q, g=None, h=None, a_eq=None, b_eq=None) -> QPResult:
    """`solve_qp`, falling back to the least-violation point when infeasible.

    The fallback softens every constraint with a slack carrying a large
    quadratic weight, so the result trades a little objective for the
    smallest achievable violation.  ``feasible`` is False in that case.
    """
    try:
        return solve_qp(p, q, g, h, a_eq, b_eq)
    except QPInfeasible as exc:
        log.debug("QP infeasible (%s); using least-violation fallback", exc)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    nvar = q.shape[0]
    g = np.zeros((0, nvar)) if g is None else np.atleast_2d(np.asarray(g, dtype=float))
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float).reshape(-1)
    a_eq = np.zeros((0, nvar)) if a_eq is None else np.atleast_2d(np.asarray(a_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    # rewrite equalities as two inequalities, then give every row its own slack
    rows = np.vstack([g, a_eq, -a_eq])
    rhs = np.concatenate([h, b_eq, -b_eq])
    n_s = rows.shape[0]
    weight = ELASTIC_WEIGHT * max(1.0, float(np.abs(np.diag(p)).max()))
    big_p = np.zeros((nvar + n_s, nvar + n_s))
    big_p[:nvar, :nvar] = p
    big_p[nvar:, nvar:] = weight * np.eye(n_s)
    big_q = np.concatenate([q, np.zeros(n_s)])
    big_g = np.zeros((2 * n_s, nvar + n_s))
    big_g[:n_s, :nvar] = rows
    big_g[:n_s, nvar:] = np.eye(n_s)
    big_g[n_s:, nvar:] = np.eye(n_s)
    big_h = np.concatenate([rhs, np.zeros(n_s)])
    res = solve_qp(big_p, big_q, big_g, big_h)
    x = res.x[:nvar]
    return QPResult(x, float(0.5 * x @ p @ x + q @ x), res.active, res.multipliers, False, res.iterations)


# ---------------------------------------------------------------------------
# Step-2 subproblems


@dataclass(frozen=True)
class BlockConstraint:
    """Linear constraint ``sum_b coeffs[b] . p_b >= lower`` over a stack of blocks."""

    coeffs: np.ndarray  # (n_blocks, dim)
    lower: float
    kind: str = ""


def obstacle_row(n_blocks: int, dim: int, block: int, plane: HalfPlane) -> BlockConstraint:
    coeffs = np.zeros((n_blocks, dim))
    coeffs[block, :2] = plane.normal
    return BlockConstraint(coeffs, plane.offset, "obstacle")


def separation_row(n_blocks: int, dim: int, i: int, j: int, normal, distance: float) -> BlockConstraint:
    """normal . (p_i - p_j) >= distance."""
    coeffs = np.zeros((n_blocks, dim))
    coeffs[i, :2] = normal
    coeffs[j, :2] = -np.asarray(normal)
    return BlockConstraint(coeffs, distance, "collision")


def keepin_row(n_blocks: int, dim: int, i: int, j: int, normal, distance: float) -> BlockConstraint:
    """normal . (p_i - p_j) <= distance."""
    coeffs = np.zeros((n_blocks, dim))
    coeffs[i, :2] = -np.asarray(normal)
    coeffs[j, :2] = normal
    return BlockConstraint(coeffs, -distance, "comm")


def state_safe_unconstrained(own_point, rho, stack_points, mu) -> np.ndarray:
    """Closed-form minimizer without constraints (works on trailing axes)."""
    out = np.array(stack_points, dtype=float, copy=True)
    out[..., 0, :] = (rho * np.asarray(own_point) + mu * out[..., 0, :]) / (rho + mu)
    return out


def solve_state_safe(own_point, rho: float, stack_points, mu: float, constraints=()) -> tuple[np.ndarray, QPResult | None]:
    """Minimize rho/2|p_own - own_point|^2 + mu/2|P - stack_points|^2 over the block stack P.

    `own_point` is x_i + lambda_i/rho, `stack_points` is z^a - y/mu with
    the agent's own block first.  Returns the new stack and the QP result
    (None when no constraint was given).
    """
    stack_points = np.asarray(stack_points, dtype=float)
    n_blocks, dim = stack_points.shape
    if not constraints:
        return state_safe_unconstrained(own_point, rho, stack_points, mu), None
    weights = np.full((n_blocks, dim), mu)
    weights[0] += rho
    target = state_safe_unconstrained(own_point, rho, stack_points, mu)
    p = np.diag(weights.reshape(-1))
    q = -(weights * target).reshape(-1)
    g = np.array([c.coeffs.reshape(-1) for c in constraints])
    h = np.array([c.lower for c in constraints])
    res = solve_qp_elastic(p, q, g, h)
    return res.x.reshape(n_blocks, dim), res


def solve_time_safe(own_value: float, sigma: float, stack_values, gamma: float,
                    seq: TimeSequenceSpec | None, bounds) -> tuple[np.ndarray, QPResult]:
    """Time-stack update: box on the own entry plus the relaxed sequence rows."""
    stack_values = np.asarray(stack_values, dtype=float).reshape(-1)
    nb = stack_values.shape[0]
    weights = np.full(nb, gamma)
    weights[0] += sigma
    target = stack_values.copy()
    target[0] = (sigma * own_value + gamma * stack_values[0]) / (sigma + gamma)
    p = np.diag(weights)
    q = -weights * target
    rows, rhs, eq_rows, eq_rhs = [], [], [], []
    e0 = np.zeros(nb)
    e0[0] = 1.0
    rows += [e0, -e0]
    rhs += [bounds[0], -bounds[1]]
    if seq is not None:
        for a_row, delta, relax in zip(seq.matrix_a, seq.t_delta, seq.relax):
            if relax == 0.0:
                eq_rows.append(a_row)
                eq_rhs.append(delta)
            else:
                rows += [a_row, -a_row]
                rhs += [delta - relax, -(delta + relax)]
    res = solve_qp_elastic(
        p, q, np.array(rows), np.array(rhs),
        np.array(eq_rows) if eq_rows else None, np.array(eq_rhs) if eq_rhs else None,
    )
    return res.x, res
