import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import qp_by_enumeration
from swarm_pddp.qp import (
    DegenerateLinearization, HalfPlane, QPInfeasible, TimeSequenceSpec, keepin_row, linearize_keepout, obstacle_row,
    project_box, separation_row, solve_qp, solve_qp_elastic, solve_state_safe, solve_time_safe,
)


def _state_objective(stack, own, rho, target, mu):
    return 0.5 * rho * np.sum((stack[0] - own) ** 2) + 0.5 * mu * np.sum((stack - target) ** 2)


def random_state_instance(rng):
    """Random feasible state-safe instance: <=3 blocks of 2-D points, <=4 constraints."""
    n_blocks = int(rng.integers(1, 4))
    rho, mu = rng.uniform(0.5, 5.0, 2)
    own = rng.normal(0, 10, 2)
    stack = rng.normal(0, 10, (n_blocks, 2))
    anchor = rng.normal(0, 10, (n_blocks, 2))  # strictly feasible point by construction
    cons = []
    for _ in range(int(rng.integers(1, 5))):
        kind = rng.integers(0, 3) if n_blocks > 1 else 0
        normal = rng.normal(size=2)
        normal /= np.linalg.norm(normal)
        if kind == 0:
            b = int(rng.integers(0, n_blocks))
            cons.append(obstacle_row(n_blocks, 2, b, HalfPlane(normal, normal @ anchor[b] - rng.uniform(0.1, 5))))
        else:
            i, j = rng.choice(n_blocks, 2, replace=False)
            d = normal @ (anchor[i] - anchor[j])
            if kind == 1:
                cons.append(separation_row(n_blocks, 2, i, j, normal, d - rng.uniform(0.1, 5)))
            else:
                cons.append(keepin_row(n_blocks, 2, i, j, normal, d + rng.uniform(0.1, 5)))
    return own, rho, stack, mu, cons


def test_state_safe_matches_enumeration_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        own, rho, stack, mu, cons = random_state_instance(rng)
        new, res = solve_state_safe(own, rho, stack, mu, cons)
        assert res.feasible
        for c in cons:
            assert np.sum(c.coeffs * new) >= c.lower - 1e-8
        n = stack.size
        weights = np.full(stack.shape, mu)
        weights[0] += rho
        tgt = stack.copy()
        tgt[0] = (rho * own + mu * stack[0]) / (rho + mu)
        p = np.diag(weights.ravel())
        q = -(weights * tgt).ravel()
        g = np.array([c.coeffs.ravel() for c in cons])
        h = np.array([c.lower for c in cons])
        ref = qp_by_enumeration(p, q, g, h)
        assert 0.5 * new.ravel() @ p @ new.ravel() + q @ new.ravel() == pytest.approx(ref, abs=1e-6)
        assert n == new.size


def random_time_instance(rng):
    nb = int(rng.integers(2, 4))
    own = rng.uniform(8, 11)
    stack = rng.uniform(8, 11, nb)
    sigma, gamma = rng.uniform(0.5, 5.0, 2)
    rows = min(nb - 1, int(rng.integers(1, 4)))
    a = np.zeros((rows, nb))
    for r in range(rows):
        a[r, 0], a[r, r + 1] = 1.0, -1.0
    delta = rng.uniform(-0.3, 0.3, rows)
    relax = rng.choice([0.0, 0.01, 0.05])
    return own, sigma, stack, gamma, TimeSequenceSpec(a, delta, relax), (0.1, 20.0)


def test_time_safe_matches_enumeration_oracle():
    rng = np.random.default_rng(7)
    for _ in range(500):
        own, sigma, stack, gamma, spec, bounds = random_time_instance(rng)
        tt, res = solve_time_safe(own, sigma, stack, gamma, spec, bounds)
        assert res.feasible
        nb = stack.size
        w = np.full(nb, gamma)
        w[0] += sigma
        tgt = stack.copy()
        tgt[0] = (sigma * own + gamma * stack[0]) / (sigma + gamma)
        p, q = np.diag(w), -w * tgt
        e0 = np.eye(nb)[0]
        g = [e0, -e0]
        h = [bounds[0], -bounds[1]]
        a_eq = b_eq = None
        if spec.relax[0] == 0:
            a_eq, b_eq = spec.matrix_a, spec.t_delta
        else:
            for row, d, r in zip(spec.matrix_a, spec.t_delta, spec.relax):
                g += [row, -row]
                h += [d - r, -(d + r)]
        ref = qp_by_enumeration(p, q, np.array(g), np.array(h), a_eq, b_eq)
        assert 0.5 * tt @ p @ tt + q @ tt == pytest.approx(ref, abs=1e-6)
        assert np.all(np.abs(spec.matrix_a @ tt - spec.t_delta) <= spec.relax + 1e-9)


def test_unconstrained_state_safe_is_weighted_average():
    new, res = solve_state_safe([1.0, 1.0], 3.0, [[5.0, 5.0], [2.0, 0.0]], 1.0)
    assert res is None
    np.testing.assert_allclose(new, [[2.0, 2.0], [2.0, 0.0]])


def test_single_active_plane_is_projection():
    # equal weights: the result is the Euclidean projection of the unconstrained optimum
    plane = HalfPlane(np.array([1.0, 0.0]), 3.0)
    new, _ = solve_state_safe([0.0, 1.0], 1.0, [[0.0, 1.0]], 1.0, [obstacle_row(1, 2, 0, plane)])
    np.testing.assert_allclose(new, [[3.0, 1.0]], atol=1e-12)


def test_linearize_keepout_supports_the_disc():
    plane = linearize_keepout([50.0, 0.0], [0.0, 0.0], 30.0)
    np.testing.assert_allclose(plane.normal, [1.0, 0.0])
    assert plane.margin([30.0, 0.0]) == pytest.approx(0.0)
    assert plane.margin([50.0, 0.0]) == pytest.approx(20.0)
    with pytest.raises(DegenerateLinearization):
        linearize_keepout([1.0, 1.0], [1.0, 1.0], 5.0)


@settings(max_examples=200)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.5, 20), st.floats(0, 2 * np.pi))
def test_keepout_halfplane_is_inner_approximation(cx, cy, r, ang):
    # every point satisfying the linearized constraint lies outside the disc
    nominal = np.array([cx, cy]) + (r + 5.0) * np.array([np.cos(ang), np.sin(ang)])
    plane = linearize_keepout(nominal, [cx, cy], r)
    rng = np.random.default_rng(0)
    pts = nominal + rng.normal(0, 3 * r, (200, 2))
    inside_plane = pts[pts @ plane.normal >= plane.offset]
    assert np.all(np.hypot(*(inside_plane - [cx, cy]).T) >= r - 1e-9)


def test_halfplane_requires_unit_normal():
    with pytest.raises(ValueError):
        HalfPlane(np.array([2.0, 0.0]), 1.0)


def test_project_box():
    np.testing.assert_allclose(project_box([-2.0, 0.1, 3.0], -1.0, 1.0), [-1.0, 0.1, 1.0])


def test_infeasible_qp_raises_and_elastic_fallback_flags():
    p, q = np.eye(1), np.zeros(1)
    g, h = np.array([[1.0], [-1.0]]), np.array([1.0, 0.0])  # x >= 1 and x <= 0
    with pytest.raises(QPInfeasible):
        solve_qp(p, q, g, h)
    res = solve_qp_elastic(p, q, g, h)
    assert not res.feasible
    assert -0.01 < res.x[0] < 1.01


def test_equality_constrained_time_stack():
    spec = TimeSequenceSpec(np.array([[1.0, -1.0]]), np.array([0.0]), 0.0)
    tt, res = solve_time_safe(9.0, 1.0, [9.0, 10.0], 1.0, spec, (0.1, 20.0))
    assert res.feasible
    assert tt[0] == pytest.approx(tt[1])


def test_time_spec_validation():
    with pytest.raises(ValueError):
        TimeSequenceSpec(np.array([[1.0, 1.0]]), np.array([0.1]), 0.0)
    with pytest.raises(ValueError):
        TimeSequenceSpec(np.array([[1.0, -1.0]]), np.array([0.1, 0.2]), 0.0)
    with pytest.raises(ValueError):
        TimeSequenceSpec(np.array([[1.0, -1.0]]), np.array([0.1]), -0.1)


@pytest.mark.parametrize("scale", [1e-6, 1.0, 1e12])
def test_solution_is_invariant_to_objective_scale(scale):
    # adaptive penalties can make the time-safe QP huge; the active set must not care
    p = np.diag([2.0, 1.0, 1.0])
    q = -np.array([18.0, 9.1, 9.2])
    g = np.array([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [1.0, 0.0, -1.0], [-1.0, 0.0, 1.0]])
    h = np.array([-0.11, 0.09, -0.21, 0.19])
    ref = solve_qp(p, q, g, h)
    res = solve_qp(scale * p, scale * q, g, h)
    np.testing.assert_allclose(res.x, ref.x, rtol=1e-10)
    np.testing.assert_allclose(res.multipliers, scale * ref.multipliers, rtol=1e-8)
