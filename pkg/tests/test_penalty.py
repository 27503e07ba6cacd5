import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swarm_pddp.penalty import (
    FAMILIES, ApParams, FixedPenalty, NesterovRestart, ResidualBalancing, SpectralAdaptive, clamp_update,
    correlation, four_case, intermediate_dual, make_scheme, spectral_alpha,
)


def fake_agent(index=0, pen=1.0, n=4):
    z = lambda *shape: np.zeros(shape)  # noqa: E731
    return SimpleNamespace(
        index=index, U=z(n, 1), ut=z(n, 1), zeta=z(n, 1), X=z(n + 1, 3), xt=z(2, n + 1, 3), lam=z(n + 1, 3),
        za=z(2, n + 1, 3), y=z(2, n + 1, 3), t=9.0, tt=np.array([9.0, 9.0]), nu=0.0, sa=np.array([9.0, 9.0]),
        eta=z(2), pen={f: pen for f in FAMILIES},
    )


def test_intermediate_dual_definition():
    prev, cur = fake_agent(pen=2.0), fake_agent(pen=2.0)
    cur.X[:] = 0.05
    lam_hat = intermediate_dual(prev, cur, "rho")
    np.testing.assert_allclose(lam_hat, 0.1)
    cur.X[:] = prev.xt[0]
    np.testing.assert_allclose(intermediate_dual(prev, cur, "rho"), prev.lam)


def test_spectral_alpha_perfect_linear_model():
    rng = np.random.default_rng(1)
    d_hat = rng.normal(size=20)
    for c in (0.1, 1.0, 7.0):
        hybrid, sd, mg = spectral_alpha(c * d_hat, d_hat)
        assert hybrid == pytest.approx(1 / c, rel=1e-12)
        assert sd == pytest.approx(mg)


def test_spectral_alpha_quadratic_toy():
    # dual gradient of a quadratic toy: x(lambda) = a * lambda + const, exactly linear
    rng = np.random.default_rng(5)
    a = 0.37
    lam = rng.normal(size=(2, 30))
    x = a * lam + 1.5
    hybrid, _, _ = spectral_alpha(x[1] - x[0], lam[1] - lam[0])
    assert abs(hybrid - 1 / a) <= 1e-9


def test_spectral_alpha_invalid_for_orthogonal_or_negative():
    assert spectral_alpha(np.array([1.0, 0.0]), np.array([0.0, 1.0])) is None
    assert spectral_alpha(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) is None
    assert correlation(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_correlation_matches_direct_formula(a, b):
    a, b = np.array(a), np.array(b)
    c = correlation(a, b)
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        assert c == 0.0
    else:
        assert c == pytest.approx(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), abs=1e-12)
    assert -1 - 1e-12 <= c <= 1 + 1e-12


def test_correlation_parallel_and_antiparallel():
    v = np.array([1.0, 2.0, 3.0])
    assert correlation(v, 2 * v) == pytest.approx(1.0)
    assert correlation(v, -v) == pytest.approx(-1.0)


def test_four_case_rule():
    assert four_case(4.0, 1.0, 0.9, 0.9, 7.0, 0.5) == pytest.approx(2.0)
    assert four_case(4.0, 1.0, 0.9, 0.1, 7.0, 0.5) == 4.0
    assert four_case(4.0, 1.0, 0.1, 0.9, 7.0, 0.5) == 1.0
    assert four_case(4.0, 1.0, 0.5, 0.5, 7.0, 0.5) == 7.0
    assert four_case(None, None, 0.9, 0.9, 7.0, 0.5) == 7.0


def test_clamp_bound():
    assert clamp_update(100.0, 1.0, 10, 500.0) == pytest.approx(6.0)
    assert clamp_update(0.01, 1.0, 10, 500.0) == pytest.approx(1 / 6.0)
    assert clamp_update(1.5, 1.0, 10, 500.0) == 1.5


@given(st.floats(1e-6, 1e6), st.floats(1e-3, 1e3), st.integers(1, 1000))
def test_clamp_log_bound_property(proposed, current, n):
    new = clamp_update(proposed, current, n, 500.0)
    assert abs(math.log(new / current)) <= math.log(1 + 500.0 / n ** 2) + 1e-12


def test_ap_params_validation():
    with pytest.raises(ValueError):
        ApParams(eps_cor=1.5)
    with pytest.raises(ValueError):
        ApParams(c_cg=0)
    with pytest.raises(ValueError):
        ApParams(freq=0)


def synthetic_ap_rounds(a, b, rounds=4, pen0=1.0, seed=0):
    """Run SpectralAdaptive on a synthetic agent whose rho-family dual gradients are exactly linear.

    First block:  -dX = a * d(lambda_hat)   (slope a)
    Second block: d(x copy) = b * d(lambda) (slope b)
    """
    rng = np.random.default_rng(seed)
    w1, w2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    scheme = SpectralAdaptive()
    agent = fake_agent(pen=pen0)
    scheme.begin(SimpleNamespace(agents=[agent]))
    history = []
    for r in range(rounds):
        n = 1 + 10 * r
        cur, prev = fake_agent(pen=pen0), fake_agent(pen=pen0)
        cur.pen = dict(agent.pen)
        prev.pen = dict(agent.pen)
        lam_hat = (r + 1) * w1
        cur.X = -a * lam_hat
        prev.xt[0] = np.zeros_like(cur.X)
        prev.lam = lam_hat - prev.pen["rho"] * (cur.X - prev.xt[0])
        cur.lam = (r + 1) * w2
        cur.xt[0] = b * cur.lam
        scheme.update(n, SimpleNamespace(agents=[cur]), SimpleNamespace(agents=[prev]), None)
        agent.pen = cur.pen
        history.append(cur.pen["rho"])
    return history, scheme


def test_ap_reaches_inverse_geometric_mean_of_slopes():
    for a, b in [(0.25, 1.0), (2.0, 0.5), (0.1, 0.4)]:
        history, _ = synthetic_ap_rounds(a, b)
        target = 1 / math.sqrt(a * b)
        assert abs(history[2] - target) <= 1e-6
        assert abs(history[3] - target) <= 1e-6


def test_ap_first_round_only_records():
    history, scheme = synthetic_ap_rounds(0.25, 1.0, rounds=1)
    assert history == [1.0] and scheme.log == []


def test_ap_off_schedule_iterations_do_nothing():
    scheme = SpectralAdaptive()
    a = fake_agent()
    scheme.begin(SimpleNamespace(agents=[a]))
    scheme.update(5, SimpleNamespace(agents=[a]), SimpleNamespace(agents=[fake_agent()]), None)
    assert scheme.history == {}


def test_fixed_scheme_never_changes_penalties():
    a = fake_agent(pen=3.0)
    FixedPenalty().update(1, SimpleNamespace(agents=[a]), SimpleNamespace(agents=[fake_agent()]), None)
    assert all(v == 3.0 for v in a.pen.values())


def _rb_step(scheme, n, primal, dual, pen=1.0):
    cur, prev = fake_agent(pen=pen), fake_agent(pen=pen)
    cur.X[0, 0] = primal  # rho family primal residual = |X - xt0|
    cur.xt[0][1, 0] = dual / pen  # dual residual = pen * |xt0 - xt0_prev|
    cur.X[1, 0] = cur.xt[0][1, 0]
    scheme.update(n, SimpleNamespace(agents=[cur]), SimpleNamespace(agents=[prev]), None)
    return cur.pen["rho"]


def test_rb_as_printed():
    rb = ResidualBalancing()
    assert _rb_step(rb, 1, 1.0, 0.05) == 0.5
    assert _rb_step(rb, 1, 0.05, 1.0) == 2.0
    assert _rb_step(rb, 1, 1.0, 0.5) == 1.0
    assert _rb_step(rb, 2, 1.0, 0.05) == 1.0  # off schedule


def test_rb_inverted_and_alternation():
    inv = ResidualBalancing(inverted=True)
    assert _rb_step(inv, 1, 1.0, 0.05) == 2.0
    rb = ResidualBalancing()
    pen = 1.0
    for primal, dual in [(1.0, 0.05), (0.05, 1.0), (1.0, 0.05), (0.05, 1.0)]:
        pen = _rb_step(rb, 11, primal, dual, pen)
    assert pen == 1.0


def _na_state(value):
    a = fake_agent()
    for name in ("xt", "ut", "tt", "lam", "zeta", "y", "eta"):
        setattr(a, name, np.full(np.shape(getattr(a, name)), float(value)))
    a.nu = float(value)
    return SimpleNamespace(agents=[a])


def test_na_first_step_has_zero_weight_and_restarts_on_spike():
    na = NesterovRestart()
    na.begin(_na_state(0.0))
    prev, cur = _na_state(0.0), _na_state(1.0)
    na.update(1, cur, prev, None)
    assert na.last_event is None
    np.testing.assert_allclose(cur.agents[0].lam, 1.0)  # (alpha1 - 1) = 0: no extrapolation
    assert na.alpha > 1.0
    # smaller change: momentum kicks in
    prev, cur = _na_state(1.0), _na_state(1.1)
    na.update(2, cur, prev, None)
    assert cur.agents[0].lam[0, 0] > 1.1
    # spike: restart restores the last plain iterate and resets alpha
    prev, cur = _na_state(1.1), _na_state(50.0)
    na.update(3, cur, prev, None)
    assert na.last_event == "restart" and na.alpha == 1.0 and na.restarts == 1
    np.testing.assert_allclose(cur.agents[0].lam, 1.1)


def test_make_scheme():
    assert make_scheme("rb-inverted").name == "rb-inverted"
    for name in ("fixed", "rb", "na", "ap"):
        assert make_scheme(name).name == name
    with pytest.raises(ValueError):
        make_scheme("nope")
