from pathlib import Path

import numpy as np
import pytest

from swarm_pddp.model import AgentTrajectory, Unicycle
from swarm_pddp.scenarios import ConfigError, builtin, dump, load, loads, to_dict, validate

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("sid", [1, 2, 3, 4])
def test_golden_configs_match_builtins(sid):
    assert load(CONFIGS / f"scenario{sid}.yaml") == builtin(sid)


@pytest.mark.parametrize("sid", [1, 2, 3, 4])
def test_dump_load_roundtrip(sid, tmp_path):
    dump(builtin(sid), tmp_path / "s.yaml")
    assert load(tmp_path / "s.yaml") == builtin(sid)


def test_builtin_shapes():
    assert [builtin(i).m for i in range(1, 5)] == [4, 5, 16, 20]
    s4 = builtin(4)
    assert len(s4.obstacles) == 7
    assert s4.agents[0].start.x_m == 10.0 and s4.agents[1].start.x_m == 30.0
    s3 = builtin(3)
    starts = np.array([a.initial_state()[:2] for a in s3.agents])
    np.testing.assert_allclose(np.hypot(*starts.T), 135.0)
    with pytest.raises(ConfigError):
        builtin(9)


def test_scenario2_sequence_rows_follow_id_chain():
    sc = builtin(2)
    topo = sc.topology()
    spec = sc.time_sequence.spec_for(topo, 0)
    for row, delta, j in zip(spec.matrix_a, spec.t_delta, topo.neighbor_sets[0][1:]):
        assert row[0] == 1.0 and delta == pytest.approx(-0.1 * j)


def _text(**replace):
    base = (CONFIGS / "scenario1.yaml").read_text()
    for old, new in replace.items():
        base = base.replace(old, new)
    return base


def test_unknown_key_names_line():
    text = _text(**{"  speed_mps: 30.0": "  speed_mps: 30.0\n  sped: 1"})
    with pytest.raises(ConfigError, match=r"t\.yaml:\d+: unknown key 'dynamics\.sped'"):
        loads(text, "t.yaml")


def test_missing_required_field():
    text = _text(**{"  d_comm_m: 300.0\n": ""})
    with pytest.raises(ConfigError, match="missing required field 'safety.d_comm_m'"):
        loads(text, "t.yaml")


def test_wrong_type_and_version():
    with pytest.raises(ConfigError, match="must be of type float"):
        loads(_text(**{"speed_mps: 30.0": "speed_mps: fast"}), "t.yaml")
    with pytest.raises(ConfigError, match="unsupported config version"):
        loads(_text(**{"version: 1": "version: 7"}), "t.yaml")
    with pytest.raises(ConfigError, match="invalid YAML"):
        loads("a: [1,", "t.yaml")


def test_semantic_errors_are_config_errors():
    with pytest.raises(ConfigError):
        loads(_text(**{"d_comm_m: 300.0": "d_comm_m: 5.0"}), "t.yaml")
    with pytest.raises(ConfigError):
        loads(_text(**{"speed_mps: 30.0": "speed_mps: -3.0"}), "t.yaml")


def test_to_dict_has_units_in_keys():
    d = to_dict(builtin(1))
    assert "speed_mps" in d["dynamics"] and "d_comm_m" in d["safety"]


def _straight(sc):
    model = Unicycle(sc.dynamics)
    return [model.rollout(a.initial_state(), np.zeros(sc.dynamics.n_steps), 9.0) for a in sc.agents]


def test_validate_feasible_hand_solution():
    sc = builtin(4)
    trajs = _straight(sc)
    # shift every path far from the obstacle field so the hand solution is feasible
    moved = [AgentTrajectory(t.states + [0.0, 1000.0, 0.0], t.controls, t.t_final) for t in trajs]
    rep = validate(moved, sc)
    assert rep.ok, rep.failures
    assert rep.min_pairwise_distance == pytest.approx(np.hypot(20.0, 30.0))


def test_validate_reports_obstacle_instant_and_pair():
    sc = builtin(4)
    trajs = _straight(sc)
    rep = validate(trajs, sc)
    assert not rep.ok
    assert any("obstacle" in f for f in rep.failures)
    pair = load(Path(__file__).parent / "data" / "tiny.yaml")
    bad = _straight(pair)
    bad[1].states[20, :2] = bad[0].states[20, :2] + [3.0, 0.0]
    rep = validate(bad, pair)
    assert rep.closest_pair == (0, 1) and rep.closest_instant == 20
    assert any("k=20" in f for f in rep.failures)


def test_validate_time_gaps():
    sc = builtin(2)
    trajs = _straight(sc)
    for i, t in enumerate(trajs):
        t.t_final = 9.0 + 0.1 * i
    rep = validate(trajs, sc)
    assert all(abs(g - w) < 1e-12 for _, _, g, w in rep.time_gaps)
    assert not any("arrival" in f for f in rep.failures)
    trajs[4].t_final += 0.05
    rep = validate(trajs, sc)
    assert any("arrival gap" in f for f in rep.failures)
