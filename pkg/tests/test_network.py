import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from swarm_pddp.network import CopyMessage, GlobalMessage, MessageBus, SyncError, Topology, build_topology
from swarm_pddp.scenarios import builtin


def test_nearest_neighbour_sets_with_id_tiebreak():
    pts = [(0, 0), (1, 0), (-1, 0), (5, 0)]
    topo = build_topology(pts, 2)
    assert topo.neighbor_sets == ((0, 1), (1, 0), (2, 0), (3, 1))
    assert topo.deemed_sets[0] == (0, 1, 2)


def test_all_gives_complete_graph():
    topo = build_topology(np.zeros((3, 2)) + np.arange(3)[:, None], "all")
    assert all(len(ns) == 3 for ns in topo.neighbor_sets)


def test_scenario3_inbox_count():
    topo = builtin(3).topology()
    assert sum(len(p) for p in topo.deemed_sets) == sum(len(n) for n in topo.neighbor_sets) == 80


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=12, unique=True),
       st.integers(1, 12))
def test_deemed_is_transpose_of_neighbour_relation(pts, size):
    size = min(size, len(pts))
    topo = build_topology(pts, size)
    for i, ns in enumerate(topo.neighbor_sets):
        assert ns[0] == i and len(ns) == size
        for j in ns:
            assert i in topo.deemed_sets[j]


def test_invalid_sets_rejected():
    with pytest.raises(ValueError):
        Topology.from_neighbor_sets([(1, 0), (1,)])
    with pytest.raises(ValueError):
        build_topology([(0, 0)], 2)


def _copies(topo, val=0.0):
    return {i: [CopyMessage(j, i, np.full((2, 3), val + i), val, np.zeros((2, 3)), 0.0) for j in ns]
            for i, ns in enumerate(topo.neighbor_sets)}


def test_copy_exchange_routes_by_deemed_set_and_freezes():
    topo = build_topology([(0, 0), (1, 0), (10, 0)], 2)
    bus = MessageBus(topo)
    inbox = bus.exchange_copies(1, _copies(topo))
    assert [[m.sender for m in box] for box in inbox] == [list(p) for p in topo.deemed_sets]
    with pytest.raises(ValueError):
        inbox[0][0].state_copy[0, 0] = 5.0
    assert bus.delivered["copy"] == sum(len(p) for p in topo.deemed_sets)


def test_round_replay_and_missing_posts_raise():
    topo = build_topology([(0, 0), (1, 0)], 2)
    bus = MessageBus(topo)
    bus.exchange_copies(1, _copies(topo))
    with pytest.raises(SyncError):
        bus.exchange_copies(1, _copies(topo))
    out = _copies(topo)
    del out[1]
    with pytest.raises(SyncError):
        bus.exchange_copies(2, out)


def test_wrong_neighbour_set_raises():
    topo = build_topology([(0, 0), (1, 0), (10, 0)], 2)
    out = _copies(topo)
    out[2] = [CopyMessage(0, 2, np.zeros((2, 3)), 0.0, np.zeros((2, 3)), 0.0)]
    with pytest.raises(SyncError):
        MessageBus(topo).exchange_copies(1, out)


def test_global_exchange_and_trace_is_deterministic():
    topo = build_topology([(0, 0), (1, 0), (10, 0)], 2)
    lines_a, lines_b = [], []
    for lines in (lines_a, lines_b):
        bus = MessageBus(topo, lines.append)
        bus.exchange_copies(1, _copies(topo, 1.5))
        inbox = bus.exchange_globals(1, {i: GlobalMessage(i, np.full((2, 3), i), float(i)) for i in range(3)})
        assert [[m.about for m in box] for box in inbox] == [sorted(ns) for ns in topo.neighbor_sets]
    assert lines_a == lines_b and lines_a
    with pytest.raises(SyncError):
        MessageBus(topo).exchange_globals(1, {i: GlobalMessage((i + 1) % 3, np.zeros(1), 0.0) for i in range(3)})
