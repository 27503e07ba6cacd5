"""Neighbour topology and a bulk-synchronous in-memory message bus.

Every round has two exchanges: agents push their copies of each
neighbour to that neighbour, then every agent publishes its global
variables to the agents that listen to it.  ``N_i`` (neighbours of i) is
who i listens to, ``P_i`` (deemed neighbours) is who listens to i, so
``j in P_i  <=>  i in N_j``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class SyncError(RuntimeError):
    """A round was incomplete or out of order."""


@dataclass(frozen=True)
class Topology:
    neighbor_sets: tuple  # tuple of tuples, self first
    deemed_sets: tuple

    @property
    def m(self) -> int:
        return len(self.neighbor_sets)

    def index_in(self, owner: int, agent: int) -> int:
        """Block index of `agent` inside `owner`'s stack."""
        return self.neighbor_sets[owner].index(agent)

    @classmethod
    def from_neighbor_sets(cls, neighbor_sets: Sequence[Sequence[int]]) -> "Topology":
        sets = tuple(tuple(int(j) for j in ns) for ns in neighbor_sets)
        for i, ns in enumerate(sets):
            if not ns or ns[0] != i:
                raise ValueError(f"neighbour set of agent {i} must start with the agent itself")
            if len(set(ns)) != len(ns):
                raise ValueError(f"duplicate entries in neighbour set of agent {i}")
        deemed = tuple(tuple(j for j in range(len(sets)) if i in sets[j]) for i in range(len(sets)))
        return cls(sets, deemed)


def build_topology(positions, size) -> Topology:
    """Self plus the ``size - 1`` nearest agents; ``size="all"`` gives the complete graph.

    Ties in distance go to the lower agent id.
    """
    pts = np.asarray(positions, dtype=float)
    m = pts.shape[0]
    if size == "all":
        size = m
    size = int(size)
    if not 1 <= size <= m:
        raise ValueError(f"neighbourhood size {size} not in [1, {m}]")
    sets = []
    for i in range(m):
        dist = np.hypot(*(pts - pts[i]).T)
        others = sorted((j for j in range(m) if j != i), key=lambda j: (dist[j], j))
        sets.append([i] + others[: size - 1])
    return Topology.from_neighbor_sets(sets)


@dataclass(frozen=True)
class CopyMessage:
    """Agent `sender` tells agent `about` what it holds as `about`'s copy."""

    about: int
    sender: int
    state_copy: np.ndarray
    time_copy: float
    dual_y: np.ndarray
    dual_eta: float
    mu: float = 1.0
    gamma: float = 1.0


@dataclass(frozen=True)
class GlobalMessage:
    about: int
    z: np.ndarray
    s: float


def _freeze(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


def digest(*parts) -> str:
    h = hashlib.sha1()
    for p in parts:
        h.update(np.ascontiguousarray(np.asarray(p, dtype=float)).tobytes())
    return h.hexdigest()[:12]


class MessageBus:
    """Round-synchronous delivery; an exchange returns only after all posts are in."""

    def __init__(self, topology: Topology, trace: Callable[[str], None] | None = None):
        self.topology = topology
        self.trace = trace
        self._last_round = {"copy": -1, "global": -1}
        self.delivered = {"copy": 0, "global": 0}

    def _check_round(self, kind: str, rnd: int) -> None:
        if rnd <= self._last_round[kind]:
            raise SyncError(f"{kind} round {rnd} already exchanged (last was {self._last_round[kind]})")
        self._last_round[kind] = rnd

    def _missing(self, posted: Mapping) -> None:
        missing = [i for i in range(self.topology.m) if i not in posted]
        if missing:
            raise SyncError(f"agent {missing[0]} did not post this round")

    def exchange_copies(self, rnd: int, outgoing: Mapping[int, Sequence[CopyMessage]]):
        """outgoing[i] holds i's message about every j in N_i; returns inbox[j] sorted by sender."""
        self._missing(outgoing)
        self._check_round("copy", rnd)
        inbox: list[list[CopyMessage]] = [[] for _ in range(self.topology.m)]
        for i in range(self.topology.m):
            msgs = outgoing[i]
            if sorted(msg.about for msg in msgs) != sorted(self.topology.neighbor_sets[i]):
                raise SyncError(f"agent {i} posted copies for the wrong set of neighbours")
            for msg in msgs:
                if msg.sender != i or i not in self.topology.deemed_sets[msg.about]:
                    raise SyncError(f"agent {i} is not a deemed neighbour of {msg.about}")
                frozen = CopyMessage(msg.about, msg.sender, _freeze(msg.state_copy), float(msg.time_copy),
                                     _freeze(msg.dual_y), float(msg.dual_eta), float(msg.mu), float(msg.gamma))
                inbox[msg.about].append(frozen)
        for j, box in enumerate(inbox):
            box.sort(key=lambda msg: msg.sender)
            self.delivered["copy"] += len(box)
            if self.trace is not None:
                for msg in box:
                    self.trace(f"{rnd} copy from={msg.sender} about={j} digest={digest(msg.state_copy, msg.time_copy, msg.dual_y, msg.dual_eta)}")
        return inbox

    def exchange_globals(self, rnd: int, outgoing: Mapping[int, GlobalMessage]):
        """outgoing[i] is i's own global; inbox[i] holds the globals of every j in N_i, sorted by id."""
        self._missing(outgoing)
        self._check_round("global", rnd)
        frozen = {}
        for i in range(self.topology.m):
            msg = outgoing[i]
            if msg.about != i:
                raise SyncError(f"agent {i} posted a global about agent {msg.about}")
            frozen[i] = GlobalMessage(i, _freeze(msg.z), float(msg.s))
        inbox = []
        for i in range(self.topology.m):
            box = [frozen[j] for j in sorted(self.topology.neighbor_sets[i])]
            self.delivered["global"] += len(box)
            if self.trace is not None:
                for msg in box:
                    self.trace(f"{rnd} global from={msg.about} to={i} digest={digest(msg.z, msg.s)}")
            inbox.append(box)
        return inbox
