"""Penalty-parameter strategies for the consensus iteration.

Each scheme is called after iteration ``n`` (1-based) with the engine
state, the snapshot taken just before that iteration, and the residual
report.  Fixed, residual balancing and the spectral scheme only rescale
the per-agent penalties.  The Nesterov-type scheme instead extrapolates
copies and duals and leaves penalties alone.

Every family ``f`` pairs a "first block" variable, a "second block"
variable and a dual::

    tau:   (U,          u copy,        zeta)
    rho:   (X,          own x copy,    lambda)
    mu:    (x copies,   cached z,      y)
    sigma: (t,          own t copy,    nu)
    gamma: (t copies,   cached s,      eta)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("tau", "rho", "mu", "sigma", "gamma")


def family_triple(a, family: str):
    """(first block, second block, dual) arrays of one agent for a penalty family."""
    if family == "tau":
        return a.U, a.ut, a.zeta
    if family == "rho":
        return a.X, a.xt[0], a.lam
    if family == "mu":
        return a.xt, a.za, a.y
    if family == "sigma":
        return np.array([a.t]), a.tt[:1], np.array([a.nu])
    if family == "gamma":
        return a.tt, a.sa, a.eta
    raise KeyError(family)


def intermediate_dual(prev_agent, agent, family: str) -> np.ndarray:
    """Half-step dual: old dual plus penalty times (new first block - old second block)."""
    _, old_second, old_dual = family_triple(prev_agent, family)
    new_first, _, _ = family_triple(agent, family)
    return old_dual + prev_agent.pen[family] * (new_first - old_second)


class PenaltyScheme:
    name = "base"
    mutates_iterates = False

    def begin(self, state) -> None:
        """Called once after the warm start."""

    def update(self, n: int, state, prev, report) -> None:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"scheme": self.name}


class FixedPenalty(PenaltyScheme):
    """Penalties stay at their initial values."""

    name = "fixed"

    def update(self, n, state, prev, report):
        return None


def _local_residuals(agent, prev_agent, family: str) -> tuple:
    first, second, _ = family_triple(agent, family)
    _, old_second, _ = family_triple(prev_agent, family)
    primal = float(np.linalg.norm(first - second))
    dual = float(agent.pen[family] * np.linalg.norm(second - old_second))
    return primal, dual


@dataclass
class ResidualBalancing(PenaltyScheme):
    """Residual-ratio rule, applied per agent and family every `freq` iterations.

    With ``inverted=False`` the rule is used in the printed orientation:
    halve the penalty when the primal residual dominates, double it when
    the dual residual dominates.  ``inverted=True`` gives the textbook
    orientation (raise the penalty when the primal residual dominates).
    """

    ratio: float = 10.0
    factor: float = 2.0
    freq: int = 10
    inverted: bool = False

    @property
    def name(self):
        return "rb-inverted" if self.inverted else "rb"

    def update(self, n, state, prev, report):
        if n % self.freq != 1:
            return
        for a, b in zip(state.agents, prev.agents):
            for f in FAMILIES:
                primal, dual = _local_residuals(a, b, f)
                up = dual >= self.ratio * primal
                down = primal >= self.ratio * dual
                if up == down:  # balanced, or both zero
                    continue
                grow = down if self.inverted else up
                a.pen[f] = a.pen[f] * self.factor if grow else a.pen[f] / self.factor

    def describe(self):
        return {"scheme": self.name, "ratio": self.ratio, "factor": self.factor, "freq": self.freq}


_NA_FIELDS = ("xt", "ut", "tt", "lam", "zeta", "nu", "y", "eta")
_NA_COPIES = {"xt": "mu", "ut": "tau", "tt": "gamma"}
_NA_DUALS = {"lam": "rho", "zeta": "tau", "nu": "sigma", "y": "mu", "eta": "gamma"}


@dataclass
class NesterovRestart(PenaltyScheme):
    """Accelerated ADMM with restart, extrapolating copies and duals.

    After each iteration the combined residual
    ``sum(1/p * |dual - dual_hat|^2) + sum(p * |copy - copy_hat|^2)`` is
    compared with its previous value.  If it shrank by at least the factor
    `eta`, the momentum sequence advances and the iterates are pushed
    along their last change; otherwise the momentum restarts from 1 and
    the previous (non-extrapolated) iterates are restored.
    """

    alpha1: float = 1.0
    eta: float = 0.9
    name = "na"
    mutates_iterates = True
    alpha: float = field(init=False, default=1.0)
    c_prev: float = field(init=False, default=math.inf)
    last: list = field(init=False, default_factory=list)
    last_event: str | None = field(init=False, default=None)
    restarts: int = field(init=False, default=0)

    def begin(self, state):
        self.alpha = self.alpha1
        self.c_prev = math.inf
        self.last = [_snapshot(a) for a in state.agents]
        self.restarts = 0

    def combined_residual(self, state, prev) -> float:
        total = 0.0
        for a, b in zip(state.agents, prev.agents):
            for name, fam in _NA_DUALS.items():
                d = np.asarray(getattr(a, name)) - np.asarray(getattr(b, name))
                total += float(np.sum(d * d)) / a.pen[fam]
            for name, fam in _NA_COPIES.items():
                d = np.asarray(getattr(a, name)) - np.asarray(getattr(b, name))
                total += a.pen[fam] * float(np.sum(d * d))
        return total

    def update(self, n, state, prev, report):
        c = self.combined_residual(state, prev)
        current = [_snapshot(a) for a in state.agents]
        if c < self.eta * self.c_prev:
            nxt = (1.0 + math.sqrt(1.0 + 4.0 * self.alpha ** 2)) / 2.0
            weight = (self.alpha - 1.0) / nxt
            for a, now, old in zip(state.agents, current, self.last):
                for name in _NA_FIELDS:
                    setattr(a, name, now[name] + weight * (now[name] - old[name]))
            self.alpha = nxt
            self.c_prev = c
            self.last_event = None
        else:
            for a, old in zip(state.agents, self.last):
                for name in _NA_FIELDS:
                    setattr(a, name, np.copy(old[name]) if np.ndim(old[name]) else old[name])
            self.alpha = self.alpha1
            self.c_prev = c / self.eta
            self.restarts += 1
            self.last_event = "restart"
            current = self.last
        self.last = current

    def describe(self):
        return {"scheme": self.name, "alpha1": self.alpha1, "eta": self.eta, "restarts": self.restarts}


def _snapshot(a) -> dict:
    return {name: (np.copy(getattr(a, name)) if np.ndim(getattr(a, name)) else float(getattr(a, name)))
            for name in _NA_FIELDS}


# ---------------------------------------------------------------------------
# spectral adaptive penalties


def correlation(a, b) -> float:
    """Cosine between two arrays; 0 when either is the zero vector."""
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def spectral_alpha(delta_primal, delta_dual):
    """Hybrid SD/MG curvature estimate; returns (hybrid, sd, mg) or None if invalid.

    Assumes the model ``delta_primal ~ delta_dual / hybrid``; a non-positive
    inner product means no positive curvature can be read off.
    """
    dp = np.ravel(delta_primal)
    dd = np.ravel(delta_dual)
    cross = float(dp @ dd)
    pp = float(dp @ dp)
    if cross <= 0.0 or pp == 0.0:
        return None
    sd = float(dd @ dd) / cross
    mg = cross / pp
    hybrid = mg if 2.0 * mg > sd else sd - mg / 2.0
    return hybrid, sd, mg


def clamp_update(proposed: float, current: float, n: int, c_cg: float) -> float:
    bound = 1.0 + c_cg / (n * n)
    return max(min(proposed, bound * current), current / bound)


def four_case(alpha_hat, beta_hat, alpha_cor, beta_cor, current, eps_cor):
    ok_a = alpha_hat is not None and alpha_cor > eps_cor
    ok_b = beta_hat is not None and beta_cor > eps_cor
    if ok_a and ok_b:
        return math.sqrt(alpha_hat * beta_hat)
    if ok_a:
        return alpha_hat
    if ok_b:
        return beta_hat
    return current


@dataclass(frozen=True)
class ApParams:
    eps_cor: float = 0.5
    c_cg: float = 5e2
    freq: int = 10

    def __post_init__(self):
        if not 0.0 < self.eps_cor < 1.0:
            raise ValueError("eps_cor must lie in (0, 1)")
        if self.c_cg <= 0:
            raise ValueError("c_cg must be positive")
        if self.freq < 1:
            raise ValueError("freq must be at least 1")


@dataclass
class _Snapshot:
    n: int
    first: np.ndarray
    second: np.ndarray
    dual: np.ndarray
    dual_hat: np.ndarray


@dataclass
class SpectralAdaptive(PenaltyScheme):
    """Per-agent, per-family spectral penalty estimates with safeguards.

    At iterations with ``n % freq == 1`` each agent compares the current
    (first block, second block, dual, half-step dual) with the snapshot of
    the previous update round.  The first-block curvature uses
    (-delta first, delta half-step dual): the first-block optimality
    condition gives ``d H(first) = -dual_hat``.  The second-block curvature
    uses (delta second, delta dual), since ``d G(second) = dual``.
    """

    params: ApParams = field(default_factory=ApParams)
    name = "ap"
    history: dict = field(init=False, default_factory=dict)
    log: list = field(init=False, default_factory=list)  # (n, agent, family, old, new)

    def begin(self, state):
        self.history = {}
        self.log = []

    def update(self, n, state, prev, report):
        p = self.params
        if n % p.freq != 1 % p.freq:
            return
        for a, b in zip(state.agents, prev.agents):
            for f in FAMILIES:
                first, second, dual = family_triple(a, f)
                dual_hat = intermediate_dual(b, a, f)
                snap = _Snapshot(n, np.copy(first), np.copy(second), np.copy(dual), dual_hat)
                old = self.history.get((a.index, f))
                self.history[(a.index, f)] = snap
                if old is None:
                    continue
                current = a.pen[f]
                new = self.propose(old, snap, current)
                new = clamp_update(new, current, n, p.c_cg)
                a.pen[f] = new
                self.log.append((n, a.index, f, current, new))

    def propose(self, old: _Snapshot, snap: _Snapshot, current: float) -> float:
        d_first = -(snap.first - old.first)
        d_hat = snap.dual_hat - old.dual_hat
        d_second = snap.second - old.second
        d_dual = snap.dual - old.dual
        est_a = spectral_alpha(d_first, d_hat)
        est_b = spectral_alpha(d_second, d_dual)
        return four_case(est_a[0] if est_a else None, est_b[0] if est_b else None,
                         correlation(d_first, d_hat), correlation(d_second, d_dual),
                         current, self.params.eps_cor)

    def describe(self):
        return {"scheme": self.name, "eps_cor": self.params.eps_cor, "c_cg": self.params.c_cg,
                "freq": self.params.freq, "updates": len(self.log)}


SCHEMES = ("fixed", "rb", "rb-inverted", "na", "ap")


def make_scheme(name: str) -> PenaltyScheme:
    if name == "fixed":
        return FixedPenalty()
    if name == "rb":
        return ResidualBalancing()
    if name == "rb-inverted":
        return ResidualBalancing(inverted=True)
    if name == "na":
        return NesterovRestart()
    if name == "ap":
        return SpectralAdaptive()
    raise ValueError(f"unknown penalty scheme {name!r}; choose one of {', '.join(SCHEMES)}")
