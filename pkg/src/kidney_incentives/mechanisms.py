"""Central allocation mechanisms for the multi-hospital exchange.

``M0`` pools every report and computes one random maximum matching.
``M1`` matches in stages over the blood-type subgroups (self-demanded,
reciprocal, over/under-demanded) before a residual maximum matching. Inside
each subgroup stage a hospital's own pairs are matched among themselves
first, so reporting a pair never costs a hospital the exchange it could have
run internally; over-demanded pairs that remain are then shared out in
proportion to the under-demanded pairs each hospital reported.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from kidney_incentives.domain import (
    CAT_OVER,
    CAT_RECIPROCAL,
    CAT_SELF,
    CAT_UNDER,
    CATEGORY_TABLE,
    CrossmatchOracle,
    Report,
)
from kidney_incentives.matching import CompatibilityGraph, build_graph, maximum_matching_mates, neighbour_lists


class MechanismId(str, enum.Enum):
    M0 = "M0"
    M1 = "M1"


@dataclass(frozen=True)
class RoundOutcome:
    matched_per_hospital: tuple[int, ...]

    @property
    def total_matched(self) -> int:
        return sum(self.matched_per_hospital)


class _MatchState:
    """Mutable bookkeeping for one mechanism run over a fixed graph."""

    def __init__(self, graph: CompatibilityGraph, rng: np.random.Generator):
        self.graph = graph
        self.rng = rng
        self.matched = np.zeros(len(graph), dtype=bool)
        self.n_edges = 0

    def free(self, mask: NDArray[np.bool_]) -> NDArray[np.intp]:
        return np.flatnonzero(mask & ~self.matched)

    def match_within(self, idx: NDArray[np.intp], allowed: NDArray[np.bool_] | None = None) -> None:
        """Maximum matching on the subgraph induced by ``idx`` (optionally masked)."""
        if len(idx) < 2:
            return
        sub = self.graph.adjacency[np.ix_(idx, idx)]
        if allowed is not None:
            sub = sub & allowed
        if not sub.any():
            return
        mate = maximum_matching_mates(neighbour_lists(sub), self.rng)
        for v, u in enumerate(mate):
            if u > v:
                self.link(idx[v], idx[u])

    def link(self, a: int, b: int) -> None:
        self.matched[a] = self.matched[b] = True
        self.n_edges += 1

    def outcome(self, n_hospitals: int) -> RoundOutcome:
        counts = np.bincount(self.graph.hospital[self.matched], minlength=n_hospitals)
        return RoundOutcome(tuple(int(c) for c in counts[:n_hospitals]))


def m0_on_graph(graph: CompatibilityGraph, n_hospitals: int, rng: np.random.Generator) -> RoundOutcome:
    state = _MatchState(graph, rng)
    state.match_within(np.arange(len(graph)))
    return state.outcome(n_hospitals)


def proportional_allocation(weights: Sequence[float], total: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """Split ``total`` units in proportion to ``weights`` by largest remainder.

    Ties among equal fractional remainders are broken uniformly at random.
    """
    w = np.asarray(weights, dtype=float)
    if total <= 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = total * w / w.sum()
    alloc = np.floor(exact).astype(np.int64)
    short = total - int(alloc.sum())
    if short:
        frac = exact - alloc
        # random key breaks exact ties; lexsort uses the last key as primary
        order = np.lexsort((rng.random(len(w)), -frac))
        alloc[order[:short]] += 1
    return alloc


def _own_then_pooled(state: _MatchState, members: NDArray[np.bool_], allowed=None) -> None:
    hosp = state.graph.hospital
    for h in np.unique(hosp[members]):
        state.match_within(state.free(members & (hosp == h)), allowed)
    state.match_within(state.free(members), allowed)


def m1_on_graph(graph: CompatibilityGraph, n_hospitals: int, rng: np.random.Generator) -> RoundOutcome:
    state = _MatchState(graph, rng)
    cats = CATEGORY_TABLE[graph.donor, graph.patient]
    hosp = graph.hospital

    # stage 1: self-demanded pairs, one group per blood type
    self_demanded = cats == CAT_SELF
    for bt in range(4):
        _own_then_pooled(state, self_demanded & (graph.donor == bt))

    # stage 2: reciprocal A-B / B-A pairs (the subgraph is bipartite already)
    _own_then_pooled(state, cats == CAT_RECIPROCAL)

    # stage 3: over-demanded pairs serve under-demanded ones
    over = cats == CAT_OVER
    under = cats == CAT_UNDER
    for h in np.unique(hosp[over]):
        idx = state.free((over | under) & (hosp == h))
        is_over = over[idx]
        state.match_within(idx, is_over[:, None] != is_over[None, :])
    _allocate_over_demanded(state, over, under, n_hospitals)

    # stage 4: residual maximum matching over everything left
    state.match_within(state.free(np.ones(len(graph), dtype=bool)))
    return state.outcome(n_hospitals)


def _allocate_over_demanded(
    state: _MatchState, over: NDArray[np.bool_], under: NDArray[np.bool_], n_hospitals: int
) -> None:
    hosp = state.graph.hospital
    spare_over = state.free(over)
    if len(spare_over) == 0:
        return
    reported_under = np.bincount(hosp[under], minlength=n_hospitals)[:n_hospitals]
    quota = proportional_allocation(reported_under, len(spare_over), state.rng)
    adj = state.graph.adjacency
    rng = state.rng
    active = [h for h in rng.permutation(n_hospitals).tolist() if quota[h] > 0]
    while active:
        still_active = []
        for h in active:
            od = state.free(over)
            ud = state.free(under & (hosp == h))
            if len(od) == 0:
                return
            cand = np.argwhere(adj[np.ix_(od, ud)])
            if len(cand) == 0:
                continue
            a, b = cand[rng.integers(len(cand))]
            state.link(od[a], ud[b])
            quota[h] -= 1
            if quota[h] > 0:
                still_active.append(h)
        active = still_active


MechanismFn = Callable[[CompatibilityGraph, int, np.random.Generator], RoundOutcome]

MECHANISMS: dict[MechanismId, MechanismFn] = {
    MechanismId.M0: m0_on_graph,
    MechanismId.M1: m1_on_graph,
}


def _run(
    fn: MechanismFn,
    reports: Sequence[Report],
    rng: np.random.Generator,
    oracle: CrossmatchOracle | None,
) -> RoundOutcome:
    n_hospitals = len(reports)
    if not any(len(r) for r in reports):
        return RoundOutcome((0,) * n_hospitals)
    nonempty = [r for r in reports if len(r)]
    if oracle is None:
        oracle = CrossmatchOracle()
    return fn(build_graph(nonempty, oracle), n_hospitals, rng)


def run_m0(
    reports: Sequence[Report], rng: np.random.Generator, oracle: CrossmatchOracle | None = None
) -> RoundOutcome:
    """Random maximum matching over the union of all reports."""
    return _run(m0_on_graph, reports, rng, oracle)


def run_m1(
    reports: Sequence[Report], rng: np.random.Generator, oracle: CrossmatchOracle | None = None
) -> RoundOutcome:
    return _run(m1_on_graph, reports, rng, oracle)


def run_mechanism(
    mechanism: MechanismId | str,
    reports: Sequence[Report],
    rng: np.random.Generator,
    oracle: CrossmatchOracle | None = None,
) -> RoundOutcome:
    return _run(MECHANISMS[MechanismId(mechanism)], reports, rng, oracle)


def hospital_utility(outcome: RoundOutcome, internal_match_counts: Sequence[int]) -> NDArray[np.float64]:
    """Pairs matched this round: internally plus by the mechanism."""
    central = np.asarray(outcome.matched_per_hospital, dtype=float)
    internal = np.asarray(internal_match_counts, dtype=float)
    if central.shape != internal.shape:
        raise ValueError(
            f"outcome covers {central.size} hospitals but {internal.size} internal counts were given"
        )
    return central + internal
