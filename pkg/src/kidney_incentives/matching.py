"""Maximum-cardinality matching on general (non-bipartite) graphs.

Exchange compatibility graphs contain odd cycles, so a plain augmenting-path
search is not enough; this uses Edmonds' blossom contraction. A "random"
maximum matching is obtained by randomly permuting vertex labels and edge
order before the search.
"""

from __future__ import annotations

import random
from collections import deque
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from kidney_incentives.domain import ABO_TABLE, CrossmatchOracle, PairSet


@dataclass(frozen=True, eq=False)
class CompatibilityGraph:
    """Undirected graph over pair uids; an edge is a feasible 2-way exchange.

    Vertex attributes (hospital, donor/patient blood types) are kept alongside
    so mechanisms can slice the graph by category or owner.
    """

    uids: NDArray[np.int64]
    adjacency: NDArray[np.bool_]
    hospital: NDArray[np.int64]
    donor: NDArray[np.int8]
    patient: NDArray[np.int8]

    @property
    def vertices(self) -> list[int]:
        return [int(u) for u in self.uids]

    @property
    def edges(self) -> set[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return {_edge(int(self.uids[a]), int(self.uids[b])) for a, b in zip(i, j)}

    def __len__(self) -> int:
        return len(self.uids)

    def induced(self, idx: NDArray[np.intp]) -> CompatibilityGraph:
        return CompatibilityGraph(
            self.uids[idx],
            self.adjacency[np.ix_(idx, idx)],
            self.hospital[idx],
            self.donor[idx],
            self.patient[idx],
        )

    def adjacency_lists(self, idx: NDArray[np.intp] | None = None) -> list[list[int]]:
        """Neighbour lists of the subgraph induced by ``idx`` (local indices)."""
        adj = self.adjacency if idx is None else self.adjacency[np.ix_(idx, idx)]
        return neighbour_lists(adj)


@dataclass(frozen=True)
class Matching:
    edges: frozenset[tuple[int, int]]

    @property
    def size(self) -> int:
        return len(self.edges)

    @property
    def matched_uids(self) -> set[int]:
        return {u for e in self.edges for u in e}


def neighbour_lists(adj: NDArray[np.bool_]) -> list[list[int]]:
    rows, cols = np.nonzero(adj)
    bounds = np.searchsorted(rows, np.arange(len(adj) + 1)).tolist()
    flat = cols.tolist()
    return [flat[bounds[v] : bounds[v + 1]] for v in range(len(adj))]


def _edge(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def graph_from_edges(vertices: Sequence[int], edges: Iterable[tuple[int, int]]) -> CompatibilityGraph:
    """Bare graph with no blood-type attributes, mostly for tests and tooling."""
    uids = np.asarray(vertices, dtype=np.int64)
    if len(set(uids.tolist())) != len(uids):
        raise ValueError("duplicate vertex uid")
    pos = {int(u): k for k, u in enumerate(uids)}
    adj = np.zeros((len(uids), len(uids)), dtype=bool)
    for a, b in edges:
        if a == b:
            raise ValueError(f"self-loop on vertex {a}")
        if a not in pos or b not in pos:
            raise ValueError(f"edge ({a}, {b}) references a missing vertex")
        adj[pos[a], pos[b]] = adj[pos[b], pos[a]] = True
    n = len(uids)
    return CompatibilityGraph(uids, adj, np.full(n, -1), np.zeros(n, np.int8), np.zeros(n, np.int8))


def feasibility_matrix(
    uids: NDArray[np.int64],
    donor: NDArray[np.int8],
    patient: NDArray[np.int8],
    round: int,
    oracle: CrossmatchOracle,
) -> NDArray[np.bool_]:
    """Boolean matrix of mutual 2-way exchange feasibility.

    ``one_way[a, b]`` holds when the donor of pair a can give to the patient
    of pair b: ABO compatible and crossmatch negative.
    """
    one_way = ABO_TABLE[donor[:, None], patient[None, :]]
    if one_way.any():
        rows, cols = np.nonzero(one_way)
        pos = oracle.positive(uids[rows], uids[cols], round)
        one_way[rows[pos], cols[pos]] = False
    adj = one_way & one_way.T
    np.fill_diagonal(adj, False)
    return adj


def build_graph(pools: Sequence[PairSet], crossmatch_oracle: CrossmatchOracle) -> CompatibilityGraph:
    """Compatibility graph over the union of reports (or pools) of one round."""
    if not pools:
        empty = np.empty(0, np.int64)
        return CompatibilityGraph(empty, np.zeros((0, 0), bool), empty, np.empty(0, np.int8), np.empty(0, np.int8))
    rounds = {p.round for p in pools}
    if len(rounds) != 1:
        raise ValueError(f"pools from different rounds cannot share a graph: {sorted(rounds)}")
    uids = np.concatenate([p.uids for p in pools])
    if len(np.unique(uids)) != len(uids):
        raise ValueError("duplicate pair uid across pools")
    donor = np.concatenate([p.donor for p in pools])
    patient = np.concatenate([p.patient for p in pools])
    hospital = np.concatenate([np.full(len(p), p.hospital, dtype=np.int64) for p in pools])
    adj = feasibility_matrix(uids, donor, patient, rounds.pop(), crossmatch_oracle)
    return CompatibilityGraph(uids, adj, hospital, donor, patient)


# -- Edmonds' blossom algorithm ------------------------------------------------


def _augment_from(root: int, adj: list[list[int]], mate: list[int], dead: list[bool]) -> bool:
    """Grow an alternating tree from ``root``; augment and return True on success.

    On failure every vertex of the tree is flagged in ``dead``: none of them
    can lie on an augmenting path for this or any later matching.
    """
    n = len(adj)
    parent = [-1] * n
    base = list(range(n))
    in_tree = [False] * n
    in_tree[root] = True
    queue = deque([root])

    def lca(a: int, b: int) -> int:
        seen = [False] * n
        while True:
            a = base[a]
            seen[a] = True
            if mate[a] == -1:
                break
            a = parent[mate[a]]
        while True:
            b = base[b]
            if seen[b]:
                return b
            b = parent[mate[b]]

    def mark_path(v: int, b: int, child: int, blossom: list[bool]) -> None:
        while base[v] != b:
            blossom[base[v]] = blossom[base[mate[v]]] = True
            parent[v] = child
            child = mate[v]
            v = parent[mate[v]]

    while queue:
        v = queue.popleft()
        for u in adj[v]:
            if dead[u] or base[v] == base[u] or mate[v] == u:
                continue
            if u == root or (mate[u] != -1 and parent[mate[u]] != -1):
                # odd cycle: contract the blossom onto its base
                cur = lca(v, u)
                blossom = [False] * n
                mark_path(v, cur, u, blossom)
                mark_path(u, cur, v, blossom)
                for w in range(n):
                    if blossom[base[w]]:
                        base[w] = cur
                        if not in_tree[w]:
                            in_tree[w] = True
                            queue.append(w)
            elif parent[u] == -1:
                parent[u] = v
                if mate[u] == -1:
                    # flip the augmenting path ending at u
                    while u != -1:
                        pv = parent[u]
                        nxt = mate[pv]
                        mate[u] = pv
                        mate[pv] = u
                        u = nxt
                    return True
                in_tree[mate[u]] = True
                queue.append(mate[u])
    for w in range(n):
        if in_tree[w] or parent[w] != -1:
            dead[w] = True
    return False


def maximum_matching_mates(adj: list[list[int]], rng: np.random.Generator | None = None) -> list[int]:
    """Mate array of a maximum matching for neighbour lists ``adj``.

    With an ``rng`` the vertex labels and neighbour order are permuted first,
    so different maximum matchings are reachable across seeds.
    """
    n = len(adj)
    if n == 0:
        return []
    if rng is not None:
        shuffler = random.Random(int(rng.integers(2**63)))
        perm = list(range(n))  # perm[old] = new label
        shuffler.shuffle(perm)
        inv = [0] * n
        for old, new in enumerate(perm):
            inv[new] = old
        work = [[perm[u] for u in adj[inv[new]]] for new in range(n)]
        for nbrs in work:
            if len(nbrs) > 1:
                shuffler.shuffle(nbrs)
    else:
        work = adj
    mate = [-1] * n
    # greedy start; the blossom search then only handles the deficit
    for v in range(n):
        if mate[v] == -1:
            for u in work[v]:
                if mate[u] == -1:
                    mate[v], mate[u] = u, v
                    break
    dead = [False] * n
    for v in range(n):
        if mate[v] == -1 and not dead[v] and work[v]:
            _augment_from(v, work, mate, dead)
    if rng is None:
        return mate
    return [inv[mate[perm[old]]] if mate[perm[old]] != -1 else -1 for old in range(n)]


def max_matching(graph: CompatibilityGraph, rng: np.random.Generator | None = None) -> Matching:
    mate = maximum_matching_mates(graph.adjacency_lists(), rng)
    uids = graph.uids
    return Matching(frozenset(_edge(int(uids[v]), int(uids[u])) for v, u in enumerate(mate) if u > v))


def matched_mask(graph: CompatibilityGraph, rng: np.random.Generator | None = None) -> NDArray[np.bool_]:
    mate = maximum_matching_mates(graph.adjacency_lists(), rng)
    return np.array([u != -1 for u in mate], dtype=bool)


def brute_force_max_matching_size(n: int, edges: Iterable[tuple[int, int]]) -> int:
    """Exhaustive maximum matching size over vertices ``0..n-1``.

    Reference oracle for small graphs: branch on the lowest free vertex being
    left unmatched or matched to each of its free neighbours.
    """
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for a, b in edges:
        nbrs[a].add(b)
        nbrs[b].add(a)
    memo: dict[int, int] = {}

    def best(free: int) -> int:
        if free == 0:
            return 0
        if free in memo:
            return memo[free]
        v = (free & -free).bit_length() - 1
        rest = free & ~(1 << v)
        result = best(rest)
        for u in nbrs[v]:
            if rest >> u & 1:
                result = max(result, 1 + best(rest & ~(1 << u)))
        memo[free] = result
        return result

    return best((1 << n) - 1)
