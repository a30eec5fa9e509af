"""Exchangeable payoff tables estimated by Monte Carlo, plus CSV persistence.

Under exchangeability a hospital's expected utility depends only on its own
strategy and on how many hospitals in total report truthfully, so each
mechanism is summarised by two vectors indexed by that count.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from kidney_incentives.domain import CrossmatchOracle, DomainParams, sample_pool
from kidney_incentives.matching import CompatibilityGraph, build_graph, maximum_matching_mates, neighbour_lists
from kidney_incentives.mechanisms import MECHANISMS, MechanismId

CSV_HEADER = ("k", "u_truthful", "u_deviating")


class PayoffTableError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PayoffTable:
    """Expected utilities of a truthful / deviating hospital by truthful count.

    ``u_truthful[k]`` is undefined (NaN) at ``k = 0`` and ``u_deviating[k]``
    at ``k = n_agents``; ``k`` always counts the focal hospital when it is
    truthful.
    """

    mechanism: MechanismId
    n_agents: int
    u_truthful: NDArray[np.float64]
    u_deviating: NDArray[np.float64]
    n_sims: int = 0
    se_truthful: NDArray[np.float64] | None = field(default=None, repr=False)
    se_deviating: NDArray[np.float64] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        n = self.n_agents
        ut = np.array(self.u_truthful, dtype=float)
        ud = np.array(self.u_deviating, dtype=float)
        if ut.shape != (n + 1,) or ud.shape != (n + 1,):
            raise PayoffTableError(f"payoff vectors must have length n_agents + 1 = {n + 1}")
        if not (np.isnan(ut[0]) and np.isnan(ud[n])):
            raise PayoffTableError("u_truthful[0] and u_deviating[N] must be undefined")
        for name, vec in (("u_truthful", ut[1:]), ("u_deviating", ud[:n])):
            if not np.all(np.isfinite(vec)):
                raise PayoffTableError(f"{name} has missing cells")
            if np.any(vec < 0):
                raise PayoffTableError(f"{name} has negative utilities")
        object.__setattr__(self, "mechanism", MechanismId(self.mechanism))
        object.__setattr__(self, "u_truthful", ut)
        object.__setattr__(self, "u_deviating", ud)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PayoffTable):
            return NotImplemented
        return (
            self.mechanism == other.mechanism
            and self.n_agents == other.n_agents
            and self.n_sims == other.n_sims
            and np.array_equal(self.u_truthful, other.u_truthful, equal_nan=True)
            and np.array_equal(self.u_deviating, other.u_deviating, equal_nan=True)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def delta_u_vector(self) -> NDArray[np.float64]:
        return np.array([delta_u(self, k) for k in range(self.n_agents)])


def delta_u(table: PayoffTable, k_others: int) -> float:
    """Utility gain from switching to truthful when ``k_others`` others are truthful."""
    if not 0 <= k_others <= table.n_agents - 1:
        raise IndexError(f"k_others must lie in 0..{table.n_agents - 1}, got {k_others}")
    return float(table.u_truthful[k_others + 1] - table.u_deviating[k_others])


# -- Monte Carlo estimation -----------------------------------------------------


def _internal_matches(graph: CompatibilityGraph, owners: list[NDArray[np.intp]], rng) -> list[NDArray[np.bool_]]:
    """Per hospital, which of its own pairs a deviating hospital matches internally."""
    masks = []
    for idx in owners:
        sub = graph.adjacency[np.ix_(idx, idx)]
        mate = maximum_matching_mates(neighbour_lists(sub), rng)
        masks.append(np.array([u != -1 for u in mate], dtype=bool))
    return masks


def simulate_profile_utilities(
    mechanisms: Sequence[MechanismId],
    params: DomainParams,
    round: int,
    oracle: CrossmatchOracle,
    rng: np.random.Generator,
) -> dict[MechanismId, tuple[NDArray[np.float64], NDArray[np.float64]]]:
    """One Monte Carlo draw of every table cell for each mechanism.

    Pools and truthful positions are shared across mechanisms (common random
    numbers). Returns, per mechanism, the mean utility of truthful and of
    deviating hospitals for each truthful count ``k = 0..N`` (NaN where no
    hospital plays that strategy).
    """
    n = params.n_hospitals
    pools = [sample_pool(params, h, round, rng, oracle) for h in range(n)]
    full = build_graph(pools, oracle)
    offsets = np.cumsum([0] + [len(p) for p in pools])
    owners = [np.arange(offsets[h], offsets[h + 1]) for h in range(n)]
    internal = _internal_matches(full, owners, rng)
    internal_count = np.array([int(m.sum()) for m in internal], dtype=float)
    remainder = [owners[h][~internal[h]] for h in range(n)]

    out = {m: (np.full(n + 1, np.nan), np.full(n + 1, np.nan)) for m in mechanisms}
    for k in range(n + 1):
        truthful = np.zeros(n, dtype=bool)
        truthful[rng.choice(n, size=k, replace=False)] = True
        idx = np.concatenate([owners[h] if truthful[h] else remainder[h] for h in range(n)])
        sub = full.induced(idx)
        for mech in mechanisms:
            outcome = MECHANISMS[mech](sub, n, rng)
            util = np.asarray(outcome.matched_per_hospital, dtype=float) + np.where(truthful, 0.0, internal_count)
            if k > 0:
                out[mech][0][k] = util[truthful].mean()
            if k < n:
                out[mech][1][k] = util[~truthful].mean()
    return out


def _mean_and_se(samples: list[float]) -> tuple[float, float]:
    n = len(samples)
    mean = math.fsum(samples) / n
    if n < 2:
        return mean, float("nan")
    var = math.fsum((x - mean) ** 2 for x in samples) / (n - 1)
    return mean, math.sqrt(var / n)


def estimate_payoff_tables(
    mechanisms: Sequence[MechanismId | str],
    params: DomainParams,
    n_sims: int,
    rng: np.random.Generator,
) -> dict[MechanismId, PayoffTable]:
    """Estimate payoff tables for several mechanisms on shared random draws."""
    if n_sims < 1:
        raise ValueError(f"n_sims must be at least 1, got {n_sims}")
    mechs = [MechanismId(m) for m in mechanisms]
    n = params.n_hospitals
    oracle = CrossmatchOracle(params.crossmatch_prob, int(rng.integers(2**63)))
    samples = {m: ([[] for _ in range(n + 1)], [[] for _ in range(n + 1)]) for m in mechs}
    for j in range(n_sims):
        draw = simulate_profile_utilities(mechs, params, j + 1, oracle, rng)
        for m in mechs:
            for k in range(n + 1):
                for side in (0, 1):
                    val = draw[m][side][k]
                    if not np.isnan(val):
                        samples[m][side][k].append(float(val))

    tables = {}
    for m in mechs:
        cells = [[_mean_and_se(s) if s else (np.nan, np.nan) for s in side] for side in samples[m]]
        tables[m] = PayoffTable(
            mechanism=m,
            n_agents=n,
            u_truthful=np.array([c[0] for c in cells[0]]),
            u_deviating=np.array([c[0] for c in cells[1]]),
            n_sims=n_sims,
            se_truthful=np.array([c[1] for c in cells[0]]),
            se_deviating=np.array([c[1] for c in cells[1]]),
        )
    return tables


def estimate_payoff_table(
    mechanism: MechanismId | str, params: DomainParams, n_sims: int, rng: np.random.Generator
) -> PayoffTable:
    return estimate_payoff_tables([mechanism], params, n_sims, rng)[MechanismId(mechanism)]


# -- persistence ------------------------------------------------------------------


def _fmt(x: float) -> str:
    return "" if np.isnan(x) else repr(float(x))


def save_table(table: PayoffTable, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# mechanism={table.mechanism.value} n_agents={table.n_agents} n_sims={table.n_sims}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for k in range(table.n_agents + 1):
            writer.writerow([k, _fmt(table.u_truthful[k]), _fmt(table.u_deviating[k])])


def _parse_cell(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return float("nan")
    try:
        value = float(text)
    except ValueError:
        raise PayoffTableError(f"row k={row}: {column} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise PayoffTableError(f"row k={row}: {column} is not finite")
    if value < 0:
        raise PayoffTableError(f"row k={row}: {column} is negative ({value})")
    return value


def load_table(path: str | Path, mechanism: MechanismId | str | None = None) -> PayoffTable:
    """Read a payoff CSV written by :func:`save_table` (or transcribed by hand)."""
    path = Path(path)
    meta: dict[str, str] = {}
    rows: list[list[str]] = []
    with path.open(newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                for token in line[1:].split():
                    key, _, value = token.partition("=")
                    meta[key] = value
            elif line.strip():
                rows.append(next(csv.reader([line])))
    if not rows or tuple(c.strip() for c in rows[0]) != CSV_HEADER:
        raise PayoffTableError(f"{path}: expected header {','.join(CSV_HEADER)}")
    body = rows[1:]
    n = len(body) - 1
    if n < 1:
        raise PayoffTableError(f"{path}: need rows for k = 0..N with N >= 1")
    ut = np.full(n + 1, np.nan)
    ud = np.full(n + 1, np.nan)
    for pos, row in enumerate(body):
        if len(row) != 3:
            raise PayoffTableError(f"{path}: row {pos + 2} has {len(row)} fields, expected 3")
        try:
            k = int(row[0])
        except ValueError:
            raise PayoffTableError(f"{path}: row {pos + 2} has non-integer k {row[0]!r}") from None
        if k != pos:
            raise PayoffTableError(f"{path}: row {pos + 2} has k={k}, expected {pos}")
        ut[k] = _parse_cell(row[1], k, "u_truthful")
        ud[k] = _parse_cell(row[2], k, "u_deviating")
    mech = mechanism if mechanism is not None else meta.get("mechanism")
    if mech is None:
        raise PayoffTableError(f"{path}: mechanism not recorded in file; pass it explicitly")
    try:
        return PayoffTable(MechanismId(mech), n, ut, ud, int(meta.get("n_sims", 0)))
    except PayoffTableError as exc:
        raise PayoffTableError(f"{path}: {exc}") from None
