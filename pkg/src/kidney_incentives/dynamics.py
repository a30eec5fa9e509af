"""Ground-truth generator: UCB-learning hospitals in two parallel mechanism worlds.

Every hospital lives in both worlds with an independent learner per world,
so all potential outcomes Y_i(z, t) are known. The random assignment only
decides which world's report is observable for each hospital. Hospital
types are drawn once per (hospital, round) and shared by both worlds.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Collection, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from kidney_incentives.domain import CrossmatchOracle, DomainParams, Pool, Report, deviate, sample_pool
from kidney_incentives.inference import LikelihoodMode, LikelihoodModel, ObservedReports, emit_evidence, report_statistic
from kidney_incentives.matching import build_graph
from kidney_incentives.mechanisms import MECHANISMS, MechanismId
from kidney_incentives.payoff import PayoffTable

RewardMode = Literal["table", "simulated"]
DEFAULT_REWARD_SIGMA = 2.5


@dataclass
class AgentLearner:
    """UCB1 state for one hospital in one world; index 1 is the truthful arm."""

    avg_utility: list[float] = field(default_factory=lambda: [0.0, 0.0])
    plays: list[int] = field(default_factory=lambda: [1, 1])


def ucb_select(learner: AgentLearner, t: int, rng: np.random.Generator) -> int:
    if t < 1:
        raise ValueError(f"round index must be >= 1, got {t}")
    log_t = math.log(t)
    idx = [learner.avg_utility[s] + math.sqrt(2.0 * log_t / learner.plays[s]) for s in (0, 1)]
    if idx[0] == idx[1]:
        return int(rng.integers(2))
    return 0 if idx[0] > idx[1] else 1


def greedy_select(learner: AgentLearner, rng: np.random.Generator) -> int:
    """Exploit only: the arm with the higher average reward, ties broken at random."""
    u = learner.avg_utility
    if u[0] == u[1]:
        return int(rng.integers(2))
    return 0 if u[0] > u[1] else 1


def update_learner(learner: AgentLearner, s: int, reward: float) -> AgentLearner:
    if s not in (0, 1):
        raise ValueError(f"strategy must be 0 or 1, got {s}")
    if not math.isfinite(reward):
        raise ValueError(f"reward must be finite, got {reward}")
    learner.plays[s] += 1
    learner.avg_utility[s] += (reward - learner.avg_utility[s]) / learner.plays[s]
    return learner


@dataclass(frozen=True)
class Assignment:
    z: tuple[int, ...]

    @property
    def n_treated(self) -> int:
        return sum(self.z)

    @classmethod
    def draw(cls, n: int, rng: np.random.Generator) -> Assignment:
        """Completely randomized design: exactly half the agents get M1."""
        if n % 2:
            raise ValueError(f"completely randomized assignment needs an even N, got {n}")
        z = np.zeros(n, dtype=int)
        z[rng.choice(n, size=n // 2, replace=False)] = 1
        return cls(tuple(int(v) for v in z))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One replication of the two-world simulation.

    ``strategies[i, z, t-1]`` is agent i's strategy in world z at round t.
    ``report_stats[t-1, i]`` holds ``(count, n_over_demanded)`` of the report
    agent i made in its assigned world, or ``(-1, -1)`` where reports were
    not recorded.
    """

    strategies: NDArray[np.int8]
    assignment: Assignment
    report_stats: NDArray[np.int64]
    true_delta: NDArray[np.float64]

    @property
    def n_agents(self) -> int:
        return self.strategies.shape[0]

    @property
    def n_rounds(self) -> int:
        return self.strategies.shape[2]

    def observed_strategies(self, t: int) -> NDArray[np.int8]:
        """Realized (never observed in practice) strategies Y_i(Z_i, t)."""
        z = np.asarray(self.assignment.z)
        return self.strategies[np.arange(self.n_agents), z, t - 1]


def true_estimand(traj: Trajectory, t: int) -> float:
    """Difference in truthful fractions between M1 and M0 at round t."""
    if not 1 <= t <= traj.n_rounds:
        raise IndexError(f"round {t} outside 1..{traj.n_rounds}")
    y = traj.strategies[:, :, t - 1].astype(float)
    return float(y[:, 1].mean() - y[:, 0].mean())


def reward_range(tables: Mapping[MechanismId, PayoffTable]) -> tuple[float, float]:
    """Smallest and largest defined cell across the payoff tables."""
    cells = np.concatenate([np.concatenate([t.u_truthful, t.u_deviating]) for t in tables.values()])
    cells = cells[np.isfinite(cells)]
    return float(cells.min()), float(cells.max())


def simulate_worlds(
    params: DomainParams,
    T: int,
    rng: np.random.Generator,
    *,
    reward_mode: RewardMode = "table",
    tables: Mapping[MechanismId | str, PayoffTable] | None = None,
    sigma: float = DEFAULT_REWARD_SIGMA,
    reward_bounds: tuple[float, float] | None = None,
    report_rounds: Collection[int] | None = None,
    mechanisms: Sequence[MechanismId | str] = (MechanismId.M0, MechanismId.M1),
    greedy_after: int | None = None,
) -> Trajectory:
    """Run both worlds for T rounds and record every potential outcome.

    Rewards are per-round utilities mapped affinely onto the unit interval
    via ``reward_bounds`` (by default the range of the payoff tables), the
    scale UCB1's exploration bonus assumes. In ``table`` mode a reward is the
    table cell for the agent's strategy at the world's current truthful count
    plus Gaussian noise (one noise draw per agent and round, shared by both
    worlds); in ``simulated`` mode it is the realized match count from running
    the world's mechanism on the round's reports.

    With ``greedy_after`` set, agents stop exploring after that round and
    play their best average arm.
    """
    n = params.n_hospitals
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    mechs = [MechanismId(m) for m in mechanisms]
    tabs = {MechanismId(k): v for k, v in (tables or {}).items()}
    if reward_mode == "table" and set(tabs) != set(mechs):
        raise ValueError("table reward mode needs a payoff table for every mechanism")
    if reward_mode not in ("table", "simulated"):
        raise ValueError(f"unknown reward mode {reward_mode!r}")
    if reward_bounds is None:
        reward_bounds = reward_range(tabs) if tabs else (0.0, float(params.pool_size))
    lo, hi = reward_bounds
    if not hi > lo:
        raise ValueError(f"reward bounds must satisfy lo < hi, got {reward_bounds}")
    scale = hi - lo

    streams = rng.spawn(4)
    pool_rng, noise_rng, world_rngs = streams[0], streams[1], streams[2:]
    assignment = Assignment.draw(n, streams[0])
    oracle = CrossmatchOracle(params.crossmatch_prob, int(pool_rng.integers(2**63)))
    learners = [[AgentLearner() for _ in range(n)] for _ in mechs]
    y = np.zeros((n, 2, T), dtype=np.int8)
    stats = np.full((T, n, 2), -1, dtype=np.int64)
    z_of = np.asarray(assignment.z)

    for t in range(1, T + 1):
        need_pools = reward_mode == "simulated" or report_rounds is None or t in report_rounds
        pools = [sample_pool(params, i, t, pool_rng, oracle) for i in range(n)] if need_pools else None
        deviations: dict[int, tuple[int, Report]] = {}

        def deviation(i: int) -> tuple[int, Report]:
            # d(theta) is computed once per (agent, round) and shared by both worlds
            if i not in deviations:
                deviations[i] = deviate(pools[i], oracle, pool_rng)
            return deviations[i]

        noise = sigma * noise_rng.standard_normal(n)
        for w, mech in enumerate(mechs):
            if greedy_after is not None and t > greedy_after:
                picks = [greedy_select(learners[w][i], world_rngs[w]) for i in range(n)]
            else:
                picks = [ucb_select(learners[w][i], t, world_rngs[w]) for i in range(n)]
            choice = np.array(picks, dtype=np.int8)
            y[:, w, t - 1] = choice
            if reward_mode == "table":
                table = tabs[mech]
                k = int(choice.sum())
                utility = np.where(choice == 1, table.u_truthful[k] if k > 0 else 0.0,
                                   table.u_deviating[k] if k < n else 0.0) + noise
            else:
                internal = np.zeros(n)
                reports = []
                for i in range(n):
                    if choice[i]:
                        reports.append(pools[i].as_report())
                    else:
                        internal[i], rep = deviation(i)
                        reports.append(rep)
                graph = build_graph([r for r in reports if len(r)], oracle)
                outcome = MECHANISMS[mech](graph, n, world_rngs[w])
                utility = internal + np.asarray(outcome.matched_per_hospital, dtype=float)
            for i in range(n):
                update_learner(learners[w][i], int(choice[i]), (float(utility[i]) - lo) / scale)
        if pools is not None:
            for i in range(n):
                rep = pools[i] if y[i, z_of[i], t - 1] else deviation(i)[1]
                stats[t - 1, i] = report_statistic(rep)

    delta = y[:, 1, :].mean(axis=0) - y[:, 0, :].mean(axis=0)
    return Trajectory(y, assignment, stats, delta.astype(float))


def observe(
    traj: Trajectory, t: int, model: LikelihoodModel, rng: np.random.Generator | None = None
) -> ObservedReports:
    """What an analyst sees at round t: one observation per agent from its assigned world.

    Synthetic models emit an evidence bit from the realized strategy (needs
    ``rng``); simulated models use the recorded report statistics.
    """
    if not 1 <= t <= traj.n_rounds:
        raise IndexError(f"round {t} outside 1..{traj.n_rounds}")
    if model.mode is LikelihoodMode.SYNTHETIC:
        if rng is None:
            raise ValueError("synthetic evidence needs an rng")
        obs = tuple(emit_evidence(model, int(y), rng) for y in traj.observed_strategies(t))
    else:
        stats = traj.report_stats[t - 1]
        if np.any(stats < 0):
            raise ValueError(f"reports were not recorded at round {t}")
        obs = tuple((int(c), int(o)) for c, o in stats)
    return ObservedReports(t, traj.assignment.z, obs)


# -- export ---------------------------------------------------------------------

TRAJECTORY_COLUMNS = ("replication", "round", "agent", "mechanism", "strategy", "observed_flag", "report_statistic")
ESTIMAND_COLUMNS = ("replication", "round", "delta")
BAND_COLUMNS = ("round", "mean", "lo", "hi")


def write_trajectories(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for r, traj in enumerate(trajectories):
            for t in range(1, traj.n_rounds + 1):
                for i in range(traj.n_agents):
                    for z in (0, 1):
                        observed = traj.assignment.z[i] == z
                        stat = traj.report_stats[t - 1, i]
                        text = f"{stat[0]}:{stat[1]}" if observed and stat[0] >= 0 else ""
                        writer.writerow([r, t, i, f"M{z}", int(traj.strategies[i, z, t - 1]), int(observed), text])


def write_estimands(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMAND_COLUMNS)
        for r, traj in enumerate(trajectories):
            for t, d in enumerate(traj.true_delta, start=1):
                writer.writerow([r, t, repr(float(d))])


def estimand_bands(trajectories: Sequence[Trajectory]) -> NDArray[np.float64]:
    """Rows of (round, mean, 2.5% quantile, 97.5% quantile) of the estimand."""
    deltas = np.stack([traj.true_delta for traj in trajectories])
    rounds = np.arange(1, deltas.shape[1] + 1)
    lo, hi = np.quantile(deltas, [0.025, 0.975], axis=0)
    return np.column_stack([rounds, deltas.mean(axis=0), lo, hi])


def write_bands(trajectories: Sequence[Trajectory], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BAND_COLUMNS)
        for row in estimand_bands(trajectories):
            writer.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
