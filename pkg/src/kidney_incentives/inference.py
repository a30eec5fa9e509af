"""Causal estimators for the effect of a mechanism on truthfulness.

Both estimators impute the full N x 2 strategy matrix at one analysis round
from the reports observed under a randomized assignment:

* the empirical method imputes realized strategies from a uniform-prior
  posterior and fills unrealized ones from the realized truthful fraction;
* the game-theoretic method runs a Gibbs sampler whose prior is a logit
  (quantal) response to the payoff tables.

``exact_posterior`` enumerates the game-theoretic posterior for small N and
serves as a test oracle for the sampler.
"""

from __future__ import annotations

import enum
import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logsumexp

from kidney_incentives.domain import CAT_OVER, CrossmatchOracle, DomainParams, PairSet, deviate, sample_pool
from kidney_incentives.mechanisms import MechanismId
from kidney_incentives.payoff import PayoffTable, delta_u

# an observation is a binary evidence bit (synthetic channel) or a report statistic
Observation = Union[int, tuple[int, int]]
Contrast = Callable[[NDArray, NDArray], NDArray]

MAX_EXACT_AGENTS = 12
DEFAULT_BETA_SPAN = 3.0


class LikelihoodError(ValueError):
    pass


def report_statistic(report: PairSet, pool_size_m: int | None = None) -> tuple[int, int]:
    """(number of pairs reported, number of over-demanded pairs among them)."""
    if pool_size_m is not None and len(report) > pool_size_m:
        raise ValueError(f"report has {len(report)} pairs, more than the pool size {pool_size_m}")
    return len(report), int(np.count_nonzero(report.categories == CAT_OVER))


# -- likelihood models ----------------------------------------------------------


class LikelihoodMode(str, enum.Enum):
    SIMULATED = "simulated"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class LikelihoodModel:
    """Distribution of an observation given the strategy that produced it.

    Synthetic mode emits one evidence bit (1 = truthful-looking) that agrees
    with the strategy with probability ``separability``. Simulated mode uses
    densities ``f`` (truthful) and ``g`` (deviating) over report statistics.
    """

    mode: LikelihoodMode
    separability: float | None = None
    f: Mapping[tuple[int, int], float] | None = field(default=None, repr=False)
    g: Mapping[tuple[int, int], float] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", LikelihoodMode(self.mode))
        if self.mode is LikelihoodMode.SYNTHETIC:
            if self.separability is None or not 0.5 <= self.separability <= 1.0:
                raise ValueError(f"separability must lie in [0.5, 1], got {self.separability}")
        else:
            for name, dens in (("f", self.f), ("g", self.g)):
                if dens is None:
                    raise ValueError(f"simulated likelihood needs density {name}")
                vals = np.fromiter(dens.values(), float)
                if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
                    raise ValueError(f"density {name} must be non-negative and sum to 1")

    @classmethod
    def synthetic(cls, separability: float) -> LikelihoodModel:
        return cls(LikelihoodMode.SYNTHETIC, separability=float(separability))

    @classmethod
    def simulated(cls, f: Mapping, g: Mapping) -> LikelihoodModel:
        return cls(LikelihoodMode.SIMULATED, f=dict(f), g=dict(g))


def likelihood(model: LikelihoodModel, obs: Observation, y: int) -> float:
    if model.mode is LikelihoodMode.SYNTHETIC:
        if obs not in (0, 1):
            raise LikelihoodError(f"synthetic evidence must be 0 or 1, got {obs!r}")
        s = model.separability
        return s if int(obs) == int(y) else 1.0 - s
    key = tuple(obs)
    f = model.f.get(key, 0.0)
    g = model.g.get(key, 0.0)
    if f == 0.0 and g == 0.0:
        raise LikelihoodError(f"report statistic {key} has zero probability under both strategies")
    return f if y else g


def posterior_uniform(model: LikelihoodModel, obs: Observation) -> float:
    """P(truthful | observation) under a uniform prior."""
    f = likelihood(model, obs, 1)
    g = likelihood(model, obs, 0)
    if f + g == 0.0:
        raise LikelihoodError(f"observation {obs!r} has zero probability under both strategies")
    return f / (f + g)


def log_likelihood_ratio(model: LikelihoodModel, obs: Observation) -> float:
    """log L(obs | truthful) - log L(obs | deviating), possibly infinite."""
    f = likelihood(model, obs, 1)
    g = likelihood(model, obs, 0)
    if f + g == 0.0:
        raise LikelihoodError(f"observation {obs!r} has zero probability under both strategies")
    if g == 0.0:
        return math.inf
    if f == 0.0:
        return -math.inf
    return math.log(f) - math.log(g)


def emit_evidence(model: LikelihoodModel, y: int, rng: np.random.Generator) -> int:
    """Draw a synthetic evidence bit for true strategy ``y``."""
    if model.mode is not LikelihoodMode.SYNTHETIC:
        raise ValueError("evidence can only be emitted by a synthetic likelihood")
    return int(y) if rng.random() < model.separability else 1 - int(y)


def estimate_report_densities(
    params: DomainParams, n_draws: int, rng: np.random.Generator
) -> LikelihoodModel:
    """Monte Carlo f and g over report statistics for one hospital's pool."""
    if n_draws < 1:
        raise ValueError(f"n_draws must be positive, got {n_draws}")
    oracle = CrossmatchOracle(params.crossmatch_prob, int(rng.integers(2**63)))
    f: dict[tuple[int, int], int] = {}
    g: dict[tuple[int, int], int] = {}
    for j in range(n_draws):
        pool = sample_pool(params, 0, j + 1, rng, oracle)
        st = report_statistic(pool)
        f[st] = f.get(st, 0) + 1
        st = report_statistic(deviate(pool, oracle, rng)[1])
        g[st] = g.get(st, 0) + 1
    return LikelihoodModel.simulated({k: v / n_draws for k, v in f.items()}, {k: v / n_draws for k, v in g.items()})


# -- observed data ------------------------------------------------------------


@dataclass(frozen=True)
class ObservedReports:
    """What the analyst sees at one round: the assignment and one observation per agent.

    ``observations[i]`` was produced in world ``assignment[i]``.
    """

    round: int
    assignment: tuple[int, ...]
    observations: tuple[Observation, ...]

    def __post_init__(self) -> None:
        if len(self.assignment) != len(self.observations):
            raise ValueError("assignment and observations differ in length")
        if any(z not in (0, 1) for z in self.assignment):
            raise ValueError("assignment entries must be 0 or 1")
        obs = tuple(int(o) if np.ndim(o) == 0 else tuple(int(v) for v in o) for o in self.observations)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "assignment", tuple(int(z) for z in self.assignment))

    @property
    def n_agents(self) -> int:
        return len(self.assignment)

    def realized(self, z: int) -> list[int]:
        return [i for i, zi in enumerate(self.assignment) if zi == z]

    def permuted(self, perm: Sequence[int]) -> ObservedReports:
        """Agent ``perm[j]`` becomes agent ``j``."""
        return ObservedReports(
            self.round, tuple(self.assignment[p] for p in perm), tuple(self.observations[p] for p in perm)
        )

    def canonical_order(self) -> list[int]:
        """Agents sorted by (assignment, observation).

        Estimators draw randomness in this order, so relabeling agents leaves
        their estimand draws unchanged for a fixed seed.
        """
        return sorted(range(self.n_agents), key=lambda i: (self.assignment[i], _obs_key(self.observations[i])))


def _obs_key(obs: Observation) -> tuple[int, ...]:
    return obs if isinstance(obs, tuple) else (obs,)


# -- summaries ---------------------------------------------------------------------


class Method(str, enum.Enum):
    EMPIRICAL = "empirical"
    GAME_THEORETIC = "gt"


@dataclass(frozen=True, eq=False)
class PosteriorDraws:
    """Imputed strategy matrices ``draws[j, i, z]`` and their contrasts."""

    draws: NDArray[np.int8]
    estimand_draws: NDArray[np.float64]

    @property
    def marginals(self) -> NDArray[np.float64]:
        return self.draws.mean(axis=0)


@dataclass(frozen=True)
class EstimateSummary:
    method: str
    round: int
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    n_samples: int
    beta: float | None = None
    seed: int | None = None

    def to_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=2)


JSON_KEYS = ("method", "round", "mean", "sd", "q025", "q50", "q975", "n_samples", "beta", "seed")


def summarize(
    method: Method | str, t: int, estimand_draws: NDArray, beta: float | None = None, seed: int | None = None
) -> EstimateSummary:
    x = np.asarray(estimand_draws, dtype=float)
    q025, q50, q975 = np.quantile(x, [0.025, 0.5, 0.975])
    sd = float(x.std(ddof=1)) if len(x) > 1 else 0.0
    return EstimateSummary(
        Method(method).value, int(t), float(x.mean()), sd, float(q025), float(q50), float(q975), len(x), beta, seed
    )


def write_summary(summary: EstimateSummary, path: str | Path) -> None:
    Path(path).write_text(summary.to_json() + "\n")


def difference_in_means(y1: NDArray, y0: NDArray) -> NDArray:
    """Contrast per draw: mean of column M1 minus mean of column M0."""
    return y1.mean(axis=-1) - y0.mean(axis=-1)


def batch_means_se(x: NDArray, n_batches: int = 40) -> NDArray[np.float64]:
    """Monte Carlo standard error of a chain average by non-overlapping batch means.

    Works along axis 0, so ``x`` may hold several chains' worth of statistics.
    """
    x = np.asarray(x, dtype=float)
    b = len(x) // n_batches
    if b < 1:
        raise ValueError(f"need at least {n_batches} samples for {n_batches} batches")
    means = x[: b * n_batches].reshape(n_batches, b, *x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


# -- empirical method ------------------------------------------------------------


def empirical_estimate(
    observed: ObservedReports,
    model: LikelihoodModel,
    n_draws: int,
    rng: np.random.Generator,
    *,
    unrealized: str = "empirical",
    contrast: Contrast = difference_in_means,
    seed: int | None = None,
) -> tuple[EstimateSummary, PosteriorDraws]:
    """Uniform-prior imputation.

    Realized strategies are drawn from their uniform-prior posterior; each
    unrealized strategy in mechanism z is a Bernoulli draw with the truthful
    fraction of that draw's imputed realized strategies in z
    (``unrealized="coin"`` uses a fair coin instead).
    """
    if n_draws < 1:
        raise ValueError(f"n_draws must be positive, got {n_draws}")
    if unrealized not in ("empirical", "coin"):
        raise ValueError(f"unknown unrealized-imputation rule {unrealized!r}")
    n = observed.n_agents
    order = observed.canonical_order()
    y = np.zeros((n_draws, n, 2), dtype=np.int8)
    for z in (0, 1):
        real = [i for i in order if observed.assignment[i] == z]
        other = [i for i in order if observed.assignment[i] != z]
        if not real:
            raise ValueError(f"no observed reports for mechanism M{z}")
        post = np.array([posterior_uniform(model, observed.observations[i]) for i in real])
        u = rng.random((n_draws, n))
        y_real = u[:, : len(real)] < post
        frac = y_real.mean(axis=1) if unrealized == "empirical" else np.full(n_draws, 0.5)
        y[:, real, z] = y_real
        y[:, other, z] = u[:, len(real) :] < frac[:, None]
    est = np.asarray(contrast(y[:, :, 1].astype(float), y[:, :, 0].astype(float)), dtype=float)
    return summarize(Method.EMPIRICAL, observed.round, est, seed=seed), PosteriorDraws(y, est)


# -- game-theoretic method ----------------------------------------------------------


def qre_prior(beta: float, delta_u_value: float) -> float:
    """Logit response: probability of truthful reporting given its utility gain."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if beta == 0:
        return 0.5
    return float(expit(beta * delta_u_value))


def default_beta(table_m0: PayoffTable, span: float = DEFAULT_BETA_SPAN) -> float:
    """Sharpness at which the largest utility gap in the table has log-odds ``span``."""
    biggest = float(np.max(np.abs(table_m0.delta_u_vector)))
    if biggest == 0.0:
        raise ValueError("payoff table has no utility differences to calibrate beta on")
    return span / biggest


def _prior_log_odds(tables: Mapping, n: int, beta: float) -> list[NDArray[np.float64]]:
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    out = []
    for mech in (MechanismId.M0, MechanismId.M1):
        table = _table_for(tables, mech)
        if table.n_agents != n:
            raise ValueError(f"{mech.value} table covers {table.n_agents} agents, data has {n}")
        out.append(np.array([beta * delta_u(table, k) for k in range(n)]))
    return out


def _table_for(tables: Mapping, mech: MechanismId) -> PayoffTable:
    for key in (mech, mech.value, int(mech.value[1])):
        if key in tables:
            return tables[key]
    raise KeyError(f"no payoff table for {mech.value}")


def _llr_matrix(observed: ObservedReports, model: LikelihoodModel) -> NDArray[np.float64]:
    llr = np.zeros((observed.n_agents, 2))
    for i, (z, obs) in enumerate(zip(observed.assignment, observed.observations)):
        llr[i, z] = log_likelihood_ratio(model, obs)
    return llr


@dataclass(frozen=True, eq=False)
class GibbsDiagnostics:
    """Monte Carlo standard errors (batch means) of the chain averages."""

    mcse_mean: float
    mcse_marginals: NDArray[np.float64]


def gibbs_estimate(
    observed: ObservedReports,
    model: LikelihoodModel,
    tables: Mapping,
    beta: float,
    n_samples: int,
    burn_in: int,
    rng: np.random.Generator,
    *,
    contrast: Contrast = difference_in_means,
    seed: int | None = None,
    diagnostics: bool = False,
):
    """Gibbs sampler over the N x 2 strategy matrix with a logit-response prior.

    The prior for cell (i, z) is ``qre_prior(beta, delta_u(table_z, k))`` with
    k the number of other truthful agents in column z; a realized cell also
    multiplies in the likelihood of its observation. Columns are updated
    sequentially, z outer and agents in canonical order inner, starting from
    fair coins. Returns ``(summary, draws)``, plus a :class:`GibbsDiagnostics`
    when ``diagnostics`` is set.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if burn_in < 0:
        raise ValueError(f"burn_in must be non-negative, got {burn_in}")
    n = observed.n_agents
    prior = _prior_log_odds(tables, n, beta)
    llr = _llr_matrix(observed, model)
    order = observed.canonical_order()
    # cond[z][i][k] = P(y_iz = 1 | k other truthful agents in column z)
    with np.errstate(invalid="ignore"):
        cond = [[expit(prior[z] + llr[i, z]).tolist() for i in range(n)] for z in (0, 1)]

    total = burn_in + n_samples
    init = rng.random((2, n)) < 0.5
    cols = [[int(init[z, j]) for j in range(n)] for z in (0, 1)]  # indexed by canonical position
    counts = [sum(c) for c in cols]
    out = np.zeros((n_samples, n, 2), dtype=np.int8)
    order_arr = np.asarray(order)
    uniforms = rng.random((total, 2, n))
    for sweep in range(total):
        u_sweep = uniforms[sweep].tolist()
        for z in (0, 1):
            col, c, u_z, k_tot = cols[z], cond[z], u_sweep[z], counts[z]
            for pos in range(n):
                old = col[pos]
                new = 1 if u_z[pos] < c[order[pos]][k_tot - old] else 0
                col[pos] = new
                k_tot += new - old
            counts[z] = k_tot
        if sweep >= burn_in:
            j = sweep - burn_in
            out[j, order_arr, 0] = cols[0]
            out[j, order_arr, 1] = cols[1]
    est = np.asarray(contrast(out[:, :, 1].astype(float), out[:, :, 0].astype(float)), dtype=float)
    summary = summarize(Method.GAME_THEORETIC, observed.round, est, beta=float(beta), seed=seed)
    draws = PosteriorDraws(out, est)
    if not diagnostics:
        return summary, draws
    n_batches = min(40, n_samples)
    diag = GibbsDiagnostics(
        float(batch_means_se(est, n_batches)), batch_means_se(out.astype(float), n_batches)
    )
    return summary, draws, diag


@dataclass(frozen=True, eq=False)
class ExactPosterior:
    marginals: NDArray[np.float64]  # [i, z] = P(y_iz = 1 | observations)
    mean_delta: float


def exact_posterior(
    model: LikelihoodModel, tables: Mapping, observed: ObservedReports, beta: float
) -> ExactPosterior:
    """Enumerate the game-theoretic posterior; each column is an independent 2^N sum.

    The joint over one column is proportional to
    ``exp(beta * sum_{k < K} delta_u(k)) * prod_i L(obs_i | y_i)`` with K the
    column's truthful count, whose full conditionals are the sampler's.
    """
    n = observed.n_agents
    if n > MAX_EXACT_AGENTS:
        raise ValueError(f"exact enumeration supports at most {MAX_EXACT_AGENTS} agents, got {n}")
    prior = _prior_log_odds(tables, n, beta)
    configs = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    ks = configs.sum(axis=1)
    marg = np.zeros((n, 2))
    for z in (0, 1):
        potential = np.concatenate([[0.0], np.cumsum(prior[z])])
        logw = potential[ks]
        for i in observed.realized(z):
            obs = observed.observations[i]
            with np.errstate(divide="ignore"):
                l1, l0 = np.log([likelihood(model, obs, 1), likelihood(model, obs, 0)])
            logw = logw + np.where(configs[:, i] == 1, l1, l0)
        w = np.exp(logw - logsumexp(logw))
        marg[:, z] = np.clip(w @ configs, 0.0, 1.0)  # rounding can overshoot 1
    return ExactPosterior(marg, float(marg[:, 1].mean() - marg[:, 0].mean()))
