from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kidney_incentives.domain import CrossmatchOracle, DomainParams, Report, deviate, sample_pool
from kidney_incentives.matching import build_graph, max_matching
from kidney_incentives.mechanisms import (
    MechanismId,
    RoundOutcome,
    hospital_utility,
    proportional_allocation,
    run_m0,
    run_m1,
    run_mechanism,
)


def round_reports(seed: int, n: int = 4, m: int = 8, truthful=None):
    rng = np.random.default_rng(seed)
    oracle = CrossmatchOracle(0.11, seed)
    params = DomainParams(pool_size=m, n_hospitals=n)
    reports, internal = [], []
    for h in range(n):
        pool = sample_pool(params, h, 1, rng, oracle)
        if truthful is None or truthful[h]:
            reports.append(pool.as_report())
            internal.append(0)
        else:
            k, rep = deviate(pool, oracle, rng)
            reports.append(rep)
            internal.append(k)
    return reports, internal, oracle


@settings(max_examples=200)
@given(seed=st.integers(0, 2**32 - 1), truthful=st.lists(st.booleans(), min_size=4, max_size=4))
def test_outcomes_are_consistent(seed, truthful):
    reports, internal, oracle = round_reports(seed, truthful=truthful)
    m0 = run_m0(reports, np.random.default_rng(seed), oracle)
    m1 = run_m1(reports, np.random.default_rng(seed), oracle)
    best = max_matching(build_graph([r for r in reports if len(r)], oracle)).size
    assert m0.total_matched == 2 * best
    assert m1.total_matched % 2 == 0
    assert m1.total_matched <= m0.total_matched
    for out in (m0, m1):
        assert all(0 <= c <= len(r) for c, r in zip(out.matched_per_hospital, reports))
        util = hospital_utility(out, internal)
        assert np.all(util <= 8)


def test_empty_reports():
    reports = [Report(h, 1, [], [], []) for h in range(3)]
    for mech in MechanismId:
        assert run_mechanism(mech, reports, np.random.default_rng(0)).matched_per_hospital == (0, 0, 0)


def test_mechanisms_are_seeded():
    reports, _, oracle = round_reports(11)
    for mech in MechanismId:
        a = run_mechanism(mech, reports, np.random.default_rng(3), oracle)
        b = run_mechanism(mech, reports, np.random.default_rng(3), oracle)
        assert a == b


@settings(max_examples=300)
@given(
    weights=st.lists(st.integers(0, 20), min_size=1, max_size=8),
    total=st.integers(0, 40),
    seed=st.integers(0, 1000),
)
def test_proportional_allocation(weights, total, seed):
    alloc = proportional_allocation(weights, total, np.random.default_rng(seed))
    if sum(weights) == 0:
        assert alloc.sum() == 0
        return
    assert alloc.sum() == total
    exact = total * np.asarray(weights) / sum(weights)
    assert np.all(np.abs(alloc - exact) < 1)


def test_hospital_utility_checks_lengths():
    with pytest.raises(ValueError):
        hospital_utility(RoundOutcome((1, 2)), [0])
    assert hospital_utility(RoundOutcome((2, 0)), [4, 2]).tolist() == [6.0, 2.0]
