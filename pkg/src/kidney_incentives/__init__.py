"""Simulation and causal inference for hospital incentives in kidney exchange.

Hospitals choose between reporting all their incompatible pairs to a central
exchange or matching some internally first. The package simulates how
learning hospitals behave under two exchange mechanisms and estimates the
long-run effect of the mechanism on truthful reporting from short-run data.
"""

from kidney_incentives.domain import BloodType, DomainParams, PairCategory, Pool, Report, deviate, sample_pool
from kidney_incentives.dynamics import Trajectory, simulate_worlds, true_estimand
from kidney_incentives.inference import (
    LikelihoodModel,
    ObservedReports,
    empirical_estimate,
    exact_posterior,
    gibbs_estimate,
    qre_prior,
)
from kidney_incentives.matching import max_matching
from kidney_incentives.mechanisms import MechanismId, run_m0, run_m1
from kidney_incentives.payoff import PayoffTable, delta_u, load_table, save_table

__all__ = [
    "BloodType",
    "DomainParams",
    "LikelihoodModel",
    "MechanismId",
    "ObservedReports",
    "PairCategory",
    "PayoffTable",
    "Pool",
    "Report",
    "Trajectory",
    "delta_u",
    "deviate",
    "empirical_estimate",
    "exact_posterior",
    "gibbs_estimate",
    "load_table",
    "max_matching",
    "qre_prior",
    "run_m0",
    "run_m1",
    "sample_pool",
    "save_table",
    "simulate_worlds",
    "true_estimand",
]
