"""Kidney-exchange domain: blood types, donor/patient pairs, hospital pools.

A hospital's type in a round is the set of internally incompatible
donor/patient pairs it holds. Pools are sampled by rejection (distribution F)
and the deviation strategy matches pairs internally before reporting the
remainder (distribution G).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

DEFAULT_BLOOD_FREQS: tuple[float, float, float, float] = (0.48, 0.34, 0.14, 0.04)
DEFAULT_CROSSMATCH_PROB = 0.11
DEFAULT_POOL_SIZE = 24
MAX_ATTEMPTS_PER_PAIR = 10_000

# uid = hospital * UID_STRIDE + attempt index, unique within a round-world
UID_STRIDE = 1 << 32


class BloodType(enum.IntEnum):
    O = 0
    A = 1
    B = 2
    AB = 3

    @property
    def antigens(self) -> int:
        # bit 0 = A antigen, bit 1 = B antigen
        return int(self)


class PairCategory(enum.Enum):
    OVER_DEMANDED = "OverDemanded"
    UNDER_DEMANDED = "UnderDemanded"
    RECIPROCAL = "Reciprocal"
    SELF_DEMANDED = "SelfDemanded"


# ABO_TABLE[donor, patient]: donor antigens must be a subset of patient antigens
ABO_TABLE: NDArray[np.bool_] = np.array(
    [[(d & ~p) == 0 for p in range(4)] for d in range(4)], dtype=bool
)

# integer codes used in vectorised category arrays
CAT_OVER, CAT_UNDER, CAT_RECIPROCAL, CAT_SELF = 0, 1, 2, 3
_CAT_ENUM = {
    CAT_OVER: PairCategory.OVER_DEMANDED,
    CAT_UNDER: PairCategory.UNDER_DEMANDED,
    CAT_RECIPROCAL: PairCategory.RECIPROCAL,
    CAT_SELF: PairCategory.SELF_DEMANDED,
}


def _category_code(donor: int, patient: int) -> int:
    if donor == patient:
        return CAT_SELF
    if {donor, patient} == {BloodType.A, BloodType.B}:
        return CAT_RECIPROCAL
    if ABO_TABLE[donor, patient]:
        return CAT_OVER
    return CAT_UNDER


CATEGORY_TABLE: NDArray[np.int8] = np.array(
    [[_category_code(d, p) for p in range(4)] for d in range(4)], dtype=np.int8
)


def blood_compatible(donor: BloodType, patient: BloodType) -> bool:
    """ABO compatibility: O gives to all, AB receives from all."""
    return bool(ABO_TABLE[int(donor), int(patient)])


@dataclass(frozen=True)
class DomainParams:
    blood_freqs: tuple[float, float, float, float] = DEFAULT_BLOOD_FREQS
    crossmatch_prob: float = DEFAULT_CROSSMATCH_PROB
    pool_size: int = DEFAULT_POOL_SIZE
    n_hospitals: int = 8

    def __post_init__(self) -> None:
        freqs = tuple(float(f) for f in self.blood_freqs)
        if len(freqs) != 4 or any(f < 0 for f in freqs):
            raise ValueError(f"blood_freqs must be 4 non-negative values, got {self.blood_freqs}")
        if abs(sum(freqs) - 1.0) > 1e-12:
            raise ValueError(f"blood_freqs must sum to 1 (got {sum(freqs)!r})")
        if not 0.0 <= self.crossmatch_prob <= 1.0:
            raise ValueError(f"crossmatch_prob must lie in [0, 1], got {self.crossmatch_prob}")
        if self.pool_size < 0:
            raise ValueError(f"pool_size must be non-negative, got {self.pool_size}")
        if self.n_hospitals < 1:
            raise ValueError(f"n_hospitals must be positive, got {self.n_hospitals}")
        object.__setattr__(self, "blood_freqs", freqs)


# -- keyed counter-based crossmatch draws -----------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: NDArray[np.uint64]) -> NDArray[np.uint64]:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def crossmatch_uniform(
    donor_uid: NDArray | int, patient_uid: NDArray | int, round: int, world_seed: int
) -> NDArray[np.float64]:
    """Uniform(0,1) keyed on (donor uid, patient uid, round, world seed)."""
    d = np.asarray(donor_uid, dtype=np.uint64)
    p = np.asarray(patient_uid, dtype=np.uint64)
    h = _splitmix(np.asarray(world_seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
    h = _splitmix(h ^ np.uint64(round & 0xFFFFFFFFFFFFFFFF))
    # donor and patient enter at different depths so the key is ordered
    h = _splitmix(_splitmix(h ^ d) ^ p)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def crossmatch(
    donor_pair_uid: int,
    patient_pair_uid: int,
    round: int,
    world_seed: int,
    crossmatch_prob: float = DEFAULT_CROSSMATCH_PROB,
) -> bool:
    """True when the crossmatch is positive, i.e. the patient rejects the donor."""
    u = crossmatch_uniform(donor_pair_uid, patient_pair_uid, round, world_seed)
    return bool(u < crossmatch_prob)


@dataclass(frozen=True)
class CrossmatchOracle:
    """Shared source of crossmatch results for one simulated world.

    Results depend only on the arguments, so tests run by a hospital and by
    the central mechanism always agree.
    """

    crossmatch_prob: float = DEFAULT_CROSSMATCH_PROB
    world_seed: int = 0

    def positive(self, donor_uids, patient_uids, round: int) -> NDArray[np.bool_]:
        return crossmatch_uniform(donor_uids, patient_uids, round, self.world_seed) < self.crossmatch_prob

    def __call__(self, donor_uid: int, patient_uid: int, round: int) -> bool:
        return bool(self.positive(donor_uid, patient_uid, round))


# -- pairs, pools, reports ----------------------------------------------------


@dataclass(frozen=True)
class Pair:
    uid: int
    donor_bt: BloodType
    patient_bt: BloodType
    hospital: int


def _frozen_array(values, dtype) -> NDArray:
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PairSet:
    """Column-oriented set of pairs held by one hospital in one round."""

    hospital: int
    round: int
    uids: NDArray[np.int64] = field(repr=False)
    donor: NDArray[np.int8] = field(repr=False)
    patient: NDArray[np.int8] = field(repr=False)

    def __post_init__(self) -> None:
        for name, dtype in (("uids", np.int64), ("donor", np.int8), ("patient", np.int8)):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), dtype))
        if not (len(self.uids) == len(self.donor) == len(self.patient)):
            raise ValueError("uids, donor and patient columns differ in length")

    def __len__(self) -> int:
        return len(self.uids)

    @property
    def pairs(self) -> tuple[Pair, ...]:
        return tuple(
            Pair(int(u), BloodType(int(d)), BloodType(int(p)), self.hospital)
            for u, d, p in zip(self.uids, self.donor, self.patient)
        )

    @property
    def categories(self) -> NDArray[np.int8]:
        return CATEGORY_TABLE[self.donor, self.patient]

    def subset(self, mask: NDArray[np.bool_]) -> Report:
        return Report(self.hospital, self.round, self.uids[mask], self.donor[mask], self.patient[mask])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PairSet):
            return NotImplemented
        return (
            self.hospital == other.hospital
            and self.round == other.round
            and np.array_equal(self.uids, other.uids)
            and np.array_equal(self.donor, other.donor)
            and np.array_equal(self.patient, other.patient)
        )

    __hash__ = None  # type: ignore[assignment]


class Pool(PairSet):
    """The sampled type of a hospital: all of its pairs this round."""

    def as_report(self) -> Report:
        return Report(self.hospital, self.round, self.uids, self.donor, self.patient)


class Report(PairSet):
    """What a hospital submits to a mechanism; always a subset of its pool."""


def categorize(pair: Pair) -> PairCategory:
    return _CAT_ENUM[int(CATEGORY_TABLE[int(pair.donor_bt), int(pair.patient_bt)])]


def sample_pool(
    params: DomainParams,
    hospital: int,
    round: int,
    rng: np.random.Generator,
    oracle: CrossmatchOracle | None = None,
    max_attempts_per_pair: int = MAX_ATTEMPTS_PER_PAIR,
) -> Pool:
    """Draw ``params.pool_size`` internally incompatible pairs for one hospital.

    Candidate pairs get independent donor and patient blood types; a candidate
    enters the pool only if it is blood-type incompatible or its own
    crossmatch is positive.
    """
    if oracle is None:
        oracle = CrossmatchOracle(params.crossmatch_prob)
    m = params.pool_size
    cap = max_attempts_per_pair * max(m, 1)
    probs = np.asarray(params.blood_freqs)
    base = hospital * UID_STRIDE
    uids: list[NDArray] = []
    donors: list[NDArray] = []
    patients: list[NDArray] = []
    have = 0
    attempts = 0
    while have < m:
        if attempts >= cap:
            raise RuntimeError(
                f"rejection sampling exceeded {cap} attempts for hospital {hospital} "
                f"(accepted {have}/{m}); parameters admit almost no incompatible pairs: "
                f"blood_freqs={params.blood_freqs}, crossmatch_prob={params.crossmatch_prob}"
            )
        batch = min(max(2 * (m - have) + 8, 16), cap - attempts)
        cand_uid = base + attempts + np.arange(batch, dtype=np.int64)
        d = rng.choice(4, size=batch, p=probs).astype(np.int8)
        p = rng.choice(4, size=batch, p=probs).astype(np.int8)
        attempts += batch
        accept = ~ABO_TABLE[d, p] | oracle.positive(cand_uid, cand_uid, round)
        idx = np.flatnonzero(accept)[: m - have]
        uids.append(cand_uid[idx])
        donors.append(d[idx])
        patients.append(p[idx])
        have += len(idx)
    if m == 0:
        return Pool(hospital, round, np.empty(0, np.int64), np.empty(0, np.int8), np.empty(0, np.int8))
    return Pool(hospital, round, np.concatenate(uids), np.concatenate(donors), np.concatenate(patients))


def deviate(
    pool: Pool, crossmatch_oracle: CrossmatchOracle, rng: np.random.Generator
) -> tuple[int, Report]:
    """Match the pool internally and report only the unmatched remainder.

    Returns ``(internal_match_count, report)`` where the count is the number
    of matched pairs (twice the number of internal exchanges).
    """
    from kidney_incentives.matching import build_graph, matched_mask

    matched = matched_mask(build_graph([pool], crossmatch_oracle), rng)
    return int(matched.sum()), pool.subset(~matched)
