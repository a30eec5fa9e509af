"""Experiment configuration: a flat ``key = value`` text format with typed defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from kidney_incentives.domain import DEFAULT_BLOOD_FREQS, DEFAULT_CROSSMATCH_PROB, DEFAULT_POOL_SIZE, DomainParams

SHIPPED = "shipped"
PRESETS = ("experiment-strong", "experiment-weak")

# stage codes keep each pipeline stage on its own branch of the seed tree
STAGE_PAYOFFS = 1
STAGE_SIMULATE = 2
STAGE_EMPIRICAL = 3
STAGE_GIBBS = 4
STAGE_DENSITIES = 5


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    n_hospitals: int = 8
    pool_size: int = DEFAULT_POOL_SIZE
    blood_freqs: tuple[float, ...] = DEFAULT_BLOOD_FREQS
    crossmatch_prob: float = DEFAULT_CROSSMATCH_PROB
    T: int = 100
    t1: int = 5
    t2: int = 100
    replications: int = 100
    reward_mode: str = "table"
    reward_sigma: float = 2.5
    reward_lo: float | None = None
    reward_hi: float | None = None
    table_m0: str = SHIPPED
    table_m1: str = SHIPPED
    estimate_payoffs: bool = False
    n_sims: int = 10_000
    likelihood: str = "synthetic"
    separability: float = 0.95
    density_draws: int = 20_000
    beta: float | None = None
    burn_in: int = 500
    n_samples: int = 2000
    n_draws: int = 2000
    dump_draws: int = 100
    write_trajectories: bool = True
    master_seed: int = 0
    output_dir: str = "out"
    workers: int = 1

    def __post_init__(self) -> None:
        def bad(key: str, why: str) -> ConfigError:
            return ConfigError(f"{key}: {why} (got {getattr(self, key)!r})")

        if self.n_hospitals < 2 or self.n_hospitals % 2:
            raise bad("n_hospitals", "must be a positive even number")
        if self.pool_size < 0:
            raise bad("pool_size", "must be non-negative")
        if self.T < 1:
            raise bad("T", "must be at least 1")
        if not 1 <= self.t1 <= self.t2:
            raise bad("t1", "must satisfy 1 <= t1 <= t2")
        if self.t2 > self.T:
            raise bad("t2", "must not exceed T")
        for key in ("replications", "n_sims", "density_draws", "n_samples", "n_draws", "workers"):
            if getattr(self, key) < 1:
                raise bad(key, "must be at least 1")
        for key in ("burn_in", "dump_draws"):
            if getattr(self, key) < 0:
                raise bad(key, "must be non-negative")
        if self.reward_mode not in ("table", "simulated"):
            raise bad("reward_mode", "must be 'table' or 'simulated'")
        if self.likelihood not in ("synthetic", "simulated"):
            raise bad("likelihood", "must be 'synthetic' or 'simulated'")
        if not 0.5 <= self.separability <= 1.0:
            raise bad("separability", "must lie in [0.5, 1]")
        if self.reward_sigma < 0:
            raise bad("reward_sigma", "must be non-negative")
        if self.beta is not None and self.beta < 0:
            raise bad("beta", "must be non-negative")
        if (self.reward_lo is None) != (self.reward_hi is None):
            raise bad("reward_lo", "reward_lo and reward_hi must be set together")
        if self.reward_lo is not None and not self.reward_hi > self.reward_lo:
            raise bad("reward_hi", "must exceed reward_lo")
        try:
            self.domain_params
        except ValueError as exc:
            key = "blood_freqs" if "blood_freqs" in str(exc) else "crossmatch_prob"
            raise ConfigError(f"{key}: {exc}") from None

    @property
    def domain_params(self) -> DomainParams:
        return DomainParams(self.blood_freqs, self.crossmatch_prob, self.pool_size, self.n_hospitals)

    @property
    def reward_bounds(self) -> tuple[float, float] | None:
        return None if self.reward_lo is None else (self.reward_lo, self.reward_hi)

    def replace(self, **changes: Any) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["blood_freqs"] = list(self.blood_freqs)
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def format_value(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def parse_value(key: str, text: str) -> Any:
    """Convert the text of one config entry to the field's type."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"{key}: unknown configuration key")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() in ("auto", "none", "") else float(text)
        if kind.startswith("tuple"):
            return tuple(float(v) for v in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        values[key.strip()] = parse_value(key.strip(), value)
    return values


def build_config(values: dict[str, Any]) -> ExperimentConfig:
    unknown = set(values) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration key")
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config_values(path: str | Path) -> dict[str, Any]:
    """Read a config file, a preset name, or the config snapshot inside a run manifest."""
    if str(path) in PRESETS:
        text = resources.files("kidney_incentives.data").joinpath(f"{path}.cfg").read_text()
        return parse_config_text(text, str(path))
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    if path.suffix == ".json":
        snapshot = json.loads(path.read_text())
        snapshot = snapshot.get("config", snapshot)
        if "blood_freqs" in snapshot:
            snapshot["blood_freqs"] = tuple(snapshot["blood_freqs"])
        return snapshot
    return parse_config_text(path.read_text(), str(path))


def replication_streams(master_seed: int, stage: int, n: int) -> list[np.random.SeedSequence]:
    """Independent seed sequences for replications 0..n-1 of one pipeline stage.

    Replication r of stage s always gets ``SeedSequence(master_seed,
    spawn_key=(s, r))``, independent of how many replications run.
    """
    return [np.random.SeedSequence(master_seed, spawn_key=(stage, r)) for r in range(n)]


def stage_rng(master_seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(stage,)))
