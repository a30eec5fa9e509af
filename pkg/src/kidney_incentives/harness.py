"""Experiment pipeline: payoff tables, two-world simulations, estimation, reports.

Each stage draws its randomness from its own branch of the master seed
(see :func:`kidney_incentives.config.replication_streams`), so rerunning a
stage alone or with a different worker count reproduces the same numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import tempfile
import time
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata, resources
from pathlib import Path
from typing import Any

import numpy as np

from kidney_incentives import dynamics, inference
from kidney_incentives.config import (
    SHIPPED,
    STAGE_DENSITIES,
    STAGE_EMPIRICAL,
    STAGE_GIBBS,
    STAGE_PAYOFFS,
    STAGE_SIMULATE,
    ConfigError,
    ExperimentConfig,
    replication_streams,
    stage_rng,
)
from kidney_incentives.mechanisms import MechanismId
from kidney_incentives.payoff import PayoffTable, estimate_payoff_tables, load_table, save_table

REPORT_COLUMNS = ("replication", "round", "agent", "mechanism", "evidence", "report_count", "report_over")
ESTIMATE_COLUMNS = ("replication", "mean", "sd", "q025", "q50", "q975")
DRAW_COLUMNS = ("replication", "draw", "delta")
MECHS = (MechanismId.M0, MechanismId.M1)


class MissingInputError(FileNotFoundError):
    """A required input artifact (table, reports file, run directory) is absent."""


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def map_ordered(fn: Callable, items: Sequence, workers: int) -> list:
    """``map`` over replications, optionally in worker processes; order is preserved."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# -- payoff tables ------------------------------------------------------------------


def shipped_table(mechanism: MechanismId | str) -> PayoffTable:
    mech = MechanismId(mechanism)
    res = resources.files("kidney_incentives.data").joinpath(f"shipped_{mech.value.lower()}.csv")
    with resources.as_file(res) as path:
        return load_table(path, mech)


def load_tables(cfg: ExperimentConfig) -> dict[MechanismId, PayoffTable]:
    tables = {}
    for mech, source in zip(MECHS, (cfg.table_m0, cfg.table_m1)):
        if source == SHIPPED:
            tables[mech] = shipped_table(mech)
        else:
            if not Path(source).exists():
                raise MissingInputError(f"payoff table for {mech.value} not found: {source}")
            tables[mech] = load_table(source, mech)
        if tables[mech].n_agents != cfg.n_hospitals:
            raise ConfigError(
                f"n_hospitals: payoff table for {mech.value} covers {tables[mech].n_agents} hospitals, "
                f"config has {cfg.n_hospitals}"
            )
    return tables


def dominance_summary(tables: dict[MechanismId, PayoffTable]) -> str:
    lines = []
    for mech, table in tables.items():
        du = table.delta_u_vector
        gains = " ".join(f"{v:+.2f}" for v in du)
        lines.append(
            f"{mech.value}: delta_u by truthful others = [{gains}]; "
            f"truthful weakly better in {int(np.sum(du >= 0))}/{len(du)}, deviating better in {int(np.sum(du < 0))}/{len(du)}"
        )
    return "\n".join(lines)


def run_payoffs(cfg: ExperimentConfig, out: Path) -> tuple[dict[MechanismId, PayoffTable], list[Path]]:
    rng = stage_rng(cfg.master_seed, STAGE_PAYOFFS)
    tables = estimate_payoff_tables(MECHS, cfg.domain_params, cfg.n_sims, rng)
    files = []
    for mech, table in tables.items():
        path = out / f"payoffs_{mech.value.lower()}.csv"
        save_table(table, path)
        files.append(path)
    return tables, files


# -- simulation ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    trajectory: dynamics.Trajectory
    evidence: tuple[int, ...]


def _simulate_replication(job: tuple[ExperimentConfig, dict, np.random.SeedSequence]) -> ReplicationResult:
    cfg, tables, seq = job
    sim_seq, evidence_seq = seq.spawn(2)
    traj = dynamics.simulate_worlds(
        cfg.domain_params,
        cfg.T,
        np.random.default_rng(sim_seq),
        reward_mode=cfg.reward_mode,
        tables=tables,
        sigma=cfg.reward_sigma,
        reward_bounds=cfg.reward_bounds,
        report_rounds={cfg.t1},
    )
    channel = inference.LikelihoodModel.synthetic(cfg.separability)
    obs = dynamics.observe(traj, cfg.t1, channel, np.random.default_rng(evidence_seq))
    return ReplicationResult(traj, obs.observations)


def simulate_replications(cfg: ExperimentConfig, tables: dict | None) -> list[ReplicationResult]:
    if tables is None:
        tables = load_tables(cfg)
    seqs = replication_streams(cfg.master_seed, STAGE_SIMULATE, cfg.replications)
    return map_ordered(_simulate_replication, [(cfg, tables, s) for s in seqs], cfg.workers)


def write_reports(results: Sequence[ReplicationResult], t: int, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r, res in enumerate(results):
            traj = res.trajectory
            for i, z in enumerate(traj.assignment.z):
                count, over = traj.report_stats[t - 1, i]
                writer.writerow([r, t, i, f"M{z}", res.evidence[i], count, over])


def run_simulate(
    cfg: ExperimentConfig, out: Path, tables: dict | None = None
) -> tuple[list[ReplicationResult], list[Path]]:
    results = simulate_replications(cfg, tables)
    out.mkdir(parents=True, exist_ok=True)
    trajs = [res.trajectory for res in results]
    files = [out / "estimands.csv", out / "bands.csv", out / "reports.csv", out / "truth.json"]
    dynamics.write_estimands(trajs, files[0])
    dynamics.write_bands(trajs, files[1])
    write_reports(results, cfg.t1, files[2])
    truth = ground_truth(trajs, cfg)
    files[3].write_text(json.dumps(truth, indent=2) + "\n")
    if cfg.write_trajectories:
        files.append(out / "trajectories.csv")
        dynamics.write_trajectories(trajs, files[-1])
    return results, files


def ground_truth(trajs: Sequence[dynamics.Trajectory], cfg: ExperimentConfig) -> dict[str, Any]:
    d1 = [dynamics.true_estimand(tr, cfg.t1) for tr in trajs]
    d2 = [dynamics.true_estimand(tr, cfg.t2) for tr in trajs]
    return {"t1": cfg.t1, "t2": cfg.t2, "delta_t1": float(np.mean(d1)), "delta_t2": float(np.mean(d2))}


# -- inference --------------------------------------------------------------------


def read_reports(path: Path, cfg: ExperimentConfig) -> list[inference.ObservedReports]:
    """Observed reports per replication, as evidence bits or report statistics per ``cfg.likelihood``."""
    if not path.exists():
        raise MissingInputError(f"reports file not found: {path}")
    rows: dict[int, list[dict[str, str]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(REPORT_COLUMNS)}")
        for row in reader:
            rows.setdefault(int(row["replication"]), []).append(row)
    observed = []
    for r in sorted(rows):
        group = sorted(rows[r], key=lambda row: int(row["agent"]))
        z = tuple(int(row["mechanism"][1]) for row in group)
        if cfg.likelihood == "synthetic":
            obs = tuple(int(row["evidence"]) for row in group)
        else:
            obs = tuple((int(row["report_count"]), int(row["report_over"])) for row in group)
            if any(c < 0 for c, _ in obs):
                raise ValueError(f"{path}: replication {r} has no recorded report statistics")
        observed.append(inference.ObservedReports(int(group[0]["round"]), z, obs))
    return observed


def likelihood_model(cfg: ExperimentConfig) -> inference.LikelihoodModel:
    if cfg.likelihood == "synthetic":
        return inference.LikelihoodModel.synthetic(cfg.separability)
    rng = stage_rng(cfg.master_seed, STAGE_DENSITIES)
    return inference.estimate_report_densities(cfg.domain_params, cfg.density_draws, rng)


def resolve_beta(cfg: ExperimentConfig, tables: dict[MechanismId, PayoffTable]) -> float:
    return cfg.beta if cfg.beta is not None else inference.default_beta(tables[MechanismId.M0])


def _infer_replication(job) -> inference.PosteriorDraws:
    method, cfg, model, tables, beta, observed, seq = job
    rng = np.random.default_rng(seq)
    if method == inference.Method.EMPIRICAL:
        return inference.empirical_estimate(observed, model, cfg.n_draws, rng)[1]
    return inference.gibbs_estimate(observed, model, tables, beta, cfg.n_samples, cfg.burn_in, rng)[1]


@dataclass(frozen=True, eq=False)
class InferenceResult:
    summary: inference.EstimateSummary
    per_replication: list[inference.EstimateSummary]
    draws: list[np.ndarray]


def infer(
    cfg: ExperimentConfig,
    observed: Sequence[inference.ObservedReports],
    method: inference.Method | str,
    tables: dict | None = None,
    model: inference.LikelihoodModel | None = None,
) -> InferenceResult:
    method = inference.Method(method)
    beta = None
    if method == inference.Method.GAME_THEORETIC:
        if tables is None:
            tables = load_tables(cfg)
        beta = resolve_beta(cfg, tables)
    if model is None:
        model = likelihood_model(cfg)
    stage = STAGE_EMPIRICAL if method == inference.Method.EMPIRICAL else STAGE_GIBBS
    seqs = replication_streams(cfg.master_seed, stage, len(observed))
    jobs = [(method, cfg, model, tables, beta, obs, s) for obs, s in zip(observed, seqs)]
    draws = map_ordered(_infer_replication, jobs, cfg.workers)
    t = observed[0].round if observed else cfg.t1
    per_rep = [inference.summarize(method, t, d.estimand_draws, beta) for d in draws]
    pooled = np.concatenate([d.estimand_draws for d in draws])
    summary = inference.summarize(method, t, pooled, beta, seed=cfg.master_seed)
    # the pooled mean equals the mean of replication means since every replication has n draws
    return InferenceResult(summary, per_rep, [d.estimand_draws for d in draws])


def write_inference(result: InferenceResult, out: Path, dump_draws: int) -> list[Path]:
    tag = result.summary.method
    out.mkdir(parents=True, exist_ok=True)
    files = [out / f"estimate_{tag}.json", out / f"estimates_{tag}.csv"]
    inference.write_summary(result.summary, files[0])
    with files[1].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ESTIMATE_COLUMNS)
        for r, s in enumerate(result.per_replication):
            writer.writerow([r, repr(s.mean), repr(s.sd), repr(s.q025), repr(s.q50), repr(s.q975)])
    if dump_draws:
        files.append(out / f"draws_{tag}.csv")
        with files[-1].open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(DRAW_COLUMNS)
            for r, x in enumerate(result.draws):
                keep = np.unique(np.linspace(0, len(x) - 1, min(dump_draws, len(x))).astype(int))
                for j in keep:
                    writer.writerow([r, int(j), repr(float(x[j]))])
    return files


def run_infer(cfg: ExperimentConfig, out: Path, reports_path: Path, method: str) -> tuple[InferenceResult, list[Path]]:
    observed = read_reports(reports_path, cfg)
    if not observed:
        raise ValueError(f"{reports_path}: no reports")
    result = infer(cfg, observed, method)
    return result, write_inference(result, out, cfg.dump_draws)


# -- end-to-end experiment ---------------------------------------------------------


def comparison_report(truth: dict[str, Any], empirical: InferenceResult, gt: InferenceResult) -> dict[str, Any]:
    d1, d2 = truth["delta_t1"], truth["delta_t2"]
    e, g = empirical.summary.mean, gt.summary.mean
    gap = d2 - d1
    return {
        **truth,
        "empirical": empirical.summary.to_record(),
        "gt": gt.summary.to_record(),
        "empirical_error": e - d1,
        "gt_error_t1": g - d1,
        "gt_error_t2": g - d2,
        # 0 = centred on the short-term truth, 1 = on the long-term truth
        "gt_shrinkage": (g - d1) / gap if gap != 0 else None,
        "gt_between_truths": bool(min(d1, d2) < g < max(d1, d2)),
        "gt_minus_empirical": g - e,
    }


def run_experiment(cfg: ExperimentConfig, out: Path) -> tuple[dict[str, Any], list[Path]]:
    out.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    if cfg.estimate_payoffs:
        tables, written = run_payoffs(cfg, out)
        files += written
    else:
        tables = load_tables(cfg)
    results, written = run_simulate(cfg, out, tables)
    files += written
    model = likelihood_model(cfg)
    if cfg.likelihood == "synthetic":
        observed = [
            inference.ObservedReports(cfg.t1, res.trajectory.assignment.z, res.evidence) for res in results
        ]
    else:
        observed = [dynamics.observe(res.trajectory, cfg.t1, model) for res in results]
    outcomes = {}
    for method in inference.Method:
        outcomes[method] = infer(cfg, observed, method, tables, model)
        files += write_inference(outcomes[method], out, cfg.dump_draws)
    truth = ground_truth([res.trajectory for res in results], cfg)
    report = comparison_report(truth, outcomes[inference.Method.EMPIRICAL], outcomes[inference.Method.GAME_THEORETIC])
    files.append(out / "comparison.json")
    files[-1].write_text(json.dumps(report, indent=2) + "\n")
    return report, files


def format_comparison(report: dict[str, Any]) -> str:
    e, g = report["empirical"], report["gt"]
    lines = [
        f"ground truth: delta({report['t1']}) = {report['delta_t1']:.3f}, delta({report['t2']}) = {report['delta_t2']:.3f}",
        f"empirical estimate: mean {e['mean']:.3f} (sd {e['sd']:.3f}, 95% [{e['q025']:.3f}, {e['q975']:.3f}])",
        f"game-theoretic estimate: mean {g['mean']:.3f} (sd {g['sd']:.3f}, 95% [{g['q025']:.3f}, {g['q975']:.3f}], beta {g['beta']:.3f})",
        f"empirical minus delta({report['t1']}): {report['empirical_error']:+.3f}",
    ]
    if report.get("gt_shrinkage") is not None:
        lines.append(
            f"game-theoretic shrinkage toward delta({report['t2']}): {report['gt_shrinkage']:.2f} "
            f"({'between' if report['gt_between_truths'] else 'outside'} the two truths)"
        )
    return "\n".join(lines)


# -- manifest ------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    out: Path, cfg: ExperimentConfig, command: str, artifacts: Iterable[Path], wall_clock: float
) -> Path:
    """Write ``manifest.json`` atomically; feeding it back as ``--config`` reruns the same job."""
    manifest = {
        "command": command,
        "version": package_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "seeds": {
            "master_seed": cfg.master_seed,
            "scheme": "numpy SeedSequence(master_seed, spawn_key=(stage, replication))",
            "stages": {"payoffs": STAGE_PAYOFFS, "simulate": STAGE_SIMULATE, "empirical": STAGE_EMPIRICAL,
                       "gt": STAGE_GIBBS, "densities": STAGE_DENSITIES},
        },
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
        "wall_clock_seconds": round(wall_clock, 3),
    }
    target = out / "manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest.", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    os.chmod(tmp, 0o644)
    os.replace(tmp, target)
    return target


def timed(fn: Callable, *args) -> tuple[Any, float]:
    start = time.perf_counter()
    result = fn(*args)
    return result, time.perf_counter() - start
