"""Command-line entry point: ``kidney-incentives {payoffs,simulate,infer,experiment,report}``.

Exit codes: 0 success, 2 configuration error, 3 missing input artifact,
4 internal failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from pathlib import Path

from kidney_incentives import harness
from kidney_incentives.config import (
    FIELD_TYPES,
    PRESETS,
    ConfigError,
    ExperimentConfig,
    build_config,
    load_config_values,
    parse_value,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_INTERNAL = 0, 2, 3, 4


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", help=f"config file, run manifest, or preset name ({', '.join(PRESETS)})")
    parent.add_argument("--seed", type=int, help="master seed (same as --master_seed)")
    parent.add_argument("--out", help="output directory (same as --output_dir)")
    keys = parent.add_argument_group("configuration keys (override the config file)")
    for key, kind in FIELD_TYPES.items():
        keys.add_argument(f"--{key}", dest=f"key_{key}", metavar=kind.split(" ")[0].upper())
    return parent


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kidney-incentives", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_options()
    sub.add_parser("payoffs", parents=[common], help="estimate payoff tables for both mechanisms")
    sub.add_parser("simulate", parents=[common], help="simulate learning dynamics in both worlds")
    p = sub.add_parser("infer", parents=[common], help="estimate the effect from stored reports")
    p.add_argument("--reports", required=True, help="reports CSV written by 'simulate'")
    p.add_argument("--method", choices=("empirical", "gt"), required=True)
    sub.add_parser("experiment", parents=[common], help="tables, simulation and both estimators end to end")
    p = sub.add_parser("report", help="print the comparison of a finished experiment")
    p.add_argument("--out", required=True, help="experiment output directory")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = load_config_values(args.config) if args.config else {}
    for key in FIELD_TYPES:
        text = getattr(args, f"key_{key}", None)
        if text is not None:
            values[key] = parse_value(key, text)
    if args.seed is not None:
        values["master_seed"] = args.seed
    if args.out is not None:
        values["output_dir"] = args.out
    return build_config(values)


def _run(args: argparse.Namespace) -> int:
    if args.command == "report":
        out = Path(args.out)
        path = out / "comparison.json"
        if not path.exists():
            raise harness.MissingInputError(f"no comparison report in {out}; run 'experiment' first")
        print(harness.format_comparison(json.loads(path.read_text())))
        return EXIT_OK

    cfg = resolve_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if args.command == "payoffs":
        tables, files = harness.run_payoffs(cfg, out)
        print(harness.dominance_summary(tables))
    elif args.command == "simulate":
        results, files = harness.run_simulate(cfg, out)
        truth = json.loads((out / "truth.json").read_text())
        print(
            f"{cfg.replications} replications: mean delta({cfg.t1}) = {truth['delta_t1']:.3f}, "
            f"mean delta({cfg.t2}) = {truth['delta_t2']:.3f}"
        )
    elif args.command == "infer":
        result, files = harness.run_infer(cfg, out, Path(args.reports), args.method)
        print(result.summary.to_json())
    else:
        report, files = harness.run_experiment(cfg, out)
        print(harness.format_comparison(report))
    harness.write_manifest(out, cfg, args.command, files, time.perf_counter() - start)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        traceback.print_exc(file=sys.stderr)
        print(f"internal failure during '{args.command}': {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
