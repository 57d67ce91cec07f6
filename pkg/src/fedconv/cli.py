"""Command-line entry point.

    fedconv run --config FILE [--rounds N] [--seed S] [--out DIR]
    fedconv partition-stats --config FILE
    fedconv ablate --config FILE --mode {naive-agg,no-pretrain,fedavg-baseline,pruning-mi}

Exit status is 0 on success, 1 for a configuration error (including bad
arguments) and 2 for any failure while running.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import diagnostics as diag
from . import federation as fed
from .config import ExperimentConfig, dump_config, load_config
from .data import emit_metrics
from .errors import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedconv", description="Federated learning with convolutional model compression.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federated experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--rounds", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="checkpoint directory (round_<r>/...)")
    run.add_argument("--metrics", choices=("json", "csv"), help="also write metrics.<fmt> into --out")

    stats = sub.add_parser("partition-stats", help="print per-client class histograms")
    stats.add_argument("--config", required=True)

    ablate = sub.add_parser("ablate", help="run one ablation and print a comparison table")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--mode", required=True, choices=diag.ABLATION_MODES)
    ablate.add_argument("--rounds", type=int)
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--out", help="write the full result as JSON to this file")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        if args.rounds < 0:
            raise ConfigurationError("--rounds must be >= 0")
        changes["rounds"] = args.rounds
    return cfg.replace(**changes) if changes else cfg


def _fmt(value) -> str:
    return "-" if value is None else f"{value:.4f}"


def cmd_run(args, out) -> None:
    cfg = _config(args)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out_dir / "config.yaml")

    def progress(report):
        print(f"round {report['round']:3d}  global_acc {_fmt(report['global_accuracy'])}  "
              f"mean_client_acc {_fmt(report['mean_client_accuracy'])}  {report['seconds']:.1f}s", file=out, flush=True)

    reports = fed.run_experiment(cfg, out_dir, progress=progress)
    if out_dir is not None and args.metrics and reports:
        emit_metrics(reports, out_dir / f"metrics.{args.metrics}", args.metrics)


def cmd_partition_stats(args, out) -> None:
    cfg = _config(args)
    rows = fed.partition_stats(cfg)
    width = len(rows[0]["classes"])
    print("client  sr     samples  " + " ".join(f"c{c:<4d}" for c in range(width)), file=out)
    for row in rows:
        hist = " ".join(f"{n:<5d}" for n in row["classes"])
        print(f"{row['client']:<7d} {row['sr']:<6.2f} {row['samples']:<8d} {hist}", file=out)


def _final(reports, key):
    return reports[-1][key] if reports else None


def cmd_ablate(args, out) -> None:
    cfg = _config(args)
    if args.mode == "pruning-mi":
        rows = diag.pruning_mi_study(cfg)
        print(f"{'model':<16} {'MI (bits)':>10} {'accuracy':>9} {'params':>8}", file=out)
        for name, row in rows.items():
            print(f"{name:<16} {row['mi_bits']:>10.4f} {row['accuracy']:>9.4f} {row['params']:>8d}", file=out)
        result = rows
    else:
        runs = diag.ablation_runs(cfg, args.mode)
        print(f"{'arm':<12} {'rounds':>6} {'global_acc':>11} {'mean_client_acc':>16}", file=out)
        for name, reports in runs.items():
            print(f"{name:<12} {len(reports):>6d} {_fmt(_final(reports, 'global_accuracy')):>11} "
                  f"{_fmt(_final(reports, 'mean_client_accuracy')):>16}", file=out)
        result = {k: [fed.deterministic_view(r) for r in v] for k, v in runs.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True))


COMMANDS = {"run": cmd_run, "partition-stats": cmd_partition_stats, "ablate": cmd_ablate}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
    except _ArgumentError as exc:
        print(f"fedconv: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](args, out)
    except ConfigurationError as exc:
        print(f"fedconv: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        print(f"fedconv: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
