"""Kommandozeile: train, unlearn, evaluate, compare, backdoor, confusion, stability, run."""

import argparse
import logging
import os
import sys
from typing import List, Optional

from unlearnlab import harness
from unlearnlab.errors import ConfigInvalid, LabError
from unlearnlab.models.experiment_config import load_experiment_config
from unlearnlab.models.report import ComparisonTable, METRIC_FIELDS
from unlearnlab.unified_logger import log_critical, log_error, setup_module_loggers

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

COMMANDS = ["run", "train", "unlearn", "evaluate", "compare", "backdoor", "confusion", "stability"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearn_lab", description="Machine-Unlearning-Experimente")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="Experiment-Konfiguration (JSON)")
        p.add_argument("--seed", type=int, default=None, help="Nur diesen Seed ausführen")
        p.add_argument("--out", type=str, default=None, help="Ausgabeverzeichnis")
        if name == "stability":
            p.add_argument("--multipliers", type=int, nargs="+", default=None,
                           help="Budget-Vielfache, z.B. 1 5")
    return parser


def print_summary(table: ComparisonTable) -> None:
    """Kurze Mittelwert-Übersicht auf stdout."""
    header = ["method"] + METRIC_FIELDS
    print("  ".join(f"{h:>10}" for h in header))
    for method in table.methods:
        means = table.mean(method)
        cells = ["-" if means[f] is None else f"{means[f]:.4f}" for f in METRIC_FIELDS]
        print("  ".join(f"{c:>10}" for c in [method[:10]] + cells))


def compare(out_dir: str) -> ComparisonTable:
    path = os.path.join(out_dir, "table.json")
    if not os.path.exists(path):
        raise ConfigInvalid(f"no table.json in {out_dir}; run 'evaluate' or 'run' first")
    table = harness.compare_to_retrained(ComparisonTable.load_json(path))
    harness.write_table(table, out_dir)
    return table


def dispatch(args: argparse.Namespace) -> None:
    cfg = load_experiment_config(args.config).with_overrides(seed=args.seed, output_dir=args.out)
    logger.info(f"{args.command}: seeds={list(cfg.seeds)} out={cfg.output_dir}")

    if args.command == "run":
        print_summary(harness.run_experiment(cfg))
    elif args.command == "train":
        for seed, paths in harness.train_models(cfg).items():
            print(f"✅ Seed {seed}: {paths[0]}, {paths[1]}")
    elif args.command == "unlearn":
        for (name, seed), path in harness.unlearn_models(cfg).items():
            print(f"✅ {name} / Seed {seed}: {path}")
    elif args.command == "evaluate":
        print_summary(harness.evaluate_checkpoints(cfg))
    elif args.command == "compare":
        print_summary(compare(cfg.ensure_output_dir()))
    elif args.command == "backdoor":
        print_summary(harness.run_backdoor(cfg))
    elif args.command == "confusion":
        print_summary(harness.run_confusion(cfg))
    elif args.command == "stability":
        result = harness.run_stability(cfg, multipliers=args.multipliers)
        for row in result.summary:
            print("  ".join(str(c) for c in row))


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 ok, 1 invalid configuration, 2 runtime failure."""
    setup_module_loggers()
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except ConfigInvalid as e:
        log_error(f"Ungültige Konfiguration: {e}", dedupe=False)
        print(f"❌ Ungültige Konfiguration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (LabError, OSError) as e:
        log_critical(f"{args.command} fehlgeschlagen: {e}", exc_info=True, dedupe=False)
        print(f"❌ {args.command} fehlgeschlagen: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
