import argparse
import math
import os
from dataclasses import replace

from rich.console import Console

from mfclab.commands.common import add_run_arguments, fail, finish, load_experiment
from mfclab.engine.control import dump_control
from mfclab.engine.experiment import relaxed_control_from_config, run_chattering_study
from mfclab.utils.errors import MfclabError
from mfclab.utils.reporting import RunReporter, chatter_table, fmt

console = Console()


def register_subcommand(subparsers):
    examples = """Examples:
  # Relaxed half/half control against its chattered strict approximations
  mfclab chatter --config experiments/bang.yaml --out runs/chatter

  # Same study, also optimizing over strict Markovian controls
  mfclab chatter --config experiments/bang.yaml --optimize-strict
"""
    parser = subparsers.add_parser(
        "chatter",
        help="Compare a relaxed control with chattering strict approximations",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=examples,
    )
    parser.add_argument(
        "--optimize-strict",
        action="store_true",
        help="Also optimize a strict table policy (overrides chatter.optimize_strict)",
    )
    add_run_arguments(parser, workers=False)


def execute(args):
    cfg = load_experiment(args)
    if args.optimize_strict:
        cfg = replace(cfg, chatter=replace(cfg.chatter, optimize_strict=True))
    first, last = 2**cfg.chatter.first_level, 2**cfg.chatter.levels
    console.print(f"\n[bold blue]🔍 Chattering study for {cfg.model.name}: refinements {first}..{last}[/bold blue]")
    try:
        study = run_chattering_study(cfg)
        relaxed = relaxed_control_from_config(cfg, cfg.model.build())
    except MfclabError as e:
        fail(e)

    console.print(chatter_table(study))
    console.print(f"Relaxed value: [bold]{fmt(study.relaxed.value, 6)}[/bold] ± {fmt(study.relaxed.std_error, 3)}")
    if study.strict_optimized is not None:
        console.print(
            f"Best strict value: [bold]{fmt(study.strict_optimized.value, 6)}[/bold] "
            f"(relaxation margin {fmt(study.relaxation_margin, 3)} standard errors)"
        )

    values = [study.relaxed.value] + [row.value for row in study.rows]
    partial = not all(math.isfinite(v) for v in values)
    reporter = RunReporter(cfg.output.dir)
    reporter.write_table("chatter.csv", [row.__dict__ for row in study.rows])
    dump_control(relaxed, os.path.join(cfg.output.dir, "relaxed_control.yaml"))
    reporter.write_manifest("chatter", cfg.to_dict(), cfg.fingerprint(), study.to_dict(), partial=partial)
    finish(partial, "Chattering study")
