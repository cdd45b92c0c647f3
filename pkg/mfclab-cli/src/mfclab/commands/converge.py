import argparse

from rich.console import Console

from mfclab.commands.common import add_run_arguments, fail, finish, load_experiment
from mfclab.engine.experiment import run_converse_limit, run_forward_limit
from mfclab.utils.errors import MfclabError
from mfclab.utils.reporting import RunReporter, convergence_table, fmt

console = Console()

RUNNERS = {"converge-forward": run_forward_limit, "converge-converse": run_converse_limit}


def register_subcommand(subparsers):
    examples = """Examples:
  # Forward limit on the LQ benchmark, resuming any finished cells in runs/fwd
  mfclab converge-forward --config experiments/lq.yaml --out runs/fwd -j 4

  # Converse limit: apply the limit-optimal policy to growing particle systems
  mfclab converge-converse --config experiments/lq.yaml --out runs/conv --seed 3
"""
    forward = subparsers.add_parser(
        "converge-forward",
        help="Optimize n-particle systems along the n-schedule and measure distance to the limit optimum",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=examples,
    )
    add_run_arguments(forward)

    converse = subparsers.add_parser(
        "converge-converse",
        help="Apply the limit-optimal policy to n-particle systems and measure its epsilon-optimality",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=examples,
    )
    add_run_arguments(converse)


def execute(args):
    cfg = load_experiment(args)
    kind = args.main_command.split("-", 1)[1]
    console.print(
        f"\n[bold blue]🔍 Running the {kind} limit for {cfg.model.name} over n={list(cfg.schedule.n_schedule)} "
        f"with {cfg.schedule.seeds_per_n} seed(s) each...[/bold blue]"
    )
    try:
        run = RUNNERS[args.main_command](cfg)
    except MfclabError as e:
        fail(e)

    console.print(convergence_table(run))
    for name, slope in run.slopes.items():
        console.print(f"log-log slope of {name}: [bold]{fmt(slope, 3)}[/bold]")

    reporter = RunReporter(cfg.output.dir)
    reporter.write_table(f"{kind}_records.csv", [r.row() for r in run.records])
    reporter.write_table(f"{kind}_medians.csv", [{"n": n, **row} for n, row in run.medians.items()])
    reporter.write_manifest(args.main_command, cfg.to_dict(), cfg.fingerprint(), run.to_dict(), partial=run.partial)
    finish(run.partial, f"The {kind} run")
