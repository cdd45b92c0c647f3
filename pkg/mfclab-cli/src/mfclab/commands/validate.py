import argparse
import sys

from rich.console import Console

from mfclab.commands.common import add_run_arguments, fail, load_experiment
from mfclab.engine.model import ProbePlan, validate_growth, validate_lipschitz
from mfclab.utils.errors import MfclabError
from mfclab.utils.reporting import RunReporter, validation_table

console = Console()

VALIDATORS = {"growth": validate_growth, "lipschitz": validate_lipschitz}


def register_subcommand(subparsers):
    examples = """Examples:
  # Check growth, coercivity and Lipschitz assumptions of the configured model
  mfclab validate all --config experiments/lq.yaml

  # Quick Lipschitz probe with a different seed
  mfclab validate lipschitz --config experiments/ou.yaml --seed 7 --quick
"""
    parser = subparsers.add_parser(
        "validate",
        help="Numerically probe the standing assumptions of a model",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=examples,
    )
    parser.add_argument("check", nargs="?", choices=["all", *VALIDATORS], default="all", help="Which checks to run")
    parser.add_argument("--quick", action="store_true", help="Smaller probe sets")
    add_run_arguments(parser, workers=False)


def run_checks(model, which: str, plan: ProbePlan) -> list:
    names = list(VALIDATORS) if which == "all" else [which]
    reports = []
    for name in names:
        console.print(f"\n[bold blue]🔍 Probing {name} assumptions of {model.name}...[/bold blue]")
        reports.append(VALIDATORS[name](model, plan))
    return reports


def execute(args):
    cfg = load_experiment(args)
    try:
        model = cfg.model.build()
        plan = ProbePlan.quick(cfg.sim.seed) if args.quick else ProbePlan(seed=cfg.sim.seed)
        reports = run_checks(model, args.check, plan)
    except MfclabError as e:
        fail(e)

    for report in reports:
        console.print(validation_table(report))

    reporter = RunReporter(cfg.output.dir)
    reporter.write_table("validation.csv", [{"kind": r.kind, **c.__dict__} for r in reports for c in r.checks])
    reporter.write_manifest("validate", cfg.to_dict(), cfg.fingerprint(), {"reports": [r.to_dict() for r in reports]})

    failed = [c.name for r in reports for c in r.checks if not c.passed]
    if failed:
        console.print(f"[bold red]❌ {len(failed)} check(s) failed: {', '.join(failed)}[/bold red]")
        sys.exit(1)
    console.print("[bold green]✅ All assumption checks passed.[/bold green]")
