"""Arguments and error handling shared by the run commands."""

import sys

from rich.console import Console

from mfclab.engine.experiment import ExperimentConfig
from mfclab.utils.console import configure_logging
from mfclab.utils.errors import MfclabError

console = Console()


def add_run_arguments(parser, workers: bool = True):
    parser.add_argument("--config", "-c", help="Experiment YAML file (defaults are used when omitted)")
    parser.add_argument("--seed", type=int, help="Master seed; overrides sim.seed")
    parser.add_argument("--out", "-o", help="Output directory; overrides output.dir")
    if workers:
        parser.add_argument("--workers", "-j", type=int, help="Parallel workers for independent cells")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug-level engine logging")


def load_experiment(args) -> ExperimentConfig:
    """Configures logging and reads the config with CLI overrides; exits on configuration errors."""
    configure_logging(getattr(args, "verbose", False))
    try:
        return ExperimentConfig.load(
            getattr(args, "config", None),
            seed=getattr(args, "seed", None),
            out=getattr(args, "out", None),
            workers=getattr(args, "workers", None),
        )
    except MfclabError as e:
        fail(e)


def fail(error):
    console.print(f"[bold red]❌ Error:[/bold red] {error}")
    sys.exit(1)


def finish(partial: bool, what: str):
    if partial:
        console.print(f"[bold yellow]⚠️  {what} is partial. See the manifest for failed cells.[/bold yellow]")
        sys.exit(1)
    console.print(f"[bold green]✅ {what} complete.[/bold green]")
