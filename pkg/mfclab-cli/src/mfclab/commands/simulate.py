import argparse
import os

from rich.console import Console

from mfclab.commands.common import add_run_arguments, fail, finish, load_experiment
from mfclab.engine.control import dump_control, load_control
from mfclab.engine.experiment import default_control
from mfclab.engine.objective import estimate_gamma, estimate_n_objective
from mfclab.engine.sim import mkv_fixed_point_run, save_output, simulate_nsystem
from mfclab.utils.errors import MfclabError
from mfclab.utils.reporting import RunReporter, fmt

console = Console()


def register_subcommand(subparsers):
    examples = """Examples:
  # Simulate the interacting system under the default control
  mfclab simulate --config experiments/ou.yaml --out runs/ou

  # Approximate the McKean-Vlasov limit under a saved policy
  mfclab simulate --config experiments/lq.yaml --mode mkv --control runs/lq-opt/policy.yaml
"""
    parser = subparsers.add_parser(
        "simulate",
        help="Simulate the n-particle system or the McKean-Vlasov limit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=examples,
    )
    parser.add_argument(
        "--mode", choices=["nsystem", "mkv"], default="nsystem", help="Interacting system or Picard fixed point"
    )
    parser.add_argument("--control", help="YAML relaxed control or feedback policy (see 'mfclab optimize')")
    add_run_arguments(parser, workers=False)


def execute(args):
    cfg = load_experiment(args)
    try:
        model = cfg.model.build()
        control = load_control(args.control) if args.control else default_control(cfg, model)
        console.print(
            f"\n[bold blue]🔍 Simulating {model.name} ({args.mode}, n={cfg.sim.n_particles}, "
            f"steps={cfg.sim.steps}, seed={cfg.sim.seed})...[/bold blue]"
        )
        results = {"mode": args.mode}
        if args.mode == "nsystem":
            output = simulate_nsystem(model, cfg.sim, control)
            estimate = estimate_n_objective(model, output)
        else:
            flow, iterations, converged, output = mkv_fixed_point_run(
                model, cfg.sim, control, max_iter=cfg.optimize.picard_iters, tol=cfg.optimize.picard_tol
            )
            estimate = estimate_gamma(model, output, flow)
            results.update({"picard_iterations": iterations, "converged": converged, "flow": flow.to_dict()})
            if not converged:
                console.print(f"[yellow]⚠️  Picard iteration stopped after {iterations} iterations.[/yellow]")
    except (MfclabError, OSError) as e:
        fail(e)

    diagnostics = output.diagnostics
    results.update(
        {
            "objective": estimate.to_record(),
            "steps_completed": diagnostics.steps_completed,
            "max_abs": diagnostics.max_abs,
            "blowup": diagnostics.blowup,
        }
    )
    os.makedirs(cfg.output.dir, exist_ok=True)
    if cfg.output.save_ensembles:
        results["files"] = save_output(output, cfg.output.dir)
    dump_control(control, os.path.join(cfg.output.dir, "control.yaml"))
    RunReporter(cfg.output.dir).write_manifest(
        "simulate", cfg.to_dict(), cfg.fingerprint(), results, partial=diagnostics.blowup
    )

    console.print(f"Objective: [bold]{fmt(estimate.value, 6)}[/bold] ± {fmt(estimate.std_error, 3)}")
    finish(diagnostics.blowup, "Simulation")
