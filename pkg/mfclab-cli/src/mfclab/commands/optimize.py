import argparse
import os
import sys
from dataclasses import replace

from rich.console import Console

from mfclab.commands.common import add_run_arguments, fail, finish, load_experiment
from mfclab.engine.control import dump_control, load_control
from mfclab.engine.optimize import (
    TARGETS,
    default_template,
    epsilon_report,
    optimize_policy,
    policy_gradient_check,
    solve_lq_oracle,
    solve_ou_oracle,
)
from mfclab.utils.errors import MfclabError
from mfclab.utils.reporting import RunReporter, fmt

console = Console()

ORACLES = {"lq_meanfield": solve_lq_oracle, "ou_chaos": solve_ou_oracle}


def register_subcommand(subparsers):
    examples = """Examples:
  # Cross-entropy search over linear feedback for the n-particle objective
  mfclab optimize --config experiments/lq.yaml --out runs/lq-opt

  # Optimize the McKean-Vlasov objective with Nelder-Mead on 4 workers
  mfclab optimize --config experiments/lq.yaml --target mkv_fixed_point --method nelder_mead -j 4

  # Run the finite-difference gradient gate against the LQ oracle
  mfclab optimize --config experiments/lq.yaml --gradient-check
"""
    parser = subparsers.add_parser(
        "optimize",
        help="Derivative-free policy search with epsilon-optimality report",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=examples,
    )
    parser.add_argument("--target", choices=TARGETS, default="n_system", help="Objective to maximize")
    parser.add_argument(
        "--method", choices=["cross_entropy", "nelder_mead", "grid"], help="Overrides optimize.method"
    )
    parser.add_argument("--policy", help="YAML feedback policy used as the starting point and family")
    parser.add_argument(
        "--gradient-check", action="store_true", help="Also run the oracle's finite-difference acceptance gate"
    )
    add_run_arguments(parser)


def execute(args):
    cfg = load_experiment(args)
    os.makedirs(cfg.output.dir, exist_ok=True)
    changes = {"trace_path": os.path.join(cfg.output.dir, "trace.jsonl")}
    if args.method:
        changes["method"] = args.method
    if args.workers:
        changes["workers"] = args.workers
    opt = replace(cfg.optimize, **changes)

    try:
        model = cfg.model.build()
        template = load_control(args.policy) if args.policy else default_template(model, cfg.schedule.policy_knots)
        console.print(
            f"\n[bold blue]🔍 Optimizing {model.name} ({args.target}, {opt.method}, "
            f"{template.n_params} parameters)...[/bold blue]"
        )
        result = optimize_policy(model, cfg.sim, opt, args.target, template)

        results = {
            "target": args.target,
            "method": opt.method,
            "best": result.best.to_record(),
            "train_value": result.train_value,
            "evaluations": result.evaluations,
            "value_history": result.value_history,
        }
        oracle = ORACLES[model.name](model, cfg.sim.steps) if model.name in ORACLES else None
        if oracle is not None:
            eps = epsilon_report(result.best, oracle)
            results["oracle_value"] = oracle.value
            results["epsilon"] = {"epsilon": eps.epsilon, "std_error": eps.std_error, "gap": eps.gap}
        gate = None
        if args.gradient_check:
            if model.name != "lq_meanfield":
                fail("--gradient-check needs the lq_meanfield model")
            console.print("\n[bold blue]🔍 Running the finite-difference gradient gate...[/bold blue]")
            gate = policy_gradient_check(model, oracle, cfg.sim)
            results["gradient_check"] = gate.__dict__
    except (MfclabError, OSError) as e:
        fail(e)

    dump_control(result.policy, os.path.join(cfg.output.dir, "policy.yaml"))
    RunReporter(cfg.output.dir).write_manifest("optimize", cfg.to_dict(), cfg.fingerprint(), results)

    console.print(f"Held-out value: [bold]{fmt(result.best.value, 6)}[/bold] ± {fmt(result.best.std_error, 3)}")
    if oracle is not None:
        console.print(f"Oracle value:   [bold]{fmt(oracle.value, 6)}[/bold]  (epsilon {fmt(eps.epsilon, 3)})")
    if gate is not None and not gate.passed:
        console.print(f"[bold red]❌ Gradient gate failed: relative gap {fmt(gate.relative_gap, 3)}[/bold red]")
        sys.exit(1)
    finish(False, "Optimization")
