import argparse
import sys

from mfclab import __version__
from mfclab.commands import chatter, converge, optimize, simulate, validate


def build_parser():
    parser = argparse.ArgumentParser(prog="mfclab", description="Mean-field control simulation and verification")
    parser.add_argument("--version", action="version", version=f"mfclab {__version__}")

    subparsers = parser.add_subparsers(dest="main_command", help="Available commands")

    # Register subcommands
    validate.register_subcommand(subparsers)
    simulate.register_subcommand(subparsers)
    optimize.register_subcommand(subparsers)
    converge.register_subcommand(subparsers)
    chatter.register_subcommand(subparsers)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    # Dispatch Logic
    if args.main_command == "validate":
        validate.execute(args)
    elif args.main_command == "simulate":
        simulate.execute(args)
    elif args.main_command == "optimize":
        optimize.execute(args)
    elif args.main_command in ("converge-forward", "converge-converse"):
        converge.execute(args)
    elif args.main_command == "chatter":
        chatter.execute(args)
    else:
        parser.print_help()
        sys.exit(1)


if __name__ == "__main__":
    main()
