"""
Command line interface: ``metaxt run|sweep|check-grads|ltn-map``.

Any :class:`~metaxt.harness.RunConfig` key can be given on the command line as
``--key=value`` after the config file, overriding the file.
"""

import argparse
import logging
import os
import sys

from . import __version__, harness
from .constants import Method


def get_parser():
    top = argparse.ArgumentParser(
        prog="metaxt",
        description="Meta-learned label transfer between tasks with different label spaces",
    )
    top.add_argument("-V", "--version", action="version", version=f"%(prog)s {__version__}")
    top.add_argument("-v", "--verbose", action="count", default=0, help="Increase logging (-v INFO, -vv DEBUG)")
    subparsers = top.add_subparsers(dest="command")
    subparsers.required = True

    def add_config(parser):
        parser.add_argument("config", nargs="?", help="A key = value config file (defaults if omitted)")
        parser.add_argument("-o", "--outdir", default="metaxt_output", help="Output directory")

    parser = subparsers.add_parser("run", help="Run a single configuration over its seeds")
    add_config(parser)
    parser.set_defaults(runner=run_run)

    parser = subparsers.add_parser("sweep", help="Run every method and k in the config over all seeds")
    add_config(parser)
    parser.set_defaults(runner=run_sweep)

    parser = subparsers.add_parser("check-grads", help="Verify primitive gradients and meta-gradients")
    parser.add_argument("--instances", type=int, default=20, help="Number of random small networks")
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(runner=run_check_grads)

    parser = subparsers.add_parser("ltn-map", help="Train and report the learned source-to-target label map")
    add_config(parser)
    parser.set_defaults(runner=run_ltn_map)
    return top


def parse_overrides(extra):
    overrides = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ValueError(f"Unrecognised argument '{arg}': overrides take the form --key=value")
        key, value = arg[2:].split("=", 1)
        overrides[key.replace("-", "_")] = value
    return overrides


def load_config(args, extra):
    overrides = parse_overrides(extra)
    if args.config is None:
        return harness.RunConfig.from_text("", overrides)
    return harness.RunConfig.from_file(args.config, overrides)


def run_run(args, config):
    result = harness.run(config)
    print(result)
    harness.write_outputs([result], args.outdir, config)
    return 1 if result.partial else 0


def run_sweep(args, config):
    results = harness.sweep(config)
    for result in results:
        print(result)
    harness.write_outputs(results, args.outdir, config)
    return 1 if any(r.partial for r in results) else 0


def run_check_grads(args, config):
    df = harness.run_gradient_checks(n_instances=args.instances, seed=args.seed)
    summary = df.groupby("check", sort=False).agg(
        max_error=("error", "max"), tolerance=("tolerance", "max"), passed=("passed", "all")
    )
    print(summary.to_string())
    return 0 if df["passed"].all() else 1


def run_ltn_map(args, config):
    if not config.method_enum.uses_ltn():
        raise ValueError(f"Method {config.method} has no LTN; use {Method.METAXT.value} or {Method.XT.value}")
    result = harness.run(config)
    ltn_map = result.ltn_map
    if ltn_map is None:
        raise ValueError("No seed completed, so there is no LTN map")
    print(ltn_map)
    os.makedirs(args.outdir, exist_ok=True)
    ltn_map.plot(os.path.join(args.outdir, f"ltn_map_{result.method}_k{result.k}.svg"))
    ltn_map.to_dataframe().to_csv(os.path.join(args.outdir, f"ltn_map_{result.method}_k{result.k}.csv"))
    return 0


def main(arg_list=None):
    parser = get_parser()
    args, extra = parser.parse_known_args(arg_list)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = None
        if args.command != "check-grads":
            config = load_config(args, extra).validate()
        elif extra:
            parser.error(f"unrecognised arguments: {' '.join(extra)}")
        return args.runner(args, config)
    except (ValueError, OSError) as e:
        print(f"metaxt: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
