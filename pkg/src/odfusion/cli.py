"""Command line entry points for scenario runs and utilities."""

from __future__ import annotations

import argparse
import json
import sys

from .scenario import ScenarioConfig, compare_solvers, run_scenario, \
    sensitivity_suite, toy_network, grid_network, validate_scenario_network, \
    write_network_files


def _load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.from_json(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    return cfg


def _add_common(sub):
    sub.add_argument("--config", help="scenario config JSON")
    sub.add_argument("--seed", type=int, help="override the master seed")
    sub.add_argument("--out", help="override the output directory")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="odfusion",
        description="Dynamic OD demand estimation from counts, travel times, "
                    "and snapshot densities.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p_run = subs.add_parser("run", help="run one estimation scenario")
    _add_common(p_run)
    p_run.add_argument("--epochs", type=int, help="override solver epochs")

    p_sens = subs.add_parser("sensitivity", help="sweep an error or frequency axis")
    _add_common(p_sens)
    p_sens.add_argument("--epochs", type=int, help="override solver epochs")
    p_sens.add_argument("--axis", required=True,
                        choices=["error_level", "snapshot_frequency"])
    p_sens.add_argument("--values", required=True,
                        help="comma separated axis values")
    p_sens.add_argument("--replications", type=int, default=5)

    p_cmp = subs.add_parser("compare", help="gradient solver versus SPSA baseline")
    _add_common(p_cmp)
    p_cmp.add_argument("--epochs", type=int, help="loading-run budget")

    p_val = subs.add_parser("validate", help="report network violations")
    _add_common(p_val)

    p_gen = subs.add_parser("gen-synthetic", help="write synthetic network files")
    _add_common(p_gen)
    p_gen.add_argument("--kind", choices=["toy", "grid"], default="toy")
    p_gen.add_argument("--rows", type=int, default=4)
    p_gen.add_argument("--cols", type=int, default=4)
    p_gen.add_argument("--od", type=int, default=8)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except Exception as exc:  # surface a clean one-line failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = _load_config(args)
        summary = run_scenario(cfg)
        summary.pop("_trace", None)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return 0

    if args.command == "sensitivity":
        cfg = _load_config(args)
        values = [float(v) if "." in v else int(v)
                  for v in args.values.split(",")]
        result = sensitivity_suite(cfg, args.axis, values, args.replications)
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0

    if args.command == "compare":
        cfg = _load_config(args)
        result = compare_solvers(cfg)
        print(json.dumps(result, indent=2, sort_keys=True))
        return 0

    if args.command == "validate":
        cfg = _load_config(args)
        problems = validate_scenario_network(cfg)
        if problems:
            for p in problems:
                print(p)
            return 2
        print("network is valid")
        return 0

    if args.command == "gen-synthetic":
        cfg = _load_config(args)
        net = (toy_network() if args.kind == "toy"
               else grid_network(args.rows, args.cols, args.od,
                                 seed=cfg.truth_seed))
        files = write_network_files(net, cfg.out_dir)
        print(json.dumps(files, indent=2, sort_keys=True))
        return 0

    raise ValueError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
