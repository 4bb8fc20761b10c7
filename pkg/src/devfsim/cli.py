"""Command line entry point for the scenario runner."""

from __future__ import annotations

import argparse
import sys

from .errors import InvalidConfig
from .harness import SCENARIOS, ScenarioConfig, run_scenario, validate_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="devfsim",
        description="Run a device-file forwarding scenario and emit CSV metrics "
                    "plus a pass/fail summary.")
    parser.add_argument("--config", help="config file (key = value lines with "
                                         "[section] headers); flags override it")
    parser.add_argument("--scenario", help="scenario name", choices=sorted(SCENARIOS))
    parser.add_argument("--mode", choices=["blocking", "nonblocking"],
                        help="default transport mode per device")
    parser.add_argument("--has", dest="has_mode", choices=["software", "hardware"],
                        help="hybrid address space realization")
    parser.add_argument("--memvirt", choices=["shadow", "tdp"],
                        help="guest memory virtualization")
    parser.add_argument("--guests", type=int, help="guest count")
    parser.add_argument("--vcpus", type=int, help="vCPUs per guest")
    parser.add_argument("--seed", type=int, help="deterministic seed")
    parser.add_argument("--out", help="output directory for CSV and summary")
    parser.add_argument("--list-scenarios", action="store_true",
                        help="print known scenarios and exit")
    return parser


def config_from_args(args) -> ScenarioConfig:
    config = ScenarioConfig.from_file(args.config) if args.config else ScenarioConfig()
    if args.scenario:
        config.scenario = args.scenario
    if args.mode:
        config.mode = args.mode
    if args.has_mode:
        config.has_mode = args.has_mode
    if args.memvirt:
        config.mem_mode = args.memvirt
    if args.guests is not None:
        config.guests = args.guests
    if args.vcpus is not None:
        config.vcpus = args.vcpus
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.out_dir = args.out
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.list_scenarios:
        for name in sorted(SCENARIOS):
            print(name)
        return 0
    config = config_from_args(args)
    try:
        validate_config(config)
        run = run_scenario(config)
    except InvalidConfig as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    for a in run.assertions:
        print(f"{'PASS' if a.passed else 'FAIL'} {a.name} {a.detail}")
    if run.csv_path:
        print(f"metrics: {run.csv_path}")
        print(f"summary: {run.summary_path}")
    return run.exit_code


if __name__ == "__main__":
    sys.exit(main())
