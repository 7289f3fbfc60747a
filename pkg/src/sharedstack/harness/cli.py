"""``simulate`` command line entry point.

Exit codes: 0 success, 1 I/O failure, 2 invalid configuration, 3 a runtime
invariant (cycle ledger, closed-loop conservation, causality) was violated.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .config import SCENARIOS, ConfigError, load_config
from .report import emit_report
from .scenarios import builtin_config, run_scenario
from .sim import InvariantError

EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Run a shared network stack scenario in virtual time and write a report.",
    )
    p.add_argument("--config", help="YAML config file (default: the scenario's built-in config)")
    p.add_argument("--scenario", choices=SCENARIOS, help="scenario to run (overrides the config)")
    p.add_argument("--seed", type=int, help="64-bit seed (overrides the config)")
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--ablate-no-budget", action="store_true",
                   help="disable budget gating (accounting still runs)")
    p.add_argument("--duration-ms", type=float, help="virtual run length per sweep point")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.scenario:
            cfg = builtin_config(args.scenario)
        else:
            raise ConfigError("config", "give --config or --scenario")
        if args.scenario and args.scenario != cfg.scenario.name:
            cfg.scenario.name = args.scenario
        if args.seed is not None:
            cfg.seed = args.seed
        if args.ablate_no_budget:
            cfg.budget_gating = False
        if args.duration_ms is not None:
            cfg.duration_ms = args.duration_ms
            cfg.warmup_ms = min(cfg.warmup_ms, args.duration_ms)
        cfg.validate()
    except ConfigError as e:
        print(f"simulate: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_scenario(cfg)
    except InvariantError as e:
        print(f"simulate: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    try:
        emit_report(report, args.format, args.out)
    except OSError as e:
        print(f"simulate: {e}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
