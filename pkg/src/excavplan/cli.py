"""Command-line entry point: ``excavplan {check,plan,run,oracle}``.

Exit codes: 0 ok, 1 oracle failure, 2 configuration error, 3 planning
infeasible, 4 simulation diverged.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError
from .ddp import RolloutError
from .global_planner import PlanningError
from .harness import (EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_PLANNING, bundled_scenarios,
                      load_scenario, run_scenario, timed_plan, write_outputs, write_plan)
from .model import KinematicsError
from .plant import SimulationDiverged

EXIT_ORACLE = 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="excavplan", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", metavar="PATH",
                        help="scenario file or bundled name (repeatable; default: all bundled)")
    common.add_argument("--out", metavar="DIR", default="out",
                        help="output directory; one sub-directory per scenario")
    common.add_argument("--seed", type=int, metavar="U64", help="override the scenario seed")
    common.add_argument("--quiet", action="store_true", help="only print errors")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("check", parents=[common], help="validate scenario configs")
    sub.add_parser("plan", parents=[common], help="global planning only")
    sub.add_parser("run", parents=[common], help="full closed-loop simulation")
    sub.add_parser("oracle", parents=[common], help="run the independent-oracle suite")
    return ap


def _configs(args):
    refs = args.config or [str(p) for p in bundled_scenarios()]
    cfgs = [load_scenario(r) for r in refs]
    names = [c.name for c in cfgs]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ConfigError("name", f"duplicate scenario names in batch: {', '.join(sorted(dup))}")
    return cfgs


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    say = (lambda *a: None) if args.quiet else print
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "oracle":
            from .oracles import run_all
            cfgs = _configs(args)
            plans = [timed_plan(c) for c in cfgs]
            results, wall = run_all(seed=args.seed or 0, plans=plans, report=say)
            failed = [r for r in results if not r.passed]
            say(f"{len(results) - len(failed)}/{len(results)} oracle checks passed in {wall:.1f} s")
            return EXIT_ORACLE if failed else EXIT_OK
        cfgs = _configs(args)
        for cfg in cfgs:
            if args.command == "check":
                say(f"{cfg.name}: ok ({cfg.source})")
                continue
            out = Path(args.out) / cfg.name
            if args.command == "plan":
                plan = timed_plan(cfg)
                paths = write_plan(plan, out)
                say(plan.report_text())
            else:
                result = run_scenario(cfg, seed=args.seed)
                paths = write_outputs(result, out)
                say(result.report.text())
            say(f"wrote {', '.join(str(p) for p in paths.values())}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlanningError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return EXIT_PLANNING
    except (SimulationDiverged, RolloutError, KinematicsError) as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
