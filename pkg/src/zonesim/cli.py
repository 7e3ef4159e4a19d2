"""``zonesim`` command line.

Exit status: 0 on success, 1 when a suite or check fails, 2 on usage,
configuration or parse errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional

from . import __version__
from .attacks import (CONTROL, GOLDEN, Scenario, ScenarioError, UnknownScenario, load_scenario,
                      run_scenario)
from .config import ConfigError, RunConfig, load_config, parse_config
from .domains import Exhausted
from .oracles import SUITES, run_suite
from .program import (MalformedProgram, binary_scan, count_inserted, format_program, instrument,
                      parse_program)
from .workload import SCHEMA_VERSION, format_table, simulate

def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_simulate(args) -> int:
    cfg = _config(args)
    interleave = args.interleave
    if args.seed is not None and interleave is None:
        interleave = "random"
    reports = []
    for d in args.domains_per_core or [None]:
        wc = cfg.workload_config(alloc_policy=args.policy, domains_per_core=d, seed=args.seed,
                                 interleave=interleave, workers=args.workers,
                                 connections=args.connections)
        try:
            reports.append(simulate(wc))
        except Exhausted as exc:
            print(f"error: domain universe exhausted: {exc}", file=sys.stderr)
            return 1
    table = format_table(reports)
    doc = {"schema_version": SCHEMA_VERSION, "run": cfg.as_dict(),
           "reports": [r.to_dict() for r in reports]}
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(_dump(doc))
        out.with_suffix(".txt").write_text(table)
        print(f"wrote {out} and {out.with_suffix('.txt')}")
    return 0


def cmd_oracle(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    table = _config(args).access_table() if args.config else None
    rc = 0
    for name in names:
        rep = run_suite(name, table=table) if name == "gpc" and table else run_suite(name)
        print(rep.summary())
        if not rep.passed:
            rc = 1
    return rc


def _scenario_target(name: str):
    """A bare scenario name, a scenario file, or a run file with a ``scenario`` section."""
    path = Path(name)
    if path.suffix != ".json":
        return name
    data = json.loads(path.read_text())
    if "scenario" not in data:
        return load_scenario(str(path))
    cfg = parse_config(data)
    world = {"cores": cfg.machine.cores, "granule_size": cfg.machine.granule_size,
             "window_scale": cfg.machine.window_scale, "n_pas": cfg.process.n_pas,
             "pim_capacity": cfg.process.pim_capacity}
    sc = Scenario.from_dict(cfg.scenario, path.parent)
    sc.world = {**world, **sc.world}
    return sc


def cmd_attack(args) -> int:
    if args.scenario:
        names = args.scenario
    elif args.suite == "golden":
        names = list(GOLDEN)
    else:
        names = list(GOLDEN) + [CONTROL]
    try:
        targets = [_scenario_target(n) for n in names]
        with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
            results = list(pool.map(run_scenario, targets))
    except UnknownScenario as exc:
        print(f"error: unknown scenario {exc.args[0]!r}", file=sys.stderr)
        return 2
    except (ScenarioError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    width = max(len(r.name) for r in results)
    failed = []
    for r in results:
        mark = "ok  " if r.passed else "FAIL"
        print(f"{mark} {r.name:<{width}}  expected {r.expected:<28} got {r.outcome:<28} "
              f"[{r.status}, {r.faults} faults]")
        if not r.passed:
            failed.append(r.name)
    blocked = sum(r.passed for r in results)
    print(f"{blocked}/{len(results)} as expected")
    if failed:
        print("mismatches: " + ", ".join(failed))
        return 1
    return 0


def cmd_instrument(args) -> int:
    path = Path(args.program)
    try:
        prog = parse_program(path.read_text())
    except MalformedProgram as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return 2
    out = instrument(prog)
    counts = count_inserted(prog, out)
    rewrites = 0
    if args.scan:
        out, rep = binary_scan(out)
        rewrites = rep.rewrites
    text = format_program(out)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"{counts.backups} backups, {counts.checks} checks, {rewrites} rewrites",
          file=sys.stderr if not args.out else sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zonesim", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run the connection/request workload")
    s.add_argument("config", nargs="?", help="JSON run file")
    s.add_argument("--policy", choices=("affinity", "round_robin"))
    s.add_argument("--domains-per-core", type=int, nargs="+")
    s.add_argument("--seed", type=int)
    s.add_argument("--interleave", choices=("round_robin_arrival", "random"))
    s.add_argument("--workers", type=int)
    s.add_argument("--connections", type=int)
    s.add_argument("--out", help="write the JSON report here (and a .txt table beside it)")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle", help="run exhaustive oracle suites")
    o.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    o.add_argument("--config", help="JSON run file (its gpt.access table feeds the gpc suite)")
    o.set_defaults(func=cmd_oracle)

    a = sub.add_parser("attack", help="run attack scenarios")
    a.add_argument("--suite", choices=("golden", "all"), default="golden")
    a.add_argument("--scenario", action="append", help="scenario name or .json path")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_attack, config=None)

    i = sub.add_parser("instrument", help="instrument (and optionally scan) a toy program")
    i.add_argument("program")
    i.add_argument("--scan", action="store_true")
    i.add_argument("--out")
    i.set_defaults(func=cmd_instrument, config=None)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
