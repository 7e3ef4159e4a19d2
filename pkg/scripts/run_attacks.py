#!/usr/bin/env python3
"""Run every built-in attack scenario, then again with protections stripped.

The second pass shows which defence each scenario depends on: programs run
without instrumentation or without the binary scan should be breached.
"""
import copy

from zonesim.attacks import CONTROL, GOLDEN, load_scenario, manifest, run_scenario


def stripped(name):
    sc = copy.deepcopy(load_scenario(name))
    touched = False
    for step in sc.attack:
        if step["op"] == "program":
            step["instrument"] = False
            step["scan"] = False
            touched = True
    return sc if touched else None


def main():
    cves = manifest()["scenarios"]
    width = max(map(len, GOLDEN))
    print(f"{'scenario':<{width}}  {'cve':<15} {'outcome':<28} status    unprotected")
    for name in (*GOLDEN, CONTROL):
        res = run_scenario(name)
        bare = stripped(name)
        bare_status = run_scenario(bare).status if bare else "-"
        print(f"{name:<{width}}  {cves[name]['cve'] or '-':<15} {res.outcome:<28} "
              f"{res.status:<9} {bare_status}")
    mapping = manifest()["table_mapping"]
    print("\nadditional CVEs covered by an existing archetype:")
    for cve, target in mapping.items():
        print(f"  {cve:<15} -> {target}")


if __name__ == "__main__":
    main()
