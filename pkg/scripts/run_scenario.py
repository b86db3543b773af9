#!/usr/bin/env python3
"""Run a scripted multi-node scenario:
``python3 scripts/run_scenario.py scenarios/table2.scn``."""

import sys

from gridbox.scenario import run_scenario

if __name__ == "__main__":
    if len(sys.argv) != 2:
        print(__doc__, file=sys.stderr)
        raise SystemExit(2)
    raise SystemExit(1 if run_scenario(sys.argv[1]) else 0)
