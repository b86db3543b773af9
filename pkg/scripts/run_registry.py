#!/usr/bin/env python3
"""Start a VO registry: ``python3 scripts/run_registry.py registry.cfg``."""

import sys

from gridbox.run_registry import main

if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
