#!/usr/bin/env python3
"""Start a site node: ``python3 scripts/run_node.py node-cam.cfg``."""

import sys

from gridbox.run_node import main

if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
