"""Run a site node process: ``python -m gridbox.run_node CONFIG``."""

from __future__ import annotations

import argparse
import signal
import threading

from gridbox.config import NodeConfig
from gridbox.node import GridNode
from gridbox.run_registry import announce


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="gridbox site node")
    parser.add_argument("config", help="node config file (key = value lines)")
    parser.add_argument("--announce", default=None,
                        help="write 'SITE host:port' to this file once registered")
    args = parser.parse_args(argv)

    node = GridNode(NodeConfig.from_file(args.config))
    node.start()
    host, port = node.address
    announce(args.announce, f"{node.site} {host}:{port}")
    print(f"node {node.site} listening on {host}:{port}", flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    node.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
