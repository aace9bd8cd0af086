"""``railsale`` command line: run the engine behind its HTTP API."""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from typing import Sequence

from .config import EngineConfig
from .engine import Engine
from .errors import ConfigError
from .server import EngineServer


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="railsale", description="railway ticketing engine")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="serve the HTTP API until interrupted")
    serve.add_argument("--config", help="engine config JSON; defaults are used when omitted")
    serve.add_argument("--port", type=int, help="override listen.port")
    serve.add_argument("-v", "--verbose", action="store_true")
    check = sub.add_parser("check-config", help="validate a config file and print it with defaults filled in")
    check.add_argument("config")
    args = parser.parse_args(argv)

    try:
        config = EngineConfig.load(args.config) if args.config else EngineConfig()
    except ConfigError as exc:
        print(f"railsale: {exc}", file=sys.stderr)
        return 2
    if args.command == "check-config":
        json.dump(config.to_dict(), sys.stdout, indent=2, default=str)
        print()
        return 0

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")
    if args.port is not None:
        config.listen.port = args.port
    server = EngineServer(Engine(config), config.listen.host, config.listen.port, config.listen.workers)
    done = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: done.set())
    server.start()
    logging.getLogger("railsale").info("listening on %s", server.url)
    try:
        done.wait()
    except KeyboardInterrupt:
        pass
    server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
