"""Command line entry point: `attention-bridge export --config bridge.json`."""

from __future__ import annotations

import argparse
import json
import sys

from .config import BridgeConfig, BridgeError
from .export import export_attention


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="attention-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="capture attention and write containers")
    p.add_argument("--config", required=True, help="bridge config JSON")
    args = parser.parse_args(argv)
    try:
        config = BridgeConfig.from_file(args.config)
        summary = export_attention(config)
    except (BridgeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
