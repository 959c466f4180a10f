from __future__ import annotations

import argparse
import json
import sys

from bridge.config import BridgeConfig, BridgeError
from bridge.features import BACKBONES, extract_features
from bridge.server import serve_guidance


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bridge")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the guidance wire service")
    s.add_argument("--model", default="procedural-sphere")
    s.add_argument("--device", default="cpu")
    s.add_argument("--precision", default="fp32", choices=("fp32", "fp16"))
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8731)

    e = sub.add_parser("extract-features", help="write a FeatureFile from images or prompts")
    e.add_argument("--source", required=True, help="image directory, or prompt file for text-hash")
    e.add_argument("--backbone", required=True, choices=BACKBONES)
    e.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            config = BridgeConfig(
                model=args.model, device=args.device, precision=args.precision,
                host=args.host, port=args.port,
            )
            print(f"serving guidance on {config.host}:{config.port}", flush=True)
            serve_guidance(config)
            return 0
        count = extract_features(args.source, args.backbone, args.out)
        print(f"{count} rows -> {args.out}")
        return 0
    except (BridgeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
