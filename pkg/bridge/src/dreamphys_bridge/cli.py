"""dreamphys-bridge command line: serve the denoise protocol or self-test."""

from __future__ import annotations

import argparse
import sys

from .model import ModelBackend, ModelNotLoaded
from .selftest import run_selftest
from .server import MODES, DenoiseServer


def cmd_serve(args) -> int:
    backend = None
    if args.mode == "model":
        if not args.model:
            print("error: --mode model requires --model <identifier>",
                  file=sys.stderr)
            return 2
        try:
            backend = ModelBackend.from_identifier(args.model)
            print(f"loaded pipeline {args.model!r}")
        except ModelNotLoaded as exc:
            # still serve; requests get HTTP 503 per protocol
            print(f"warning: {exc}; serving 503", file=sys.stderr)
    server = DenoiseServer(mode=args.mode, port=args.port, backend=backend)
    print(f"serving {args.mode} on {server.endpoint}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_selftest(args) -> int:
    failures = run_selftest(args.endpoint, fixture_dir=args.fixtures)
    if failures:
        print(f"{failures} fixture(s) failed", file=sys.stderr)
        return 1
    print("all fixtures conformant")
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="dreamphys-bridge")
    sub = p.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the denoise server")
    serve.add_argument("--port", type=int, default=8787)
    serve.add_argument("--mode", choices=MODES, default="mock-echo")
    serve.add_argument("--model", help="pipeline identifier for model mode")
    serve.set_defaults(fn=cmd_serve)

    st = sub.add_parser("selftest", help="replay golden fixtures")
    st.add_argument("--endpoint", required=True)
    st.add_argument("--fixtures", help="fixture directory override")
    st.set_defaults(fn=cmd_selftest)

    args = p.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
