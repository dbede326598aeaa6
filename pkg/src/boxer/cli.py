"""``boxer-ns``: run one node supervisor, optionally with a guest."""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
import tempfile
from typing import List, Optional

from .netservice import TransportPolicy
from .supervisor import DEFAULT_SEED, GuestSpec, LaunchError, NodeConfig, run_node
from .types import DEFAULT_OVERLAY_CIDR, BoxerError, OverlayAddr


def _names(text: str) -> List[str]:
    return [n for n in (t.strip() for t in text.split(",")) if n]


def build_parser() -> argparse.ArgumentParser:
    env = os.environ
    p = argparse.ArgumentParser(
        prog="boxer-ns",
        description="Run a node supervisor and, after `--`, one guest command under it.")
    role = p.add_mutually_exclusive_group()
    role.add_argument("--seed", metavar="HOST:PORT", default=env.get("BOXER_SEED"),
                      help="control endpoint of the seed node to join (env BOXER_SEED)")
    role.add_argument("--be-seed", action="store_true", help="act as the seed coordinator")
    p.add_argument("--listen", metavar="HOST:PORT",
                   help=f"control endpoint to listen on (seed default {DEFAULT_SEED}, others 127.0.0.1:0)")
    p.add_argument("--name", default=env.get("BOXER_NODE_NAME"), help="register this node under NAME")
    p.add_argument("--wait", type=int, default=int(env.get("BOXER_WAIT_NODES") or 0), metavar="K",
                   help="start the guest only once K nodes are members (env BOXER_WAIT_NODES)")
    p.add_argument("--wait-names", default=env.get("BOXER_WAIT_NAMES", ""), metavar="N1,N2",
                   help="also wait for these registered names (env BOXER_WAIT_NAMES)")
    p.add_argument("--barrier-timeout", type=float, default=60.0, metavar="SECONDS")
    p.add_argument("--dir", default=env.get("BOXER_DIR"),
                   help="base directory for sockets, membership files and logs (env BOXER_DIR)")
    p.add_argument("--cidr", default=env.get("BOXER_OVERLAY_CIDR", DEFAULT_OVERLAY_CIDR),
                   help="overlay network (env BOXER_OVERLAY_CIDR)")
    p.add_argument("--transport", default=env.get("BOXER_TRANSPORT", "direct"),
                   help="direct | punch | proxy:<relay node id> (env BOXER_TRANSPORT)")
    p.add_argument("--remap", default=env.get("BOXER_REMAP"), help="path remap rule file (env BOXER_REMAP)")
    p.add_argument("--guest-stdio", choices=("log", "inherit"), default="log",
                   help="write guest output to $BOXER_DIR/log (default) or pass it through")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("guest", nargs=argparse.REMAINDER, help="-- command [args...]")
    return p


def parse_config(args: argparse.Namespace) -> NodeConfig:
    if args.be_seed:
        seed = None
    else:
        seed = OverlayAddr.parse(args.seed) if args.seed else DEFAULT_SEED
    boxer_dir = args.dir or tempfile.mkdtemp(prefix="boxer-")
    return NodeConfig(
        boxer_dir=boxer_dir,
        seed=seed,
        listen=OverlayAddr.parse(args.listen) if args.listen else None,
        name=args.name or None,
        cidr=args.cidr,
        transport=TransportPolicy.parse(args.transport),
        remap_file=args.remap,
        expected_nodes=args.wait,
    )


def ns_main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(asctime)s boxer-ns %(levelname)s %(name)s: %(message)s")
    guest = list(args.guest)
    if guest and guest[0] == "--":
        guest = guest[1:]
    try:
        config = parse_config(args)
        spec = None
        if args.guest:
            # GuestSpec rejects an empty command
            spec = GuestSpec(guest, wait_nodes=args.wait, wait_names=tuple(_names(args.wait_names)),
                             barrier_timeout=args.barrier_timeout)
        return asyncio.run(run_node(config, spec, args.guest_stdio, ready_stream=sys.stdout))
    except (BoxerError, LaunchError, ValueError, OSError) as exc:
        print(f"boxer-ns: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":  # pragma: no cover
    sys.exit(ns_main())
