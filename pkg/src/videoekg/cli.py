"""Operator commands: ingest a stream, query the index, run the service.

Exit codes: 0 success, 1 pipeline failure, 2 missing/invalid input,
3 query against an empty store, 4 gateway exhaustion.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .engine import AnalyticsEngine
from .errors import ConfigError, EmptyGraph, GatewayError, VideoEkgError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2
EXIT_EMPTY_GRAPH = 3
EXIT_GATEWAY = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="videoekg",
        description="Index video streams into an event knowledge graph and "
                    "answer open-ended queries over it.")
    sub = parser.add_subparsers(dest="command", required=True)

    ingest = sub.add_parser("ingest", help="index one stream source")
    ingest.add_argument("--config", required=True, help="path to the YAML config")
    ingest.add_argument("--source", required=True,
                        help="frame-list file or synthetic-stream script")

    query = sub.add_parser("query", help="answer a natural-language query")
    query.add_argument("--config", required=True, help="path to the YAML config")
    query.add_argument("--text", required=True, help="the query text")
    query.add_argument("--depth", type=int, default=None,
                       help="override the tree search depth")
    query.add_argument("--k", type=int, default=None,
                       help="override the per-view retrieval K")

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--config", required=True, help="path to the YAML config")
    serve.add_argument("--port", type=int, default=8080)
    return parser


def cmd_ingest(args) -> int:
    config = load_config(args.config)
    logging.basicConfig(level=config.log_level)
    engine = AnalyticsEngine(config)
    try:
        report = engine.ingest_source(args.source)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except GatewayError as exc:
        print(f"error: gateway exhausted: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except VideoEkgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"stream          {report.stream_id}")
    print(f"uniform chunks  {report.uniform_chunks} "
          f"({report.skipped_chunks} already ingested)")
    print(f"events          {report.events}")
    print(f"entities        {report.clusters} clusters over {report.mentions} mentions")
    print(f"relations       {report.relations}")
    print(f"gateway calls   {report.gateway_calls}")
    print(f"calls per chunk {report.calls_per_chunk:.2f}")
    print(f"wall time       {report.wall_seconds:.2f}s")
    return EXIT_OK


def cmd_query(args) -> int:
    config = load_config(args.config)
    logging.basicConfig(level=config.log_level)
    engine = AnalyticsEngine(config)
    try:
        outcome = engine.answer(args.text, depth=args.depth, k=args.k)
    except EmptyGraph as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY_GRAPH
    except GatewayError as exc:
        print(f"error: gateway exhausted: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except VideoEkgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"answer  {outcome.answer}")
    print(f"score   {outcome.score:.6f} ({outcome.source}"
          f"{', degraded' if outcome.degraded else ''})")
    print(f"audit   {outcome.audit_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import run_service

    config = load_config(args.config)
    logging.basicConfig(level=config.log_level)
    run_service(config, args.port)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "ingest":
            return cmd_ingest(args)
        if args.command == "query":
            return cmd_query(args)
        if args.command == "serve":
            return cmd_serve(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    parser.error(f"unknown command {args.command!r}")
    return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
