#!/usr/bin/env python3
"""Measure gateway calls per uniform chunk as stream length grows.

The design target is a per-chunk cost that does not depend on total stream
length. This script ingests unscripted synthetic streams of increasing
length against the mock backend and prints the per-chunk call budget and
effective throughput for each.

Usage:
    python scripts/bench_scaling.py [--sizes 100 1000 10000] [--fps 1.0]
"""

import argparse
import time

from videoekg.chunking import FrameStream
from videoekg.config import parse_config
from videoekg.engine import AnalyticsEngine


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", type=int, nargs="+",
                        default=[100, 1000, 10000],
                        help="stream lengths in uniform chunks")
    parser.add_argument("--fps", type=float, default=1.0)
    args = parser.parse_args()

    print(f"{'chunks':>8} {'events':>8} {'calls':>10} {'calls/chunk':>12} "
          f"{'wall s':>8} {'video FPS eq':>12}")
    for n_chunks in args.sizes:
        config = parse_config({"store_path": None, "audit_dir": None,
                               "log_level": "WARNING"})
        engine = AnalyticsEngine(config)
        stream = FrameStream.from_script({
            "stream_id": f"bench{n_chunks}",
            "duration": 3.0 * n_chunks,
            "fps": args.fps,
        })
        start = time.perf_counter()
        report = engine.ingest(stream)
        wall = time.perf_counter() - start
        total_calls = sum(report.gateway_calls.values())
        video_seconds = 3.0 * n_chunks
        print(f"{n_chunks:>8} {report.events:>8} {total_calls:>10} "
              f"{report.calls_per_chunk:>12.2f} {wall:>8.2f} "
              f"{video_seconds * args.fps / wall:>12.1f}")


if __name__ == "__main__":
    main()
