#!/usr/bin/env python3
"""Fully offline end-to-end demo against the scripted mock gateway.

Builds a synthetic wildlife stream (12 uniform chunks that merge into 5
events), a mock script covering descriptions, summaries, entity
extractions and answer sampling, then runs the real CLI: ingest followed
by a query. Everything lands in a work directory (default ./demo_run).

Usage:
    python scripts/run_demo.py [--workdir DIR] [--depth N]
"""

import argparse
import json
import shutil
import sys
from pathlib import Path

from videoekg.cli import main as cli_main

BLOCKS = [
    (3, "A raccoon approaches the waterhole and sniffs the muddy bank."),
    (2, "The raccoon drinks at the waterhole in the evening light."),
    (2, "A grey heron lands near the water and stands still."),
    (3, "The raccoon climbs the old oak tree beside the waterhole."),
    (2, "The heron catches a small fish and swallows it whole."),
]
QUERY = "What did the raccoon do after drinking at the waterhole?"
CHUNK_SECONDS = 3.0


def extraction(entities, relations=()):
    return json.dumps({
        "entities": [{"name": n, "description": d} for n, d in entities],
        "relations": [{"source": s, "target": t, "label": l}
                      for s, t, l in relations],
        "participations": [],
    })


def build_fixture(workdir: Path) -> tuple[Path, Path, Path]:
    n_chunks = sum(size for size, _ in BLOCKS)
    stream = {"stream_id": "demo", "duration": n_chunks * CHUNK_SECONDS, "fps": 1.0}

    rules = []
    chunk = 0
    for size, text in BLOCKS:
        for _ in range(size):
            first_frame = int(chunk * CHUNK_SECONDS)
            rules.append({"kind": "vision_chat",
                          "contains": f"synthetic://demo/{first_frame:06d}",
                          "response": text})
            chunk += 1
    extractions = [
        extraction([("raccoon", "a raccoon"), ("waterhole", "a waterhole")],
                   [("raccoon", "waterhole", "approaches")]),
        extraction([("raccoon", "a raccoon"), ("waterhole", "a waterhole")],
                   [("raccoon", "waterhole", "drinks_at")]),
        extraction([("heron", "a grey heron"), ("waterhole", "a waterhole")]),
        extraction([("raccoon", "a raccoon"), ("oak tree", "an oak tree")],
                   [("raccoon", "oak tree", "climbs")]),
        extraction([("heron", "a grey heron"), ("fish", "a small fish")],
                   [("heron", "fish", "catches")]),
    ]
    for (_, text), summary_id, extr in zip(BLOCKS, range(len(BLOCKS)), extractions):
        rules.append({"kind": "chat", "role": "describer", "contains": text,
                      "response": f"summary-{summary_id}: {text}"})
        rules.append({"kind": "chat", "role": "extractor", "contains": text,
                      "response": extr})
    rules.append({"kind": "chat", "role": "sa_reasoner", "contains": "Suggest up to",
                  "response": '["raccoon", "oak tree"]'})
    rules.append({"kind": "chat", "role": "sa_reasoner",
                  "response": "The timeline shows the raccoon drinking and then "
                              "climbing the oak tree.\nAnswer: it climbed the "
                              "oak tree"})
    pair_scores = []
    texts = [t for _, t in BLOCKS]
    for i in range(len(texts)):
        for j in range(i + 1, len(texts)):
            pair_scores.append([texts[i], texts[j], 0.1])
    mock = {"dim": 16, "rules": rules, "pair_scores": pair_scores}

    stream_path = workdir / "stream.json"
    mock_path = workdir / "mock.json"
    stream_path.write_text(json.dumps(stream, indent=2))
    mock_path.write_text(json.dumps(mock, indent=2))

    config_path = workdir / "config.yaml"
    config_path.write_text(f"""store_path: store
audit_dir: audit
scenario: wildlife
log_level: WARNING
clustering:
  k_policy: fixed
  k_fixed: 5
gateway:
  backend: mock
  mock_script: {mock_path.name}
""")
    return config_path, stream_path, mock_path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="demo_run")
    parser.add_argument("--depth", type=int, default=None)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    if workdir.exists():
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True)
    config_path, stream_path, _ = build_fixture(workdir)

    print("== ingest ==")
    code = cli_main(["ingest", "--config", str(config_path),
                     "--source", str(stream_path)])
    if code != 0:
        return code

    print("\n== query ==")
    print(f"query: {QUERY}")
    query_args = ["query", "--config", str(config_path), "--text", QUERY]
    if args.depth is not None:
        query_args += ["--depth", str(args.depth)]
    return cli_main(query_args)


if __name__ == "__main__":
    sys.exit(main())
