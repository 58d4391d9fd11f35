"""Shared synthetic-stream fixtures: block-structured scenes with mock scripts.

A "block" is a run of uniform chunks that share one scripted description, so
pairwise scores are 1.0 inside the block and a scripted low value across
blocks; the merge stage must recover exactly the block structure.
"""

import json
from pathlib import Path

FIG_BLOCK_SIZES = [2, 3, 1, 2, 2, 3, 1, 2, 2]   # 18 uniform chunks -> 9 groups

E2E_BLOCK_SIZES = [3, 2, 2, 3, 2]               # 12 uniform chunks -> 5 events
E2E_BLOCK_TEXTS = [
    "A raccoon approaches the waterhole and sniffs the muddy bank.",
    "The raccoon drinks at the waterhole in the evening light.",
    "A grey heron lands near the water and stands still.",
    "The raccoon climbs the old oak tree beside the waterhole.",
    "The heron catches a small fish and swallows it whole.",
]
E2E_QUERY = "What did the raccoon do after drinking at the waterhole?"


def block_fixture(stream_id: str, block_sizes: list[int], *,
                  chunk_seconds: float = 3.0, fps: float = 1.0, dim: int = 16,
                  block_texts: list[str] | None = None,
                  cross_score: float = 0.1) -> tuple[dict, dict]:
    """Returns (stream script, mock script) for a block-structured scene."""
    n_chunks = sum(block_sizes)
    stream = {"stream_id": stream_id, "duration": n_chunks * chunk_seconds,
              "fps": fps}
    if block_texts is None:
        block_texts = [f"scene-{b:02d}: the same activity continues."
                       for b in range(len(block_sizes))]
    assert len(block_texts) == len(block_sizes)

    rules = []
    chunk = 0
    for text, size in zip(block_texts, block_sizes):
        for _ in range(size):
            first_frame = int(round(chunk * chunk_seconds * fps))
            rules.append({"kind": "vision_chat",
                          "contains": f"synthetic://{stream_id}/{first_frame:06d}",
                          "response": text})
            chunk += 1
    pair_scores = []
    for i in range(len(block_texts)):
        for j in range(i + 1, len(block_texts)):
            pair_scores.append([block_texts[i], block_texts[j], cross_score])
    mock = {"dim": dim, "rules": rules, "pair_scores": pair_scores}
    return stream, mock


def fig18_fixture(stream_id: str = "cam") -> tuple[dict, dict]:
    return block_fixture(stream_id, FIG_BLOCK_SIZES)


def _extraction(entities, relations=(), participations=()):
    return json.dumps({
        "entities": [{"name": n, "description": d} for n, d in entities],
        "relations": [{"source": s, "target": t, "label": l}
                      for s, t, l in relations],
        "participations": [{"name": n, "role": r} for n, r in participations],
    })


def e2e_fixture(stream_id: str = "demo") -> tuple[dict, dict]:
    """The scripted end-to-end scenario: 12 chunks, 5 entities, 1 query."""
    stream, mock = block_fixture(stream_id, E2E_BLOCK_SIZES,
                                 block_texts=E2E_BLOCK_TEXTS)
    summaries = [f"summary-b{i}: {text}" for i, text in enumerate(E2E_BLOCK_TEXTS)]
    extractions = [
        _extraction([("raccoon", "a raccoon at the bank"),
                     ("waterhole", "a muddy waterhole")],
                    [("raccoon", "waterhole", "approaches")],
                    [("raccoon", "subject")]),
        _extraction([("raccoon", "the drinking raccoon"),
                     ("waterhole", "the waterhole")],
                    [("raccoon", "waterhole", "drinks_at")]),
        _extraction([("heron", "a grey heron"), ("waterhole", "the waterhole")],
                    [("heron", "waterhole", "stands_near")]),
        _extraction([("raccoon", "the climbing raccoon"),
                     ("oak tree", "an old oak tree")],
                    [("raccoon", "oak tree", "climbs")]),
        _extraction([("heron", "the hunting heron"), ("fish", "a small fish")],
                    [("heron", "fish", "catches")]),
    ]
    for text, summary in zip(E2E_BLOCK_TEXTS, summaries):
        mock["rules"].append({"kind": "chat", "role": "describer",
                              "contains": text, "response": summary})
    for text, extraction in zip(E2E_BLOCK_TEXTS, extractions):
        mock["rules"].append({"kind": "chat", "role": "extractor",
                              "contains": text, "response": extraction})
    mock["rules"].append({"kind": "chat", "role": "sa_reasoner",
                          "contains": "Suggest up to",
                          "response": '["raccoon", "oak tree"]'})
    mock["rules"].append({"kind": "chat", "role": "sa_reasoner",
                          "response": "The raccoon climbed the oak tree after "
                                      "drinking.\nAnswer: A"})
    mock["rules"].append({"kind": "vision_chat", "role": "ca_reasoner",
                          "response": "The frames confirm the climb.\nAnswer: A"})
    return stream, mock


def write_fixture(tmp_dir: Path, stream: dict, mock: dict,
                  prefix: str = "fixture") -> tuple[Path, Path]:
    stream_path = tmp_dir / f"{prefix}_stream.json"
    mock_path = tmp_dir / f"{prefix}_mock.json"
    stream_path.write_text(json.dumps(stream, indent=2))
    mock_path.write_text(json.dumps(mock, indent=2))
    return stream_path, mock_path


def half_stream(stream: dict, n_chunks: int, chunk_seconds: float = 3.0) -> dict:
    """The same stream truncated after ``n_chunks`` uniform chunks."""
    return {**stream, "duration": n_chunks * chunk_seconds}
