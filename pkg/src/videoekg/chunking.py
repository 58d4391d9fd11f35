"""Turns a frame stream into semantic chunks and graph events.

Pipeline: uniform buffering into fixed-length chunks, per-chunk description
through the gateway's vision role, pairwise text-similarity scoring, greedy
merging of adjacent chunks into semantic chunks, then summarization and
event creation. Merging applies two criteria: every pair of chunks inside a
group must score above ``tau_in``, and a group is cut early whenever the
similarity across its right boundary drops to ``tau_bound`` or below.

The streaming path (:class:`StreamingMerger`) only ever scores a new chunk
against the currently open group, so the number of gateway calls spent per
uniform chunk is bounded by a constant (at most ``max_merge_span`` scores)
no matter how long the stream runs. The full-matrix path
(:func:`pairwise_similarity` + :func:`merge_semantic`) exists for offline
use and produces identical partitions.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import EmptyResponse, EmptyStream, SizeMismatch
from .gateway import ModelGateway
from .graph import EventGraph, EventRecord, FrameRef

logger = logging.getLogger(__name__)


@dataclass
class ChunkingConfig:
    chunk_seconds: float = 3.0
    tau_in: float = 0.65
    tau_bound: float = 0.50
    max_merge_span: int = 64

    def __post_init__(self) -> None:
        if self.chunk_seconds <= 0:
            raise ValueError("chunk_seconds must be positive")
        if not 0 < self.tau_in < 1:
            raise ValueError("tau_in must lie in (0, 1)")
        if not 0 < self.tau_bound < 1:
            raise ValueError("tau_bound must lie in (0, 1)")
        if self.tau_bound > self.tau_in:
            raise ValueError("tau_bound must not exceed tau_in")
        if self.max_merge_span < 1:
            raise ValueError("max_merge_span must be at least 1")


@dataclass(frozen=True)
class StreamFrame:
    stream_id: str
    timestamp: float
    locator: str


@dataclass
class FrameStream:
    """A time-ordered frame sequence with an optional declared duration."""

    stream_id: str
    frames: list[StreamFrame]
    duration: float | None = None

    @classmethod
    def from_lines(cls, text: str) -> "FrameStream":
        """Parse the newline format ``stream_id,timestamp_seconds,locator``."""
        frames: list[StreamFrame] = []
        stream_id = ""
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",", 2)]
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'stream_id,timestamp,locator'")
            sid, ts, locator = parts
            if stream_id and sid != stream_id:
                raise ValueError(f"line {lineno}: mixed stream ids {stream_id!r}/{sid!r}")
            stream_id = sid
            frames.append(StreamFrame(sid, float(ts), locator))
        frames.sort(key=lambda f: f.timestamp)
        return cls(stream_id=stream_id, frames=frames)

    @classmethod
    def from_script(cls, script: dict) -> "FrameStream":
        """Build a synthetic stream from a test script.

        Script keys: ``stream_id``, ``duration`` (seconds), ``fps``
        (default 1.0) or an explicit ``frames`` list of
        ``[timestamp, locator]`` pairs.
        """
        sid = script["stream_id"]
        duration = script.get("duration")
        if "frames" in script:
            frames = [StreamFrame(sid, float(t), loc) for t, loc in script["frames"]]
        else:
            fps = float(script.get("fps", 1.0))
            if duration is None:
                raise ValueError("synthetic stream needs 'duration' or 'frames'")
            n = int(round(duration * fps))
            frames = [StreamFrame(sid, i / fps, f"synthetic://{sid}/{i:06d}")
                      for i in range(n)]
        frames.sort(key=lambda f: f.timestamp)
        return cls(stream_id=sid, frames=frames, duration=duration)

    @classmethod
    def from_path(cls, path: str | Path) -> "FrameStream":
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_script(json.loads(path.read_text()))
        return cls.from_lines(path.read_text())

    def end_time(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        return self.frames[-1].timestamp if self.frames else 0.0


@dataclass(eq=False)
class UniformChunk:
    chunk_index: int
    start_time: float
    end_time: float
    frames: list[StreamFrame]
    description: str = ""
    frame_embeddings: list[np.ndarray] = field(default_factory=list)


@dataclass(eq=False)
class SemanticChunk:
    """A contiguous run of uniform chunks merged into one event-to-be."""

    chunks: list[UniformChunk]
    summary: str = ""

    @property
    def start_time(self) -> float:
        return self.chunks[0].start_time

    @property
    def end_time(self) -> float:
        return self.chunks[-1].end_time

    @property
    def first_index(self) -> int:
        return self.chunks[0].chunk_index

    @property
    def last_index(self) -> int:
        return self.chunks[-1].chunk_index

    @property
    def description(self) -> str:
        return "\n".join(c.description for c in self.chunks)


def buffer_uniform(stream: FrameStream, config: ChunkingConfig) -> list[UniformChunk]:
    """Tile the stream into fixed-length chunks without gaps or overlaps.

    The final chunk may be shorter than ``chunk_seconds``; it is kept so
    streams of any length are fully covered.
    """
    if not stream.frames:
        raise EmptyStream(f"stream {stream.stream_id!r} yielded no frames")
    size = config.chunk_seconds
    end = max(stream.end_time(), stream.frames[-1].timestamp)
    # The 1e-9 slack keeps an exact-multiple duration from spawning an
    # empty trailing chunk through float noise.
    n_chunks = max(1, int(np.ceil(end / size - 1e-9)))
    chunks = [UniformChunk(i, i * size, min((i + 1) * size, end), [])
              for i in range(n_chunks)]
    for frame in stream.frames:
        idx = min(int(frame.timestamp // size), n_chunks - 1)
        chunks[idx].frames.append(frame)
    return chunks


def describe_chunk(chunk: UniformChunk, scenario_prompt: str,
                   gateway: ModelGateway) -> str:
    """Ask the describer role for a textual description of one chunk."""
    if not chunk.frames:
        raise ValueError(f"chunk {chunk.chunk_index} has no frames to describe")
    prompt = scenario_prompt.format(start_time=chunk.start_time,
                                    end_time=chunk.end_time,
                                    stream_id=chunk.frames[0].stream_id)
    text = gateway.vision_chat("describer", [f.locator for f in chunk.frames], prompt)
    if not text.strip():
        raise EmptyResponse(f"describer returned empty text for chunk {chunk.chunk_index}")
    chunk.description = text
    return text


class SimilarityMatrix:
    """Symmetric pairwise text-similarity matrix with a unit diagonal."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("similarity matrix must be square")
        if not np.allclose(values, values.T, atol=1e-9):
            raise ValueError("similarity matrix must be symmetric")
        if not np.all(np.diag(values) == 1.0):
            raise ValueError("similarity diagonal must be exactly 1")
        if values.min() < -1.0 - 1e-9 or values.max() > 1.0 + 1e-9:
            raise ValueError("similarities must lie in [-1, 1]")
        self.values = values

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, key):
        return self.values[key]


def pairwise_similarity(descriptions: Sequence[str], gateway: ModelGateway,
                        max_workers: int = 8) -> SimilarityMatrix:
    """Full pairwise score matrix; off-diagonal pairs scored in parallel."""
    n = len(descriptions)
    if n == 0:
        raise ValueError("need at least one description")
    values = np.eye(n, dtype=np.float64)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        scores = list(pool.map(
            lambda p: gateway.pair_score("scorer", descriptions[p[0]], descriptions[p[1]]),
            pairs))
    for (i, j), s in zip(pairs, scores):
        values[i, j] = values[j, i] = s
    return SimilarityMatrix(values)


def merge_semantic(chunks: Sequence[UniformChunk], matrix: SimilarityMatrix,
                   config: ChunkingConfig) -> list[SemanticChunk]:
    """Greedy left-to-right partition of the chunk sequence.

    A group absorbs the next chunk only while every in-group pair stays
    above ``tau_in`` and the group is below ``max_merge_span``; a boundary
    score at or below ``tau_bound`` cuts the group immediately.
    """
    if matrix.size != len(chunks):
        raise SizeMismatch(f"matrix is {matrix.size}x{matrix.size} "
                           f"for {len(chunks)} chunks")
    groups: list[SemanticChunk] = []
    current = [0]
    for j in range(1, len(chunks)):
        extend = False
        if len(current) < config.max_merge_span and matrix[current[-1], j] > config.tau_bound:
            extend = all(matrix[i, j] > config.tau_in for i in current)
        if extend:
            current.append(j)
        else:
            groups.append(SemanticChunk([chunks[i] for i in current]))
            current = [j]
    groups.append(SemanticChunk([chunks[i] for i in current]))
    return groups


def summarize_semantic(sem: SemanticChunk, summary_prompt: str,
                       gateway: ModelGateway) -> str:
    """One summary text covering all member-chunk descriptions."""
    for chunk in sem.chunks:
        if not chunk.description:
            raise ValueError(f"chunk {chunk.chunk_index} has no description yet")
    prompt = summary_prompt.format(descriptions=sem.description,
                                   start_time=sem.start_time, end_time=sem.end_time)
    text = gateway.chat("describer", [{"role": "user", "content": prompt}])
    if not text.strip():
        raise EmptyResponse("summarizer returned empty text")
    sem.summary = text
    return text


class StreamingMerger:
    """Sequential merge reducer; scores only against the open group.

    Decisions are identical to :func:`merge_semantic` over the full matrix:
    the boundary check against the last member runs first (and is the only
    score needed to cut a group), then the remaining in-group pairs are
    checked. Per fed chunk this costs at most ``max_merge_span`` gateway
    scores, independent of stream length.
    """

    def __init__(self, config: ChunkingConfig, gateway: ModelGateway):
        self.config = config
        self.gateway = gateway
        self._open: list[UniformChunk] = []

    def feed(self, chunk: UniformChunk) -> SemanticChunk | None:
        """Add a described chunk; returns the closed group, if any."""
        if not self._open:
            self._open = [chunk]
            return None
        boundary = self.gateway.pair_score("scorer", self._open[-1].description,
                                           chunk.description)
        extend = False
        if len(self._open) < self.config.max_merge_span and boundary > self.config.tau_bound:
            extend = boundary > self.config.tau_in and all(
                self.gateway.pair_score("scorer", member.description, chunk.description)
                > self.config.tau_in
                for member in self._open[:-1])
        if extend:
            self._open.append(chunk)
            return None
        closed = SemanticChunk(self._open)
        self._open = [chunk]
        return closed

    def close(self) -> SemanticChunk | None:
        """Flush the open group at end of stream."""
        if not self._open:
            return None
        closed = SemanticChunk(self._open)
        self._open = []
        return closed


def ingest_stream(stream: FrameStream, graph: EventGraph, gateway: ModelGateway,
                  config: ChunkingConfig, prompts, scenario: str = "general",
                  skip_until_chunk: int = -1,
                  on_event: Callable[[EventRecord, int], None] | None = None,
                  describe_workers: int = 8) -> list[EventRecord]:
    """Run the full construction pipeline for one stream.

    Each closed semantic chunk becomes one event: description is the joined
    member descriptions, summary comes from the summarizer, the text
    embedding from the embedder role, and every member frame is embedded
    once and attached as a frame reference. ``skip_until_chunk`` implements
    idempotent resume: uniform chunks up to that index are dropped before
    any gateway call is made. ``on_event(event, last_chunk_index)`` fires
    after each event lands in the graph, so callers can flush durably.
    """
    chunks = buffer_uniform(stream, config)
    chunks = [c for c in chunks if c.chunk_index > skip_until_chunk and c.frames]
    if not chunks:
        return []

    describe_tpl = prompts.text(f"describe_{scenario}")
    summary_tpl = prompts.text("summarize")
    merger = StreamingMerger(config, gateway)
    events: list[EventRecord] = []

    def prepare(chunk: UniformChunk) -> UniformChunk:
        describe_chunk(chunk, describe_tpl, gateway)
        chunk.frame_embeddings = gateway.embed_image(
            "embedder", [f.locator for f in chunk.frames])
        return chunk

    def emit(sem: SemanticChunk) -> None:
        summarize_semantic(sem, summary_tpl, gateway)
        event = _event_from_semantic(stream.stream_id, sem, gateway)
        graph.add_event(event)
        events.append(event)
        if on_event is not None:
            on_event(event, sem.last_index)

    batch = max(1, describe_workers)
    with ThreadPoolExecutor(max_workers=batch) as pool:
        for offset in range(0, len(chunks), batch):
            # Batches run concurrently; the merge reducer consumes in order.
            for chunk in pool.map(prepare, chunks[offset:offset + batch]):
                closed = merger.feed(chunk)
                if closed is not None:
                    emit(closed)
    tail = merger.close()
    if tail is not None:
        emit(tail)
    return events


def _event_from_semantic(stream_id: str, sem: SemanticChunk,
                         gateway: ModelGateway) -> EventRecord:
    description = sem.description
    embedding = gateway.embed_text("embedder", [description])[0]
    refs = []
    for chunk in sem.chunks:
        for frame, vec in zip(chunk.frames, chunk.frame_embeddings):
            refs.append(FrameRef(stream_id, frame.timestamp, vec, frame.locator))
    return EventRecord(
        event_id=f"{stream_id}:e{sem.first_index:05d}",
        stream_id=stream_id,
        start_time=sem.start_time,
        end_time=sem.end_time,
        description=description,
        summary=sem.summary,
        text_embedding=embedding,
        frame_refs=refs,
    )
