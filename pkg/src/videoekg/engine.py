"""Pipeline orchestration shared by the CLI and the HTTP service.

The engine owns one graph, one gateway, one store directory and the audit
directory. Ingestion is the single writer (one job per stream at a time);
queries run against graph snapshots, so a long ingest never blocks reads
and a query only ever sees fully flushed events. Progress is durable:
resuming an interrupted ingest skips every uniform chunk at or below the
stream's persisted high-water mark, so re-running the same source adds no
duplicate events.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import store as store_mod
from .chunking import FrameStream, buffer_uniform, ingest_stream
from .config import AppConfig, PromptLibrary
from .entities import EntityLinker
from .errors import EmptyGraph, EmptyStream, VideoEkgError
from .gateway import ModelGateway, build_gateway
from .generation import ConsistencyGenerator
from .graph import EventGraph
from .retrieval import RetrievalConfig, Retriever
from .search import SearchConfig, SearchEngine

logger = logging.getLogger(__name__)

FLUSH_EVERY_EVENTS = 256


@dataclass
class IngestReport:
    stream_id: str
    uniform_chunks: int
    skipped_chunks: int
    events: int
    mentions: int
    clusters: int
    relations: int
    gateway_calls: dict[str, int]
    calls_per_chunk: float
    wall_seconds: float


@dataclass
class QueryOutcome:
    answer: str
    score: float
    source: str
    degraded: bool
    leaf_count: int
    audit_path: str
    audit: dict = field(repr=False, default_factory=dict)


def canonical_audit_bytes(audit: dict) -> bytes:
    return (json.dumps(audit, sort_keys=True, separators=(",", ":"),
                       ensure_ascii=False) + "\n").encode("utf-8")


class AnalyticsEngine:
    def __init__(self, config: AppConfig, gateway: ModelGateway | None = None):
        self.config = config
        self.gateway = gateway or build_gateway(config.gateway)
        self.prompts = PromptLibrary(config.prompt_dir)
        self._write_lock = threading.Lock()
        self._active_streams: set[str] = set()
        self._streams_state: dict[str, dict] = {}
        self.graph = EventGraph()
        if config.store_path and Path(config.store_path, "manifest.json").is_file():
            self.graph, manifest = store_mod.load(config.store_path)
            self._streams_state = manifest.get("streams", {})
            logger.info("loaded store with %d events", len(self.graph))

    # -- ingestion ---------------------------------------------------------

    def ingest_source(self, source: str | Path) -> IngestReport:
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(f"stream source not found: {path}")
        stream = FrameStream.from_path(path)
        return self.ingest(stream)

    def is_ingesting(self, stream_id: str) -> bool:
        with self._write_lock:
            return stream_id in self._active_streams

    def ingest(self, stream: FrameStream) -> IngestReport:
        with self._write_lock:
            if stream.stream_id in self._active_streams:
                raise VideoEkgError(f"stream {stream.stream_id!r} already ingesting")
            self._active_streams.add(stream.stream_id)
        try:
            return self._ingest_locked(stream)
        finally:
            self._active_streams.discard(stream.stream_id)

    def _ingest_locked(self, stream: FrameStream) -> IngestReport:
        t0 = time.monotonic()
        calls_before = self.gateway.call_counts()
        resumed_from = int(self._streams_state.get(stream.stream_id, {})
                           .get("ingested_until", -1))
        high_water = resumed_from
        linker = EntityLinker(self.graph, self.gateway, self.config.clustering,
                              self.prompts.text("extract_entities"))
        unflushed = 0

        def on_event(event, last_chunk_index: int) -> None:
            nonlocal unflushed, high_water
            linker.process_event(event)
            high_water = last_chunk_index
            unflushed += 1
            if unflushed >= FLUSH_EVERY_EVENTS:
                linker.checkpoint(force=True)
                self._flush(stream.stream_id, high_water)
                unflushed = 0

        try:
            all_chunks = buffer_uniform(stream, self.config.chunking)
        except EmptyStream:
            all_chunks = []
        events = []
        if all_chunks:
            events = ingest_stream(
                stream, self.graph, self.gateway, self.config.chunking,
                self.prompts, scenario=self.config.scenario,
                skip_until_chunk=resumed_from, on_event=on_event)
        linker.checkpoint(force=True)
        self._flush(stream.stream_id, high_water)

        calls_after = self.gateway.call_counts()
        delta = {k: calls_after.get(k, 0) - calls_before.get(k, 0)
                 for k in sorted(set(calls_before) | set(calls_after))}
        total_calls = sum(delta.values())
        skipped = sum(1 for c in all_chunks if c.chunk_index <= resumed_from)
        processed = len(all_chunks) - skipped
        stats = self.graph.stats()
        return IngestReport(
            stream_id=stream.stream_id,
            uniform_chunks=len(all_chunks),
            skipped_chunks=skipped,
            events=len(events),
            mentions=stats["mentions"],
            clusters=stats["clusters"],
            relations=sum(stats["relations"].values()),
            gateway_calls=delta,
            calls_per_chunk=(total_calls / processed) if processed else 0.0,
            wall_seconds=time.monotonic() - t0)

    def _flush(self, stream_id: str, high_water: int) -> None:
        if high_water >= 0:
            self._streams_state.setdefault(stream_id, {})["ingested_until"] = high_water
        if self.config.store_path:
            store_mod.persist(self.graph, self.config.store_path, self._streams_state)

    # -- queries -----------------------------------------------------------

    def answer(self, query_text: str, depth: int | None = None,
               k: int | None = None) -> QueryOutcome:
        snapshot = self.graph.snapshot()
        if len(snapshot) == 0:
            raise EmptyGraph("the store holds no events yet")
        retrieval_config = self.config.retrieval
        if k is not None:
            retrieval_config = RetrievalConfig(
                k_per_view=k, view_weights=dict(self.config.retrieval.view_weights))
        search_config = self.config.search
        if depth is not None:
            search_config = SearchConfig(
                max_depth=depth, cap=self.config.search.cap,
                hops_per_step=self.config.search.hops_per_step,
                requery_keywords_max=self.config.search.requery_keywords_max)
        index = store_mod.VectorIndex(snapshot)
        retriever = Retriever(snapshot, index, self.gateway, retrieval_config)
        searcher = SearchEngine(snapshot, retriever, self.gateway, search_config,
                                self.prompts)
        generator = ConsistencyGenerator(snapshot, self.gateway,
                                         self.config.generation, self.prompts)
        result = searcher.search(query_text)
        final, audit = generator.answer_query(query_text, result)
        audit["search_trace"] = result.trace
        audit["settings"] = {"depth": search_config.max_depth,
                             "k_per_view": retrieval_config.k_per_view,
                             "cap": search_config.cap,
                             "n_samples": self.config.generation.n_samples,
                             "lambda": self.config.generation.lambda_weight}
        audit_path = self._write_audit(audit)
        return QueryOutcome(answer=final.answer, score=final.score,
                            source=final.source, degraded=final.degraded,
                            leaf_count=len(result.sa_leaves),
                            audit_path=audit_path, audit=audit)

    def _write_audit(self, audit: dict) -> str:
        payload = canonical_audit_bytes(audit)
        digest = hashlib.sha256(payload).hexdigest()[:16]
        audit_dir = Path(self.config.audit_dir or "./audit")
        audit_dir.mkdir(parents=True, exist_ok=True)
        path = audit_dir / f"q-{digest}.json"
        path.write_bytes(payload)
        return str(path)

    def stats(self) -> dict:
        stats = self.graph.snapshot().stats()
        stats["schema_version"] = store_mod.SCHEMA_VERSION
        stats["streams_state"] = dict(self._streams_state)
        return stats
