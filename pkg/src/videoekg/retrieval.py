"""Tri-view retrieval and Borda-count fusion into one ranked event list.

A query is embedded once and searched against three vector collections:
event description texts, canonical-entity centroids, and raw frame vision
embeddings. Entity and vision hits fan out to their owning events, taking
the maximum similarity when several hits map to the same event. Per view,
each retrieved event's similarity is normalized by the view's similarity
mass; the final score sums the (optionally weighted) per-view shares, so a
positive rescaling of any single view changes nothing.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateViewWarning, EmptyGraph
from .gateway import ModelGateway
from .graph import ENTITY_EVENT, EventGraph
from .store import VectorIndex

logger = logging.getLogger(__name__)

VIEWS = ("event", "entity", "vision")


@dataclass
class RetrievalConfig:
    k_per_view: int = 8
    view_weights: dict[str, float] = field(
        default_factory=lambda: {"event": 1.0, "entity": 1.0, "vision": 1.0})

    def __post_init__(self) -> None:
        if self.k_per_view < 1:
            raise ValueError("k_per_view must be at least 1")
        for view in VIEWS:
            self.view_weights.setdefault(view, 1.0)
        unknown = set(self.view_weights) - set(VIEWS)
        if unknown:
            raise ValueError(f"unknown views in weights: {sorted(unknown)}")


@dataclass
class RankedEntry:
    event_id: str
    borda_score: float
    per_view: dict[str, float] = field(default_factory=dict)


@dataclass
class RankedEventList:
    entries: list[RankedEntry]
    query_text: str
    query_embedding: np.ndarray

    def event_ids(self) -> list[str]:
        return [e.event_id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def borda_scores(per_view_hits: dict[str, list[tuple[str, float]]],
                 weights: dict[str, float] | None = None) -> dict[str, float]:
    """Fuse per-view similarity lists into final scores.

    Negative similarities are clamped to zero before normalization so the
    per-view share stays well-defined; a view whose clamped mass is zero is
    skipped with a DegenerateViewWarning. Events absent from a view simply
    contribute nothing for it.
    """
    weights = weights or {}
    totals: dict[str, float] = {}
    for view, hits in per_view_hits.items():
        clamped = []
        for event_id, sim in hits:
            if sim < 0:
                logger.info("clamping negative similarity %.4f for %s in %s view",
                            sim, event_id, view)
                sim = 0.0
            clamped.append((event_id, sim))
        mass = sum(s for _, s in clamped)
        if hits and mass <= 0:
            warnings.warn(f"view {view!r} has non-positive similarity mass; skipped",
                          DegenerateViewWarning, stacklevel=2)
            continue
        weight = weights.get(view, 1.0)
        for event_id, sim in clamped:
            totals[event_id] = totals.get(event_id, 0.0) + weight * sim / mass
    return totals


class Retriever:
    """Runs the three views against one graph snapshot."""

    def __init__(self, graph: EventGraph, index: VectorIndex,
                 gateway: ModelGateway, config: RetrievalConfig | None = None):
        self.graph = graph
        self.index = index
        self.gateway = gateway
        self.config = config or RetrievalConfig()

    def retrieve_view(self, view: str, query_embedding: np.ndarray,
                      k: int) -> list[tuple[str, float]]:
        """Per-view hits mapped to events, max-aggregated, similarity-ordered."""
        if view == "event":
            return self.index.top_k("event_text", query_embedding, k)
        if view == "entity":
            hits = self.index.top_k("entity_centroid", query_embedding, k)
            best: dict[str, float] = {}
            for cluster_id, sim in hits:
                for event_id in self._cluster_events(cluster_id):
                    if sim > best.get(event_id, -np.inf):
                        best[event_id] = sim
            return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
        if view == "vision":
            hits = self.index.top_k("frame_vision", query_embedding, k)
            best = {}
            for frame_key, sim in hits:
                event_id = self.index.owner_event(frame_key)
                if sim > best.get(event_id, -np.inf):
                    best[event_id] = sim
            return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
        raise ValueError(f"unknown view {view!r}")

    def _cluster_events(self, cluster_id: str) -> list[str]:
        return sorted(r.target_id for r in self.graph.relations
                      if r.kind == ENTITY_EVENT and r.source_id == cluster_id)

    def embed_query(self, query_text: str) -> np.ndarray:
        return self.gateway.embed_text("embedder", [query_text])[0]

    def tri_view_retrieve(self, query_text: str, k: int | None = None,
                          query_embedding: np.ndarray | None = None) -> RankedEventList:
        """Embed once, retrieve the three views, Borda-fuse and rank."""
        if len(self.graph) == 0:
            raise EmptyGraph("cannot retrieve from an empty graph")
        k = k or self.config.k_per_view
        if query_embedding is None:
            query_embedding = self.embed_query(query_text)
        with ThreadPoolExecutor(max_workers=len(VIEWS)) as pool:
            results = list(pool.map(
                lambda view: (view, self.retrieve_view(view, query_embedding, k)),
                VIEWS))
        per_view = {view: hits for view, hits in results}
        totals = borda_scores(per_view, self.config.view_weights)
        raw: dict[str, dict[str, float]] = {}
        for view, hits in per_view.items():
            for event_id, sim in hits:
                raw.setdefault(event_id, {})[view] = sim
        if not totals and raw:
            # Every view was degenerate (all similarities clamped to zero).
            # Still surface the nearest events rather than an empty ranking.
            totals = {event_id: 0.0 for event_id in raw}
        entries = [RankedEntry(event_id, score, raw.get(event_id, {}))
                   for event_id, score in totals.items()]
        entries.sort(key=lambda e: (-e.borda_score,
                                    self.graph.event(e.event_id).start_time,
                                    e.event_id))
        return RankedEventList(entries=entries, query_text=query_text,
                               query_embedding=query_embedding)
