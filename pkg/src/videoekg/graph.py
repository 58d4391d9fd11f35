"""Event knowledge graph: events, entity clusters, mentions and relations.

The graph holds three relation families. Temporal event-to-event relations
form a per-stream before/after chain between *consecutive* events only;
longer-range temporal order is derived from the ordered event list rather
than stored. Entity-to-entity relations carry semantic labels between
clusters, and entity-to-event relations attach a cluster to the events its
mentions appeared in.

Writer discipline: one writer at a time mutates the graph under its lock;
readers call :meth:`EventGraph.snapshot` and get a consistent, immutable
view that is safe to use from any thread.
"""

from __future__ import annotations

import bisect
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionError, IntegrityWarning, OverlapError, UnknownId)

EVENT_EVENT = "event_event"
ENTITY_ENTITY = "entity_entity"
ENTITY_EVENT = "entity_event"
RELATION_KINDS = (EVENT_EVENT, ENTITY_ENTITY, ENTITY_EVENT)

UNIT_NORM_TOL = 1e-6


@dataclass(eq=False)
class FrameRef:
    """Reference to one raw frame: locator plus its vision embedding."""

    stream_id: str
    timestamp: float
    vision_embedding: np.ndarray
    locator: str


@dataclass(eq=False)
class EventRecord:
    """One semantic chunk promoted to a graph event. Immutable once added."""

    event_id: str
    stream_id: str
    start_time: float
    end_time: float
    description: str
    summary: str
    text_embedding: np.ndarray
    frame_refs: list[FrameRef] = field(default_factory=list)


@dataclass(eq=False)
class EntityMention:
    """A raw entity occurrence extracted from one event.

    ``links`` holds mention-level semantic relations (target mention id,
    label) and ``roles`` the participation roles within the owning event;
    both are kept so the cluster-level relations can be rebuilt from
    scratch whenever the mention set is re-clustered.
    """

    mention_id: str
    event_id: str
    name: str
    description: str = ""
    embedding: np.ndarray | None = None
    links: list[tuple[str, str]] = field(default_factory=list)
    roles: list[str] = field(default_factory=list)


@dataclass(eq=False)
class EntityCluster:
    """A canonical entity: a group of mentions with their centroid vector."""

    cluster_id: str
    member_ids: tuple[str, ...]
    centroid: np.ndarray
    canonical_name: str


@dataclass(frozen=True)
class Relation:
    kind: str
    source_id: str
    target_id: str
    label: str


def _check_unit(vec: np.ndarray, what: str) -> None:
    norm = float(np.linalg.norm(vec))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"{what} must be unit-normalized (norm={norm:.8f})")


class EventGraph:
    """Mutable event knowledge graph with snapshot isolation for readers."""

    def __init__(self) -> None:
        self.dimension: int | None = None
        self._streams: dict[str, list[EventRecord]] = {}
        self._starts: dict[str, list[float]] = {}   # kept parallel to _streams
        self._events_by_id: dict[str, EventRecord] = {}
        self.clusters: dict[str, EntityCluster] = {}
        self.mentions: dict[str, EntityMention] = {}
        self.relations: set[Relation] = set()
        self._lock = threading.RLock()

    # -- basic accessors ---------------------------------------------------

    @property
    def events(self) -> list[EventRecord]:
        """All events, ordered by (stream_id, start_time)."""
        with self._lock:
            out: list[EventRecord] = []
            for sid in sorted(self._streams):
                out.extend(self._streams[sid])
            return out

    def stream_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._streams)

    def stream_events(self, stream_id: str) -> list[EventRecord]:
        with self._lock:
            return list(self._streams.get(stream_id, []))

    def event(self, event_id: str) -> EventRecord:
        try:
            return self._events_by_id[event_id]
        except KeyError:
            raise UnknownId(f"unknown event {event_id!r}") from None

    def has_event(self, event_id: str) -> bool:
        return event_id in self._events_by_id

    def relations_of_kind(self, kind: str) -> set[Relation]:
        with self._lock:
            return {r for r in self.relations if r.kind == kind}

    def __len__(self) -> int:
        return len(self._events_by_id)

    # -- mutation ------------------------------------------------------------

    def _check_dimension(self, vec: np.ndarray, what: str) -> None:
        if vec.ndim != 1:
            raise DimensionError(f"{what} must be a 1-d vector")
        if self.dimension is None:
            self.dimension = int(vec.shape[0])
        elif vec.shape[0] != self.dimension:
            raise DimensionError(
                f"{what} has dimension {vec.shape[0]}, graph uses {self.dimension}")

    def add_event(self, event: EventRecord) -> None:
        """Insert an event in temporal order and maintain the before/after chain.

        Raises OverlapError if the span intersects an existing event of the
        same stream, DimensionError on any embedding size mismatch.
        """
        if not event.start_time < event.end_time:
            raise ValueError(f"event {event.event_id}: start_time must precede end_time")
        with self._lock:
            if event.event_id in self._events_by_id:
                raise OverlapError(f"duplicate event id {event.event_id!r}")
            self._check_dimension(event.text_embedding, f"event {event.event_id} embedding")
            _check_unit(event.text_embedding, f"event {event.event_id} embedding")
            for ref in event.frame_refs:
                self._check_dimension(ref.vision_embedding,
                                      f"frame {ref.locator} embedding")
                if not (event.start_time <= ref.timestamp <= event.end_time):
                    raise ValueError(
                        f"frame at t={ref.timestamp} outside event span "
                        f"[{event.start_time}, {event.end_time}]")

            chain = self._streams.setdefault(event.stream_id, [])
            starts = self._starts.setdefault(event.stream_id, [])
            pos = bisect.bisect_left(starts, event.start_time)
            prev = chain[pos - 1] if pos > 0 else None
            nxt = chain[pos] if pos < len(chain) else None
            if prev is not None and prev.end_time > event.start_time:
                raise OverlapError(
                    f"event {event.event_id} [{event.start_time}, {event.end_time}) "
                    f"overlaps {prev.event_id} [{prev.start_time}, {prev.end_time})")
            if nxt is not None and event.end_time > nxt.start_time:
                raise OverlapError(
                    f"event {event.event_id} [{event.start_time}, {event.end_time}) "
                    f"overlaps {nxt.event_id} [{nxt.start_time}, {nxt.end_time})")

            chain.insert(pos, event)
            starts.insert(pos, event.start_time)
            self._events_by_id[event.event_id] = event
            if prev is not None and nxt is not None:
                # The newcomer breaks an existing adjacency.
                self.relations.discard(
                    Relation(EVENT_EVENT, prev.event_id, nxt.event_id, "before"))
                self.relations.discard(
                    Relation(EVENT_EVENT, nxt.event_id, prev.event_id, "after"))
            if prev is not None:
                self._link_chain(prev.event_id, event.event_id)
            if nxt is not None:
                self._link_chain(event.event_id, nxt.event_id)

    def _link_chain(self, earlier_id: str, later_id: str) -> None:
        self.relations.add(Relation(EVENT_EVENT, earlier_id, later_id, "before"))
        self.relations.add(Relation(EVENT_EVENT, later_id, earlier_id, "after"))

    def add_mention(self, mention: EntityMention) -> None:
        with self._lock:
            if mention.event_id not in self._events_by_id:
                raise UnknownId(f"mention {mention.mention_id} references unknown "
                                f"event {mention.event_id!r}")
            if not mention.name:
                raise ValueError(f"mention {mention.mention_id} has an empty name")
            if mention.embedding is not None:
                self._check_dimension(mention.embedding,
                                      f"mention {mention.mention_id} embedding")
            self.mentions[mention.mention_id] = mention

    def replace_entity_layer(self, clusters: list[EntityCluster],
                             relations: list[Relation]) -> None:
        """Atomically swap clusters and all entity-level relations.

        Called at re-clustering checkpoints: the event layer (events and
        their temporal chain) is untouched, every entity_entity and
        entity_event relation is replaced by the freshly derived set.
        """
        with self._lock:
            for cluster in clusters:
                for mid in cluster.member_ids:
                    if mid not in self.mentions:
                        raise UnknownId(f"cluster {cluster.cluster_id} references "
                                        f"unknown mention {mid!r}")
            for rel in relations:
                if rel.kind not in (ENTITY_ENTITY, ENTITY_EVENT):
                    raise ValueError(f"entity layer cannot hold {rel.kind} relations")
            self.clusters = {c.cluster_id: c for c in clusters}
            kept = {r for r in self.relations if r.kind == EVENT_EVENT}
            self.relations = kept | set(relations)

    # -- queries ---------------------------------------------------------

    def _neighbors(self, event_id: str, hops: int, direction: int) -> list[EventRecord]:
        if hops < 1:
            raise ValueError("hops must be a positive integer")
        with self._lock:
            event = self.event(event_id)
            chain = self._streams[event.stream_id]
            pos = bisect.bisect_left(self._starts[event.stream_id], event.start_time)
            if direction > 0:
                return chain[pos + 1: pos + 1 + hops]
            return chain[max(0, pos - hops): pos]

    def successors(self, event_id: str, hops: int = 1) -> list[EventRecord]:
        """Up to ``hops`` events following the given one in stream order."""
        return self._neighbors(event_id, hops, +1)

    def predecessors(self, event_id: str, hops: int = 1) -> list[EventRecord]:
        """Up to ``hops`` events preceding the given one, in temporal order."""
        return self._neighbors(event_id, hops, -1)

    def cluster_event_ids(self, cluster_id: str) -> set[str]:
        """Event ids linked to a cluster via entity_event relations (quiet)."""
        with self._lock:
            if cluster_id not in self.clusters:
                raise UnknownId(f"unknown cluster {cluster_id!r}")
            return {r.target_id for r in self.relations
                    if r.kind == ENTITY_EVENT and r.source_id == cluster_id}

    def events_of_cluster(self, cluster_id: str) -> set[EventRecord]:
        """Events reachable from a cluster; warns when the cluster is unlinked."""
        ids = self.cluster_event_ids(cluster_id)
        if not ids:
            warnings.warn(f"cluster {cluster_id!r} has no entity_event relation",
                          IntegrityWarning, stacklevel=2)
        return {self.event(i) for i in ids}

    # -- snapshots and stats ----------------------------------------------

    def snapshot(self) -> "EventGraph":
        """Consistent read-only copy; records are shared, containers copied."""
        with self._lock:
            snap = EventGraph()
            snap.dimension = self.dimension
            snap._streams = {sid: list(chain) for sid, chain in self._streams.items()}
            snap._starts = {sid: list(starts) for sid, starts in self._starts.items()}
            snap._events_by_id = dict(self._events_by_id)
            snap.clusters = dict(self.clusters)
            snap.mentions = dict(self.mentions)
            snap.relations = set(self.relations)
            return snap

    def stats(self) -> dict:
        with self._lock:
            by_kind = {kind: 0 for kind in RELATION_KINDS}
            for rel in self.relations:
                by_kind[rel.kind] += 1
            return {
                "events": len(self._events_by_id),
                "clusters": len(self.clusters),
                "mentions": len(self.mentions),
                "relations": dict(sorted(by_kind.items())),
                "streams": self.stream_ids(),
                "dimension": self.dimension,
            }
