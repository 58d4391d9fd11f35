"""Durable graph persistence and exact vector search.

On-disk layout under a store directory:

    manifest.json        versioned manifest: schema_version, vector
                         dimension, per-table record counts and byte sizes,
                         per-stream ingest high-water marks
    events.tbl           one record per event (embedded frame refs)
    entities.tbl         mention records, then cluster records
    event_event_rel.tbl
    entity_entity_rel.tbl
    entity_event_rel.tbl

Every ``.tbl`` file is a sequence of length-prefixed records: a 4-byte
little-endian payload length followed by a UTF-8 JSON payload whose keys
appear in a fixed order. Vectors are float32, little-endian, base64-encoded
inside the JSON. Records are written in canonical id order, so persisting
an unchanged graph is bit-stable. The framing is append-friendly; this
implementation rewrites tables at flush points, which is cheap at the
collection sizes the engine targets.

Vector search is exact: cosine against every row, accumulated in float64,
which keeps orderings stable across platforms.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (DimensionError, IntegrityError, SchemaVersionError,
                     UnknownCollection)
from .graph import (ENTITY_ENTITY, ENTITY_EVENT, EVENT_EVENT, EntityCluster,
                    EntityMention, EventGraph, EventRecord, FrameRef, Relation)

SCHEMA_VERSION = 1
TABLE_FILES = {
    "events": "events.tbl",
    "entities": "entities.tbl",
    "event_event_rel": "event_event_rel.tbl",
    "entity_entity_rel": "entity_entity_rel.tbl",
    "entity_event_rel": "entity_event_rel.tbl",
}
COLLECTIONS = ("event_text", "entity_centroid", "frame_vision")


def encode_vector(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def decode_vector(data: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(data), dtype="<f4").astype(np.float64)


def _pack_records(records: list[dict]) -> bytes:
    out = bytearray()
    for record in records:
        payload = json.dumps(record, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        out += struct.pack("<I", len(payload))
        out += payload
    return bytes(out)


def _iter_records(data: bytes, table: str):
    offset = 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise IntegrityError(f"table {table}: truncated length prefix")
        (length,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + length > len(data):
            raise IntegrityError(f"table {table}: truncated record")
        yield json.loads(data[offset:offset + length].decode("utf-8"))
        offset += length


def _event_record(event: EventRecord) -> dict:
    return {
        "event_id": event.event_id,
        "stream_id": event.stream_id,
        "start_time": event.start_time,
        "end_time": event.end_time,
        "description": event.description,
        "summary": event.summary,
        "text_embedding": encode_vector(event.text_embedding),
        "frames": [
            {"timestamp": f.timestamp, "locator": f.locator,
             "vision_embedding": encode_vector(f.vision_embedding)}
            for f in event.frame_refs
        ],
    }


def _relation_record(rel: Relation) -> dict:
    return {"kind": rel.kind, "source_id": rel.source_id,
            "target_id": rel.target_id, "label": rel.label}


def persist(graph: EventGraph, path: str | Path,
            streams_state: dict[str, dict] | None = None) -> None:
    """Write the five tables and the manifest; bit-stable for equal graphs."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    events = [_event_record(e) for e in graph.events]
    entities: list[dict] = []
    for mention in sorted(graph.mentions.values(), key=lambda m: m.mention_id):
        entities.append({
            "type": "mention",
            "mention_id": mention.mention_id,
            "event_id": mention.event_id,
            "name": mention.name,
            "description": mention.description,
            "embedding": (encode_vector(mention.embedding)
                          if mention.embedding is not None else None),
            "links": [[t, l] for t, l in mention.links],
            "roles": list(mention.roles),
        })
    for cluster in sorted(graph.clusters.values(), key=lambda c: c.cluster_id):
        entities.append({
            "type": "cluster",
            "cluster_id": cluster.cluster_id,
            "member_ids": list(cluster.member_ids),
            "centroid": encode_vector(cluster.centroid),
            "canonical_name": cluster.canonical_name,
        })

    def rel_rows(kind: str) -> list[dict]:
        rels = sorted(graph.relations_of_kind(kind),
                      key=lambda r: (r.source_id, r.target_id, r.label))
        return [_relation_record(r) for r in rels]

    tables = {
        "events": _pack_records(events),
        "entities": _pack_records(entities),
        "event_event_rel": _pack_records(rel_rows(EVENT_EVENT)),
        "entity_entity_rel": _pack_records(rel_rows(ENTITY_ENTITY)),
        "entity_event_rel": _pack_records(rel_rows(ENTITY_EVENT)),
    }
    counts = {"events": len(events), "entities": len(entities),
              "event_event_rel": len(graph.relations_of_kind(EVENT_EVENT)),
              "entity_entity_rel": len(graph.relations_of_kind(ENTITY_ENTITY)),
              "entity_event_rel": len(graph.relations_of_kind(ENTITY_EVENT))}
    for name, blob in tables.items():
        (root / TABLE_FILES[name]).write_bytes(blob)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "dimension": graph.dimension,
        "tables": {name: {"file": TABLE_FILES[name], "records": counts[name],
                          "bytes": len(tables[name])}
                   for name in TABLE_FILES},
        "streams": streams_state or {},
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> dict:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("schema_version")
    if not isinstance(version, int) or version > SCHEMA_VERSION:
        raise SchemaVersionError(
            f"store schema {version!r} is newer than supported {SCHEMA_VERSION}")
    return manifest


def load(path: str | Path) -> tuple[EventGraph, dict]:
    """Rebuild the graph from disk, failing fast on dangling references."""
    root = Path(path)
    manifest = load_manifest(root)
    offenders: list[str] = []

    def table(name: str) -> list[dict]:
        info = manifest["tables"][name]
        data = (root / info["file"]).read_bytes()
        if len(data) != info["bytes"]:
            raise IntegrityError(f"table {name}: expected {info['bytes']} bytes, "
                                 f"found {len(data)}")
        records = list(_iter_records(data, name))
        if len(records) != info["records"]:
            raise IntegrityError(f"table {name}: expected {info['records']} records, "
                                 f"found {len(records)}")
        return records

    graph = EventGraph()
    for row in table("events"):
        frames = [FrameRef(row["stream_id"], f["timestamp"],
                           decode_vector(f["vision_embedding"]), f["locator"])
                  for f in row["frames"]]
        graph.add_event(EventRecord(
            event_id=row["event_id"], stream_id=row["stream_id"],
            start_time=row["start_time"], end_time=row["end_time"],
            description=row["description"], summary=row["summary"],
            text_embedding=decode_vector(row["text_embedding"]),
            frame_refs=frames))

    stored_chain = {(r["source_id"], r["target_id"], r["label"])
                    for r in table("event_event_rel")}
    rebuilt_chain = {(r.source_id, r.target_id, r.label)
                     for r in graph.relations_of_kind(EVENT_EVENT)}
    if stored_chain != rebuilt_chain:
        extra = stored_chain - rebuilt_chain
        missing = rebuilt_chain - stored_chain
        offenders.extend(f"event_event_rel stored-not-derived {t}" for t in sorted(extra))
        offenders.extend(f"event_event_rel derived-not-stored {t}" for t in sorted(missing))

    clusters: list[EntityCluster] = []
    for row in table("entities"):
        if row["type"] == "mention":
            if not graph.has_event(row["event_id"]):
                offenders.append(f"mention {row['mention_id']} -> missing event "
                                 f"{row['event_id']}")
                continue
            graph.add_mention(EntityMention(
                mention_id=row["mention_id"], event_id=row["event_id"],
                name=row["name"], description=row["description"],
                embedding=(decode_vector(row["embedding"])
                           if row["embedding"] is not None else None),
                links=[(t, l) for t, l in row["links"]],
                roles=list(row["roles"])))
        elif row["type"] == "cluster":
            clusters.append(EntityCluster(
                cluster_id=row["cluster_id"], member_ids=tuple(row["member_ids"]),
                centroid=decode_vector(row["centroid"]),
                canonical_name=row["canonical_name"]))
        else:
            offenders.append(f"entities record of unknown type {row['type']!r}")

    seen: dict[str, str] = {}
    for cluster in clusters:
        for mid in cluster.member_ids:
            if mid not in graph.mentions:
                offenders.append(f"cluster {cluster.cluster_id} -> missing mention {mid}")
            if mid in seen:
                offenders.append(f"mention {mid} in clusters {seen[mid]} "
                                 f"and {cluster.cluster_id}")
            seen[mid] = cluster.cluster_id

    relations: list[Relation] = []
    cluster_ids = {c.cluster_id for c in clusters}
    for name, kind in (("entity_entity_rel", ENTITY_ENTITY),
                       ("entity_event_rel", ENTITY_EVENT)):
        for row in table(name):
            rel = Relation(kind, row["source_id"], row["target_id"], row["label"])
            if rel.source_id not in cluster_ids:
                offenders.append(f"{name} {rel.source_id}->{rel.target_id}: "
                                 f"missing source cluster")
                continue
            if kind == ENTITY_ENTITY and rel.target_id not in cluster_ids:
                offenders.append(f"{name} {rel.source_id}->{rel.target_id}: "
                                 f"missing target cluster")
                continue
            if kind == ENTITY_EVENT and not graph.has_event(rel.target_id):
                offenders.append(f"{name} {rel.source_id}->{rel.target_id}: "
                                 f"missing target event")
                continue
            relations.append(rel)
    if offenders:
        raise IntegrityError(f"store at {root} has {len(offenders)} dangling "
                             f"references", offenders=offenders)
    graph.replace_entity_layer(clusters, relations)
    return graph, manifest


def graphs_equal(a: EventGraph, b: EventGraph) -> bool:
    """Structural equality used by the round-trip tests."""
    ev_a, ev_b = a.events, b.events
    if len(ev_a) != len(ev_b):
        return False
    for x, y in zip(ev_a, ev_b):
        if (x.event_id, x.stream_id, x.start_time, x.end_time,
                x.description, x.summary) != \
           (y.event_id, y.stream_id, y.start_time, y.end_time,
                y.description, y.summary):
            return False
        if not np.array_equal(np.float32(x.text_embedding),
                              np.float32(y.text_embedding)):
            return False
        fx = [(f.timestamp, f.locator) for f in x.frame_refs]
        fy = [(f.timestamp, f.locator) for f in y.frame_refs]
        if fx != fy:
            return False
        for fa, fb in zip(x.frame_refs, y.frame_refs):
            if not np.array_equal(np.float32(fa.vision_embedding),
                                  np.float32(fb.vision_embedding)):
                return False
    if set(a.mentions) != set(b.mentions):
        return False
    for mid, ma in a.mentions.items():
        mb = b.mentions[mid]
        if (ma.event_id, ma.name, ma.description, sorted(ma.links),
                sorted(ma.roles)) != \
           (mb.event_id, mb.name, mb.description, sorted(mb.links),
                sorted(mb.roles)):
            return False
        if (ma.embedding is None) != (mb.embedding is None):
            return False
        if ma.embedding is not None and not np.array_equal(
                np.float32(ma.embedding), np.float32(mb.embedding)):
            return False
    if set(a.clusters) != set(b.clusters):
        return False
    for cid, ca in a.clusters.items():
        cb = b.clusters[cid]
        if (ca.member_ids, ca.canonical_name) != (cb.member_ids, cb.canonical_name):
            return False
        if not np.array_equal(np.float32(ca.centroid), np.float32(cb.centroid)):
            return False
    return a.relations == b.relations


class VectorIndex:
    """Exact cosine top-K over the three collections of one graph snapshot."""

    def __init__(self, graph: EventGraph):
        self.graph = graph
        events = graph.events
        self._ids: dict[str, list[str]] = {name: [] for name in COLLECTIONS}
        self._owners: dict[str, str] = {}
        mats: dict[str, list[np.ndarray]] = {name: [] for name in COLLECTIONS}
        for event in events:
            self._ids["event_text"].append(event.event_id)
            mats["event_text"].append(event.text_embedding)
            for i, ref in enumerate(event.frame_refs):
                frame_key = f"{event.event_id}#f{i:04d}"
                self._ids["frame_vision"].append(frame_key)
                self._owners[frame_key] = event.event_id
                mats["frame_vision"].append(ref.vision_embedding)
        for cid in sorted(graph.clusters):
            self._ids["entity_centroid"].append(cid)
            mats["entity_centroid"].append(graph.clusters[cid].centroid)
        self._matrices = {
            name: (np.stack(vecs).astype(np.float64) if vecs
                   else np.zeros((0, graph.dimension or 1)))
            for name, vecs in mats.items()
        }

    def owner_event(self, frame_key: str) -> str:
        return self._owners[frame_key]

    def size(self, collection: str) -> int:
        if collection not in COLLECTIONS:
            raise UnknownCollection(f"unknown collection {collection!r}")
        return len(self._ids[collection])

    def top_k(self, collection: str, query_vector: np.ndarray,
              k: int) -> list[tuple[str, float]]:
        """Exact cosine top-K, ties broken by id for a stable order."""
        if collection not in COLLECTIONS:
            raise UnknownCollection(f"unknown collection {collection!r}")
        if k < 1:
            raise ValueError("k must be at least 1")
        matrix = self._matrices[collection]
        ids = self._ids[collection]
        if not ids:
            return []
        q = np.asarray(query_vector, dtype=np.float64)
        if q.shape != (matrix.shape[1],):
            raise DimensionError(f"query has dimension {q.shape}, collection "
                                 f"{collection} uses {matrix.shape[1]}")
        qn = np.linalg.norm(q)
        norms = np.linalg.norm(matrix, axis=1)
        denom = np.where(norms * qn > 0, norms * qn, 1.0)
        sims = (matrix @ q) / denom
        order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:k]
        return [(ids[i], float(sims[i])) for i in order]


def fetch_frames(graph: EventGraph, event_ids: list[str]) -> list[FrameRef]:
    """Frame refs of the given events, timestamp-ordered and deduplicated."""
    refs: list[FrameRef] = []
    seen: set[tuple[str, float, str]] = set()
    for event_id in event_ids:
        event = graph.event(event_id)  # raises UnknownId
        for ref in event.frame_refs:
            key = (ref.stream_id, ref.timestamp, ref.locator)
            if key in seen:
                continue
            seen.add(key)
            refs.append(ref)
    refs.sort(key=lambda r: (r.timestamp, r.stream_id, r.locator))
    return refs


__all__ = [
    "SCHEMA_VERSION", "COLLECTIONS", "TABLE_FILES", "VectorIndex",
    "persist", "load", "load_manifest", "fetch_frames", "graphs_equal",
    "encode_vector", "decode_vector",
]
