"""Entity extraction, embedding, K-means clustering and graph linking.

Mentions are extracted per event through the extractor role, embedded as
unit vectors, and periodically re-clustered over the full mention set with
Lloyd's algorithm (k-means++ seeding, fixed seed). Cluster ids are derived
from the sorted member ids, so re-clustering the same mention set always
produces the same graph, which keeps split-and-resume ingests reproducible.
All entity-level relations are rebuilt from the mention-level records at
every checkpoint: semantic links become cluster-to-cluster relations
(self-loops dropped), and every mention contributes one participation
relation from its cluster to its owning event.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError
from .gateway import ModelGateway
from .graph import (ENTITY_ENTITY, ENTITY_EVENT, EntityCluster, EntityMention,
                    EventGraph, EventRecord, Relation)

logger = logging.getLogger(__name__)

DEFAULT_ROLE = "appears_in"


@dataclass
class ClusteringConfig:
    k_policy: str = "ratio"           # "ratio" or "fixed"
    k_ratio: float = 0.2
    k_fixed: int | None = None
    max_iters: int = 50
    seed: int = 0
    tol: float = 1e-6
    checkpoint_mentions: int = 200

    def __post_init__(self) -> None:
        if self.k_policy not in ("ratio", "fixed"):
            raise ValueError("k_policy must be 'ratio' or 'fixed'")
        if self.k_policy == "fixed" and (self.k_fixed is None or self.k_fixed < 1):
            raise ValueError("fixed policy needs k_fixed >= 1")
        if self.k_policy == "ratio" and not 0 < self.k_ratio <= 1:
            raise ValueError("k_ratio must lie in (0, 1]")
        if self.max_iters < 1 or self.tol < 0 or self.checkpoint_mentions < 1:
            raise ValueError("invalid clustering parameters")

    def choose_k(self, n: int) -> int:
        if n < 1:
            raise ValueError("cannot cluster an empty mention set")
        if self.k_policy == "fixed":
            return min(self.k_fixed or 1, n)
        return min(max(1, math.ceil(self.k_ratio * n)), n)


@dataclass
class ExtractionResult:
    """Structured extractor output for one event."""

    event_id: str
    mentions: list[tuple[str, str]] = field(default_factory=list)
    relations: list[tuple[str, str, str]] = field(default_factory=list)
    participations: list[tuple[str, str]] = field(default_factory=list)


_FENCE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


def _parse_extraction(event_id: str, text: str) -> ExtractionResult:
    cleaned = text.strip()
    fenced = _FENCE.match(cleaned)
    if fenced:
        cleaned = fenced.group(1).strip()
    data = json.loads(cleaned)
    if not isinstance(data, dict):
        raise ValueError("extraction must be a JSON object")
    result = ExtractionResult(event_id=event_id)
    for ent in data.get("entities", []):
        name = str(ent["name"]).strip()
        if not name:
            raise ValueError("entity with empty name")
        result.mentions.append((name, str(ent.get("description", "")).strip()))
    names = {n for n, _ in result.mentions}
    for rel in data.get("relations", []):
        src, tgt = str(rel["source"]).strip(), str(rel["target"]).strip()
        if src not in names or tgt not in names:
            raise ValueError(f"relation endpoint {src!r}->{tgt!r} names no extracted entity")
        result.relations.append((src, tgt, str(rel.get("label", "related_to")).strip()))
    for part in data.get("participations", []):
        name = str(part["name"]).strip()
        if name not in names:
            raise ValueError(f"participation {name!r} names no extracted entity")
        result.participations.append((name, str(part.get("role", DEFAULT_ROLE)).strip()))
    return result


def extract_entities(event: EventRecord, prompt_template: str,
                     gateway: ModelGateway) -> ExtractionResult:
    """Extract mentions/relations for one event; one reprompt on bad JSON."""
    if not event.description.strip():
        raise ValueError(f"event {event.event_id} has no description text")
    prompt = prompt_template.format(description=event.description,
                                    summary=event.summary)
    reply = gateway.chat("extractor", [{"role": "user", "content": prompt}],
                         tag=f"extract:{event.event_id}")
    try:
        return _parse_extraction(event.event_id, reply)
    except (ValueError, KeyError, TypeError) as first:
        logger.warning("extractor reply for %s unparseable (%s), reprompting",
                       event.event_id, first)
        retry_prompt = (prompt + "\n\nYour previous reply was not valid JSON. "
                        "Reply with the JSON object only.")
        reply = gateway.chat("extractor", [{"role": "user", "content": retry_prompt}],
                             tag=f"extract:{event.event_id}:retry")
        try:
            return _parse_extraction(event.event_id, reply)
        except (ValueError, KeyError, TypeError) as second:
            raise ParseError(f"extractor output for {event.event_id} unparseable "
                             f"after reprompt: {second}") from second


def embed_mentions(mentions: list[EntityMention], gateway: ModelGateway) -> None:
    """Attach a unit embedding to every mention, embedding names in one batch."""
    if not mentions:
        return
    vectors = gateway.embed_text("embedder", [m.name for m in mentions])
    for mention, vec in zip(mentions, vectors):
        mention.embedding = vec


@dataclass
class KMeansResult:
    assignments: np.ndarray          # point index -> cluster index
    centroids: np.ndarray            # (k, d)
    objective_history: list[float]   # within-cluster sum of squares per iteration
    n_iter: int


def lloyd_kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 50,
                 tol: float = 1e-6) -> KMeansResult:
    """Lloyd's iteration with k-means++ seeding. Empty clusters are dropped."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < 1:
        raise ValueError("need at least one point")
    k = min(max(1, k), n)
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = pts[rng.integers(n)]
            continue
        centroids[c] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pts - centroids[c]) ** 2, axis=1))

    history: list[float] = []
    assignments = np.zeros(n, dtype=np.intp)
    for iteration in range(max_iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignments = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), assignments].sum()))
        new_centroids = np.empty_like(centroids)
        keep = []
        for c in range(centroids.shape[0]):
            members = pts[assignments == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
                keep.append(c)
        if len(keep) < centroids.shape[0]:
            remap = {old: new for new, old in enumerate(keep)}
            new_centroids = new_centroids[keep]
            assignments = np.array([remap[a] for a in assignments], dtype=np.intp)
            centroids = centroids[keep]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    return KMeansResult(assignments=assignments, centroids=centroids,
                        objective_history=history, n_iter=len(history))


def _cluster_id(member_ids: tuple[str, ...]) -> str:
    digest = hashlib.sha256(",".join(member_ids).encode("utf-8")).hexdigest()
    return f"u{digest[:12]}"


def _canonical_name(names: list[str]) -> str:
    counts: dict[str, int] = {}
    for name in names:
        counts[name] = counts.get(name, 0) + 1
    return min(counts, key=lambda n: (-counts[n], n))


def kmeans_cluster(mentions: list[EntityMention],
                   config: ClusteringConfig) -> list[EntityCluster]:
    """Cluster embedded mentions; centroid is the exact mean of members."""
    if not mentions:
        return []
    for m in mentions:
        if m.embedding is None:
            raise ValueError(f"mention {m.mention_id} is not embedded")
    matrix = np.stack([m.embedding for m in mentions])
    result = lloyd_kmeans(matrix, config.choose_k(len(mentions)),
                          seed=config.seed, max_iters=config.max_iters,
                          tol=config.tol)
    clusters: list[EntityCluster] = []
    for c in range(result.centroids.shape[0]):
        idx = [i for i in range(len(mentions)) if result.assignments[i] == c]
        member_ids = tuple(sorted(mentions[i].mention_id for i in idx))
        centroid = matrix[idx].mean(axis=0)
        clusters.append(EntityCluster(
            cluster_id=_cluster_id(member_ids),
            member_ids=member_ids,
            centroid=centroid,
            canonical_name=_canonical_name([mentions[i].name for i in idx])))
    clusters.sort(key=lambda c: c.cluster_id)
    return clusters


def derive_relations(clusters: list[EntityCluster],
                     mentions: dict[str, EntityMention]) -> list[Relation]:
    """Rewrite mention-level links and roles at cluster granularity.

    Duplicates collapse; a semantic link whose endpoints land in the same
    cluster would be a self-loop and is dropped.
    """
    cluster_of = {mid: c.cluster_id for c in clusters for mid in c.member_ids}
    out: set[Relation] = set()
    for mention in mentions.values():
        if mention.mention_id not in cluster_of:
            continue
        cid = cluster_of[mention.mention_id]
        roles = mention.roles or [DEFAULT_ROLE]
        for role in roles:
            out.add(Relation(ENTITY_EVENT, cid, mention.event_id, role))
        for target_id, label in mention.links:
            target_cluster = cluster_of.get(target_id)
            if target_cluster is None or target_cluster == cid:
                continue
            out.add(Relation(ENTITY_ENTITY, cid, target_cluster, label))
    return sorted(out, key=lambda r: (r.kind, r.source_id, r.target_id, r.label))


def link_clusters(graph: EventGraph, clusters: list[EntityCluster],
                  mentions: dict[str, EntityMention] | None = None) -> None:
    """Install clusters and their derived relations into the graph."""
    mentions = mentions if mentions is not None else graph.mentions
    graph.replace_entity_layer(clusters, derive_relations(clusters, mentions))


class EntityLinker:
    """Per-event extraction plus checkpointed full re-clustering."""

    def __init__(self, graph: EventGraph, gateway: ModelGateway,
                 config: ClusteringConfig, prompt_template: str):
        self.graph = graph
        self.gateway = gateway
        self.config = config
        self.prompt_template = prompt_template
        self._staged_since_checkpoint = 0

    def process_event(self, event: EventRecord) -> list[EntityMention]:
        """Extract, embed and stage the mentions of one event."""
        result = extract_entities(event, self.prompt_template, self.gateway)
        mentions: list[EntityMention] = []
        by_name: dict[str, str] = {}
        for i, (name, desc) in enumerate(result.mentions):
            mention = EntityMention(
                mention_id=f"{event.event_id}:m{i:03d}",
                event_id=event.event_id, name=name, description=desc)
            mentions.append(mention)
            by_name.setdefault(name, mention.mention_id)
        for src, tgt, label in result.relations:
            src_mention = next(m for m in mentions if m.mention_id == by_name[src])
            src_mention.links.append((by_name[tgt], label))
        for name, role in result.participations:
            target = next(m for m in mentions if m.mention_id == by_name[name])
            target.roles.append(role)
        embed_mentions(mentions, self.gateway)
        for mention in mentions:
            self.graph.add_mention(mention)
        self._staged_since_checkpoint += len(mentions)
        self.maybe_checkpoint()
        return mentions

    def maybe_checkpoint(self) -> bool:
        if self._staged_since_checkpoint >= self.config.checkpoint_mentions:
            self.checkpoint(force=True)
            return True
        return False

    def checkpoint(self, force: bool = False) -> None:
        """Re-cluster the full mention set and rewrite the entity layer."""
        if not force and self._staged_since_checkpoint == 0:
            return
        # Canonical input order keeps clustering identical no matter how the
        # mention set was accumulated (whole run vs resume-from-store).
        mentions = sorted(self.graph.mentions.values(), key=lambda m: m.mention_id)
        if not mentions:
            self._staged_since_checkpoint = 0
            return
        clusters = kmeans_cluster(mentions, self.config)
        link_clusters(self.graph, clusters)
        self._staged_since_checkpoint = 0
