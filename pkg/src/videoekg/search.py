"""Agentic tree search over the event graph.

The root node holds the initial retrieval for the query. Every node below
the depth limit expands into three non-terminal children, produced by the
forward, backward and re-query actions, plus one terminal summary-and-
answer leaf; nodes at the depth limit emit only the leaf. With depth 3 this
yields 13 leaves (9 at the bottom, one per interior node), and in general
``3**(d-1) + sum(3**i for i in range(d-1))``.

Event lists are capped: whenever a merge pushes a node past the cap, the
lowest-scoring entries are dropped. Events introduced by forward/backward
steps have no Borda score yet, so they enter the comparison scored by the
cosine between their text embedding and the original query embedding.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from .gateway import ModelGateway
from .graph import EventGraph
from .retrieval import RankedEntry, RankedEventList, Retriever

logger = logging.getLogger(__name__)

ACTION_FORWARD = "F"
ACTION_BACKWARD = "B"
ACTION_REQUERY = "RQ"
ACTION_ANSWER = "SA"


@dataclass
class SearchConfig:
    max_depth: int = 3
    cap: int = 16
    hops_per_step: int = 1
    requery_keywords_max: int = 5

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.cap < 1:
            raise ValueError("cap must be at least 1")
        if self.hops_per_step < 1 or self.requery_keywords_max < 1:
            raise ValueError("invalid search parameters")


@dataclass
class SearchNode:
    node_id: str
    depth: int
    event_list: RankedEventList
    action_history: tuple[str, ...] = ()
    parent_id: str | None = None


@dataclass
class SALeaf:
    node_id: str
    context_text: str
    depth: int
    path: tuple[str, ...]
    event_ids: list[str]
    empty_evidence: bool = False


@dataclass
class SearchResult:
    sa_leaves: list[SALeaf]
    trace: list[dict] = field(default_factory=list)


def expected_leaf_count(max_depth: int) -> int:
    return 3 ** (max_depth - 1) + sum(3 ** i for i in range(max_depth - 1))


def truncate_event_list(entries: list[RankedEntry], cap: int,
                        graph: EventGraph) -> list[RankedEntry]:
    """Keep the ``cap`` best entries; ties resolve to earlier, smaller ids."""
    ordered = sorted(entries, key=lambda e: (-e.borda_score,
                                             graph.event(e.event_id).start_time,
                                             e.event_id))
    return ordered[:cap]


def assemble_context(graph: EventGraph, event_ids: list[str]) -> str:
    """Event summaries in temporal order, each prefixed with its time span."""
    events = sorted((graph.event(i) for i in event_ids),
                    key=lambda e: (e.stream_id, e.start_time))
    lines = [f"[{e.start_time:.1f}s-{e.end_time:.1f}s] {e.summary}" for e in events]
    return "\n".join(lines)


_KEYWORD_SPLIT = re.compile(r"[,;\n]")


def parse_keywords(text: str, limit: int) -> list[str]:
    """Keyword list from the re-query reply: JSON array or separated text."""
    cleaned = text.strip()
    if cleaned.startswith("```"):
        cleaned = re.sub(r"^```[a-zA-Z]*\n?|\n?```$", "", cleaned).strip()
    try:
        data = json.loads(cleaned)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, dict) and "keywords" in data:
        data = data["keywords"]
    if isinstance(data, list):
        words = [str(w).strip() for w in data]
    elif data is None:
        words = [w.strip() for w in _KEYWORD_SPLIT.split(cleaned)]
    else:
        raise ValueError(f"cannot read keywords from {text!r}")
    words = [w for w in words if w]
    if not words:
        raise ValueError("empty keyword list")
    return words[:limit]


class SearchEngine:
    """Expands the action tree against one graph snapshot."""

    def __init__(self, graph: EventGraph, retriever: Retriever,
                 gateway: ModelGateway, config: SearchConfig, prompts):
        self.graph = graph
        self.retriever = retriever
        self.gateway = gateway
        self.config = config
        self.prompts = prompts

    # -- scoring helpers ---------------------------------------------------

    def _fresh_score(self, event_id: str, query_embedding: np.ndarray) -> float:
        vec = self.graph.event(event_id).text_embedding
        denom = float(np.linalg.norm(vec) * np.linalg.norm(query_embedding))
        return float(np.dot(vec, query_embedding) / denom) if denom else 0.0

    def _merge(self, node: SearchNode, extra: list[RankedEntry],
               action: str) -> SearchNode:
        merged: dict[str, RankedEntry] = {e.event_id: e for e in node.event_list.entries}
        for entry in extra:
            merged.setdefault(entry.event_id, entry)
        entries = truncate_event_list(list(merged.values()), self.config.cap, self.graph)
        child_list = RankedEventList(entries=entries,
                                     query_text=node.event_list.query_text,
                                     query_embedding=node.event_list.query_embedding)
        history = node.action_history + (action,)
        return SearchNode(node_id="/".join(history), depth=node.depth + 1,
                          event_list=child_list, action_history=history,
                          parent_id=node.node_id)

    def _temporal_step(self, node: SearchNode, forward: bool) -> SearchNode:
        fresh: list[RankedEntry] = []
        seen = set(node.event_list.event_ids())
        q = node.event_list.query_embedding
        for event_id in node.event_list.event_ids():
            step = (self.graph.successors if forward else self.graph.predecessors)
            for neighbor in step(event_id, self.config.hops_per_step):
                if neighbor.event_id in seen:
                    continue
                seen.add(neighbor.event_id)
                fresh.append(RankedEntry(neighbor.event_id,
                                         self._fresh_score(neighbor.event_id, q)))
        return self._merge(node, fresh,
                           ACTION_FORWARD if forward else ACTION_BACKWARD)

    # -- the four actions ---------------------------------------------------

    def act_forward(self, node: SearchNode) -> SearchNode:
        return self._temporal_step(node, forward=True)

    def act_backward(self, node: SearchNode) -> SearchNode:
        return self._temporal_step(node, forward=False)

    def act_requery(self, node: SearchNode, original_query: str) -> SearchNode:
        keywords = self._request_keywords(node, original_query)
        if not keywords:
            return self._merge(node, [], ACTION_REQUERY)
        new_query = " ".join(keywords)
        ranked = self.retriever.tri_view_retrieve(new_query,
                                                  k=self.retriever.config.k_per_view)
        return self._merge(node, ranked.entries, ACTION_REQUERY)

    def _request_keywords(self, node: SearchNode, original_query: str) -> list[str]:
        context = assemble_context(self.graph, node.event_list.event_ids())
        prompt = self.prompts.render("rq_keywords", query=original_query,
                                     context=context,
                                     max_keywords=self.config.requery_keywords_max)
        reply = self.gateway.chat("sa_reasoner", [{"role": "user", "content": prompt}],
                                  tag=f"rq:{node.node_id}")
        try:
            return parse_keywords(reply, self.config.requery_keywords_max)
        except ValueError:
            logger.warning("re-query keywords unparseable at %s, reprompting",
                           node.node_id)
        retry = prompt + "\n\nReply with a JSON array of keywords only."
        reply = self.gateway.chat("sa_reasoner", [{"role": "user", "content": retry}],
                                  tag=f"rq:{node.node_id}:retry")
        try:
            return parse_keywords(reply, self.config.requery_keywords_max)
        except ValueError:
            logger.warning("re-query at %s skipped: keywords unparseable twice",
                           node.node_id)
            return []

    def act_summary_answer(self, node: SearchNode, query: str) -> SALeaf:
        """Terminate the path: assemble the answer context for this node."""
        event_ids = node.event_list.event_ids()
        history = node.action_history + (ACTION_ANSWER,)
        if not event_ids:
            return SALeaf(node_id="/".join(history), context_text="", depth=node.depth,
                          path=history, event_ids=[], empty_evidence=True)
        context = assemble_context(self.graph, event_ids)
        return SALeaf(node_id="/".join(history), context_text=context,
                      depth=node.depth, path=history, event_ids=event_ids)

    def expand(self, node: SearchNode, query: str) -> tuple[list[SearchNode], SALeaf]:
        """Children for F/B/RQ below the depth limit, plus the SA leaf."""
        leaf = self.act_summary_answer(node, query)
        if node.depth >= self.config.max_depth:
            return [], leaf
        children = [self.act_forward(node), self.act_backward(node),
                    self.act_requery(node, query)]
        return children, leaf

    def search(self, query: str,
               root_list: RankedEventList | None = None) -> SearchResult:
        """Exhaustive expansion to the depth limit; leaves in path order."""
        if root_list is None:
            ranked = self.retriever.tri_view_retrieve(query)
        else:
            ranked = root_list
        entries = truncate_event_list(ranked.entries, self.config.cap, self.graph)
        root = SearchNode(node_id="root", depth=1,
                          event_list=RankedEventList(entries, ranked.query_text,
                                                     ranked.query_embedding))
        result = SearchResult(sa_leaves=[])
        self._expand_recursive(root, query, result)
        return result

    def _expand_recursive(self, node: SearchNode, query: str,
                          result: SearchResult) -> None:
        children, leaf = self.expand(node, query)
        result.trace.append({
            "node_id": node.node_id, "depth": node.depth,
            "action": node.action_history[-1] if node.action_history else "ROOT",
            "event_ids": node.event_list.event_ids(),
        })
        result.sa_leaves.append(leaf)
        for child in children:
            self._expand_recursive(child, query, result)
