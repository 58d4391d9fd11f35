import math

import numpy as np
import pytest

from videoekg.errors import DegenerateViewWarning, EmptyGraph
from videoekg.gateway import MockGateway, hash_unit_vector
from videoekg.graph import (ENTITY_EVENT, EntityCluster, EntityMention,
                            EventGraph, FrameRef, Relation)
from videoekg.retrieval import (RetrievalConfig, Retriever, borda_scores)
from videoekg.store import VectorIndex

from conftest import DIM, make_event


def cos(a, b) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return dot / (na * nb)


def build_retrieval_graph(seed: int, n_events: int, n_clusters: int = 4,
                          frames_per_event: int = 2) -> EventGraph:
    rng = np.random.default_rng(seed)
    graph = EventGraph()
    for i in range(n_events):
        event = make_event(f"e{i:03d}", "s", float(i), float(i) + 0.5,
                           embedding=hash_unit_vector(f"evt-{seed}-{i}", DIM),
                           description=f"event text {seed}-{i}")
        event.frame_refs = [
            FrameRef("s", float(i) + 0.1 * (k + 1),
                     hash_unit_vector(f"frame-{seed}-{i}-{k}", DIM),
                     f"loc://{i}/{k}")
            for k in range(frames_per_event)]
        graph.add_event(event)
    events = graph.events
    clusters, relations = [], []
    for c in range(n_clusters):
        owner = events[int(rng.integers(n_events))]
        mention = EntityMention(f"{owner.event_id}:m{c:03d}", owner.event_id,
                                f"entity{c}",
                                embedding=hash_unit_vector(f"ent-{seed}-{c}", DIM))
        graph.add_mention(mention)
        cluster = EntityCluster(f"c{c:03d}", (mention.mention_id,),
                                mention.embedding, mention.name)
        clusters.append(cluster)
        linked = {owner.event_id}
        for _ in range(int(rng.integers(1, 3))):
            linked.add(events[int(rng.integers(n_events))].event_id)
        for event_id in sorted(linked):
            relations.append(Relation(ENTITY_EVENT, cluster.cluster_id,
                                      event_id, "appears_in"))
    graph.replace_entity_layer(clusters, relations)
    return graph


class TestBordaScores:
    def test_single_view_normalization(self):
        scores = borda_scores({"event": [("e1", 0.8), ("e2", 0.2)]})
        assert scores["e1"] == pytest.approx(0.8, abs=1e-12)
        assert scores["e2"] == pytest.approx(0.2, abs=1e-12)

    def test_two_symmetric_views(self):
        hits = [("e1", 0.5), ("e2", 0.5)]
        scores = borda_scores({"event": hits, "entity": list(hits)})
        assert scores["e1"] == pytest.approx(1.0, abs=1e-12)
        assert scores["e2"] == pytest.approx(1.0, abs=1e-12)

    def test_three_view_hand_example(self):
        per_view = {
            "event": [("A", 0.9), ("B", 0.1)],
            "entity": [("A", 0.3), ("B", 0.7)],
            "vision": [("B", 1.0)],
        }
        scores = borda_scores(per_view)
        assert scores["A"] == pytest.approx(1.2, abs=1e-12)
        assert scores["B"] == pytest.approx(1.8, abs=1e-12)

    def test_per_view_share_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            hits = [(f"e{i}", float(rng.uniform(0.01, 1))) for i in range(6)]
            mass = sum(s for _, s in hits)
            shares = [s / mass for _, s in hits]
            assert abs(sum(shares) - 1.0) < 1e-9
            scores = borda_scores({"event": hits})
            assert abs(sum(scores.values()) - 1.0) < 1e-9

    def test_scale_invariance(self):
        per_view = {"event": [("a", 0.4), ("b", 0.6)],
                    "entity": [("a", 0.9), ("c", 0.3)]}
        base = borda_scores(per_view)
        scaled = borda_scores({
            "event": [(e, 7.3 * s) for e, s in per_view["event"]],
            "entity": per_view["entity"]})
        for key in base:
            assert scaled[key] == pytest.approx(base[key], abs=1e-12)

    def test_monotonicity(self):
        per_view = {"event": [("a", 0.5), ("b", 0.5)],
                    "entity": [("a", 0.2), ("b", 0.8)]}
        def rank_of(scores, eid):
            ordered = sorted(scores, key=lambda e: (-scores[e], e))
            return ordered.index(eid)
        before = rank_of(borda_scores(per_view), "a")
        per_view["event"][0] = ("a", 0.9)
        after = rank_of(borda_scores(per_view), "a")
        assert after <= before

    def test_score_bound(self):
        per_view = {"event": [("a", 1.0)], "entity": [("a", 1.0)],
                    "vision": [("a", 1.0)]}
        assert borda_scores(per_view)["a"] == pytest.approx(3.0)

    def test_degenerate_view_skipped_with_warning(self):
        with pytest.warns(DegenerateViewWarning):
            scores = borda_scores({"event": [("a", 0.0), ("b", 0.0)],
                                   "entity": [("a", 1.0)]})
        assert scores == {"a": 1.0}

    def test_negative_similarities_clamped(self):
        scores = borda_scores({"event": [("a", -0.5), ("b", 0.5)]})
        assert scores["b"] == pytest.approx(1.0)
        assert scores.get("a", 0.0) == pytest.approx(0.0)

    def test_view_weights(self):
        per_view = {"event": [("a", 1.0)], "entity": [("b", 1.0)]}
        scores = borda_scores(per_view, weights={"event": 2.0, "entity": 0.5})
        assert scores["a"] == pytest.approx(2.0)
        assert scores["b"] == pytest.approx(0.5)


class TestRetrieveView:
    def test_entity_fanout(self):
        graph = EventGraph()
        for i in range(6):
            graph.add_event(make_event(f"e{i}", "s", float(i), float(i) + 0.5))
        mention = EntityMention("e2:m000", "e2", "thing",
                                embedding=hash_unit_vector("thing", DIM))
        graph.add_mention(mention)
        cluster = EntityCluster("c0", ("e2:m000",), mention.embedding, "thing")
        graph.replace_entity_layer([cluster], [
            Relation(ENTITY_EVENT, "c0", "e2", "appears_in"),
            Relation(ENTITY_EVENT, "c0", "e5", "appears_in")])
        retriever = Retriever(graph, VectorIndex(graph), MockGateway(dim=DIM))
        hits = retriever.retrieve_view("entity", mention.embedding, 3)
        assert {h[0] for h in hits} == {"e2", "e5"}
        assert hits[0][1] == pytest.approx(hits[1][1])
        assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_vision_view_empty_without_frames(self):
        graph = EventGraph()
        graph.add_event(make_event("e1"))
        retriever = Retriever(graph, VectorIndex(graph), MockGateway(dim=DIM))
        assert retriever.retrieve_view("vision", np.ones(DIM) / math.sqrt(DIM), 4) == []

    def test_matches_scan_and_max_aggregation_oracle(self):
        graph = build_retrieval_graph(seed=21, n_events=50)
        index = VectorIndex(graph)
        retriever = Retriever(graph, index, MockGateway(dim=DIM))
        query = hash_unit_vector("the query", DIM)
        k = 8

        hits = retriever.retrieve_view("entity", query, k)
        cl = sorted(graph.clusters.values(), key=lambda c: c.cluster_id)
        sims = sorted(((c.cluster_id, cos(c.centroid, query)) for c in cl),
                      key=lambda t: (-t[1], t[0]))[:k]
        expected: dict[str, float] = {}
        for cid, sim in sims:
            for rel in graph.relations:
                if rel.kind == ENTITY_EVENT and rel.source_id == cid:
                    expected[rel.target_id] = max(expected.get(rel.target_id,
                                                              -2.0), sim)
        assert dict(hits) == pytest.approx(expected, abs=1e-9)

        vhits = retriever.retrieve_view("vision", query, k)
        frame_sims = []
        for event in graph.events:
            for ref in event.frame_refs:
                frame_sims.append((event.event_id, cos(ref.vision_embedding, query)))
        frame_sims.sort(key=lambda t: -t[1])
        vexpected: dict[str, float] = {}
        for event_id, sim in frame_sims[:k]:
            vexpected[event_id] = max(vexpected.get(event_id, -2.0), sim)
        assert dict(vhits) == pytest.approx(vexpected, abs=1e-9)


def oracle_tri_view(graph, query, k, weights):
    """Direct enumeration of the fused ranking, independent of Retriever."""
    per_view = {}
    event_sims = sorted(((e.event_id, cos(e.text_embedding, query))
                         for e in graph.events), key=lambda t: (-t[1], t[0]))
    per_view["event"] = event_sims[:k]
    cl = sorted(graph.clusters.values(), key=lambda c: c.cluster_id)
    top_cl = sorted(((c.cluster_id, cos(c.centroid, query)) for c in cl),
                    key=lambda t: (-t[1], t[0]))[:k]
    best = {}
    for cid, sim in top_cl:
        for rel in graph.relations:
            if rel.kind == ENTITY_EVENT and rel.source_id == cid:
                best[rel.target_id] = max(best.get(rel.target_id, -2.0), sim)
    per_view["entity"] = sorted(best.items(), key=lambda t: (-t[1], t[0]))
    frame_rows = []
    for event in graph.events:
        for i, ref in enumerate(event.frame_refs):
            frame_rows.append((f"{event.event_id}#f{i:04d}", event.event_id,
                               cos(ref.vision_embedding, query)))
    frame_rows.sort(key=lambda t: (-t[2], t[0]))
    vbest = {}
    for _, event_id, sim in frame_rows[:k]:
        vbest[event_id] = max(vbest.get(event_id, -2.0), sim)
    per_view["vision"] = sorted(vbest.items(), key=lambda t: (-t[1], t[0]))

    totals = {}
    for view, hits in per_view.items():
        mass = sum(max(s, 0.0) for _, s in hits)
        if not hits or mass <= 0:
            continue
        for event_id, sim in hits:
            totals[event_id] = totals.get(event_id, 0.0) + \
                weights.get(view, 1.0) * max(sim, 0.0) / mass
    order = sorted(totals, key=lambda e: (-totals[e],
                                          graph.event(e).start_time, e))
    return order, totals


class TestTriViewRetrieve:
    def _retriever(self, graph, config=None):
        return Retriever(graph, VectorIndex(graph), MockGateway(dim=DIM), config)

    def test_single_event_graph(self):
        graph = EventGraph()
        graph.add_event(make_event("e1", with_frame=True))
        ranked = self._retriever(graph).tri_view_retrieve("anything")
        assert ranked.event_ids() == ["e1"]

    def test_query_matching_description_ranks_first(self):
        graph = EventGraph()
        for i in range(5):
            text = f"unique description {i}"
            graph.add_event(make_event(f"e{i}", "s", float(i), float(i) + 0.5,
                                       embedding=hash_unit_vector(text, DIM),
                                       description=text))
        ranked = self._retriever(graph).tri_view_retrieve("unique description 3")
        assert ranked.event_ids()[0] == "e3"
        assert ranked.entries[0].per_view["event"] == pytest.approx(1.0, abs=1e-6)

    def test_twenty_event_graph_matches_enumeration_oracle(self):
        graph = build_retrieval_graph(seed=9, n_events=20)
        retriever = self._retriever(graph)
        ranked = retriever.tri_view_retrieve("what happened at the pond")
        query = MockGateway(dim=DIM).embed_text("embedder",
                                                ["what happened at the pond"])[0]
        order, totals = oracle_tri_view(graph, query, 8,
                                        retriever.config.view_weights)
        assert ranked.event_ids() == order
        for entry in ranked.entries:
            assert entry.borda_score == pytest.approx(totals[entry.event_id],
                                                      abs=1e-9)

    def test_empty_graph_rejected(self):
        with pytest.raises(EmptyGraph):
            self._retriever(EventGraph()).tri_view_retrieve("q")

    def test_entries_sorted_with_deterministic_tiebreak(self):
        graph = build_retrieval_graph(seed=2, n_events=12)
        ranked = self._retriever(graph).tri_view_retrieve("tie check")
        scores = [e.borda_score for e in ranked.entries]
        assert scores == sorted(scores, reverse=True)
