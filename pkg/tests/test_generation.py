import itertools

import numpy as np
import pytest

from videoekg.gateway import MockGateway
from videoekg.generation import (SENTINEL_ANSWER, CandidateAnswer,
                                 ConsistencyGenerator, GenerationConfig,
                                 canonicalize_answer, parse_cot_reply,
                                 sample_answers, score_answers, select_best)
from videoekg.search import SALeaf, SearchResult

from conftest import DIM, build_chain


def candidates(pairs):
    """pairs: list of (answer, trace) tuples."""
    return [CandidateAnswer(answer=a, trace=t, sample_index=i)
            for i, (a, t) in enumerate(pairs)]


def pair_table(entries):
    return MockGateway(script={"pair_scores": entries}, dim=DIM)


class TestCanonicalization:
    @pytest.mark.parametrize("raw,expected", [
        ("A", "A"), ("(b)", "B"), ("C.", "C"), (" d) ", "D"),
        ("The red car", "the red car"), ("  Mixed  Case Words ", "mixed case words"),
    ])
    def test_forms(self, raw, expected):
        assert canonicalize_answer(raw) == expected

    def test_parse_cot_reply(self):
        answer, trace = parse_cot_reply("Step one. Step two.\nAnswer: B")
        assert answer == "B"
        assert trace == "Step one. Step two."

    def test_parse_uses_last_marker(self):
        answer, _ = parse_cot_reply("the answer: might be A...\nAnswer: C")
        assert answer == "C"

    def test_unparseable_returns_none(self):
        assert parse_cot_reply("no conclusion here") is None


class TestSampleAnswers:
    def _gateway(self, rules):
        return MockGateway(script={"rules": rules}, dim=DIM)

    def test_fixed_reply_gives_n_identical(self, prompts):
        gw = self._gateway([{"kind": "chat", "response": "Thinking.\nAnswer: A"}])
        out = sample_answers("ctx", "q", gw, GenerationConfig(n_samples=8), prompts)
        assert len(out) == 8
        assert {c.answer for c in out} == {"A"}

    def test_alternating_counts(self, prompts):
        rules = []
        for i in range(8):
            rules.append({"kind": "chat", "tag_contains": f"#s{i}",
                          "response": f"T.\nAnswer: {'A' if i % 2 == 0 else 'B'}"})
        out = sample_answers("ctx", "q", self._gateway(rules),
                             GenerationConfig(n_samples=8), prompts)
        counts = {a: sum(1 for c in out if c.answer == a) for a in "AB"}
        assert counts == {"A": 4, "B": 4}

    def test_six_two_bookkeeping(self, prompts):
        rules = []
        for i in range(8):
            rules.append({"kind": "chat", "tag_contains": f"#s{i}",
                          "response": f"T.\nAnswer: {'B' if i >= 6 else 'A'}"})
        out = sample_answers("ctx", "q", self._gateway(rules),
                             GenerationConfig(n_samples=8), prompts)
        assert sum(1 for c in out if c.answer == "A") == 6
        assert sum(1 for c in out if c.answer == "B") == 2

    def test_unparseable_sample_becomes_sentinel(self, prompts):
        gw = self._gateway([{"kind": "chat", "response": "no marker"}])
        out = sample_answers("ctx", "q", gw, GenerationConfig(n_samples=3), prompts)
        assert all(c.answer == SENTINEL_ANSWER for c in out)


def six_two_fixture():
    """The worked 6A/2B case: A traces pair at 0.9, B traces at 0.8."""
    pairs = [("A", f"ta{i}") for i in range(6)] + [("B", f"tb{i}") for i in range(2)]
    entries = [[f"ta{i}", f"ta{j}", 0.9] for i, j in
               itertools.combinations(range(6), 2)]
    entries.append(["tb0", "tb1", 0.8])
    return candidates(pairs), pair_table(entries)


class TestScoreAnswers:
    def test_hand_computed_six_two(self):
        cands, gw = six_two_fixture()
        scores = {s.answer: s for s in
                  score_answers(cands, gw, GenerationConfig(lambda_weight=0.3))}
        assert scores["A"].s_a == pytest.approx(0.75, abs=1e-15)
        assert scores["A"].s_r == pytest.approx(0.9, abs=1e-12)
        assert scores["A"].s_final == pytest.approx(0.855, abs=1e-12)
        assert scores["B"].s_a == pytest.approx(0.25, abs=1e-15)
        assert scores["B"].s_r == pytest.approx(0.8, abs=1e-12)
        assert scores["B"].s_final == pytest.approx(0.635, abs=1e-12)

    def test_unanimous_with_identical_traces(self):
        cands = candidates([("A", "same trace")] * 5)
        scores = score_answers(cands, MockGateway(dim=DIM), GenerationConfig())
        assert len(scores) == 1
        assert scores[0].s_a == 1.0
        assert scores[0].s_r == pytest.approx(1.0)  # mock self-similarity

    def test_singleton_rule(self):
        cands = candidates([("A", "t1"), ("A", "t1"),
                            ("A", "t1"), ("B", "lonely")])
        config = GenerationConfig(lambda_weight=0.3)
        scores = {s.answer: s for s in
                  score_answers(cands, MockGateway(dim=DIM), config)}
        assert scores["B"].s_r == 0.0
        assert scores["B"].s_final == pytest.approx(0.3 * 0.25, abs=1e-15)

    def test_agreement_partitions_to_one(self):
        cands = candidates([("A", "x"), ("B", "y"), ("A", "z"),
                            ("C", "w"), ("A", "v")])
        scores = score_answers(cands, MockGateway(dim=DIM), GenerationConfig())
        assert sum(s.s_a for s in scores) == pytest.approx(1.0, abs=1e-15)

    def test_permutation_invariance(self):
        cands, gw = six_two_fixture()
        base = {s.answer: (s.s_a, s.s_r, s.s_final)
                for s in score_answers(cands, gw, GenerationConfig())}
        rng = np.random.default_rng(0)
        for _ in range(5):
            shuffled = list(cands)
            rng.shuffle(shuffled)
            again = {s.answer: (s.s_a, s.s_r, s.s_final)
                     for s in score_answers(shuffled, gw, GenerationConfig())}
            assert again == base

    def test_final_score_monotone_in_k(self):
        config = GenerationConfig(lambda_weight=0.3)
        finals = []
        for k in range(2, 6):
            pairs = [("A", "shared")] * k + [(f"x{i}", f"t{i}")
                     for i in range(8 - k)]
            scores = {s.answer: s for s in
                      score_answers(candidates(pairs), MockGateway(dim=DIM), config)}
            assert scores["A"].s_r == pytest.approx(1.0)  # identical traces
            finals.append(scores["A"].s_final)
        assert all(b > a for a, b in zip(finals, finals[1:]))

    def test_lambda_one_is_majority_vote(self):
        pairs = [("A", f"a{i}") for i in range(5)] + \
               [("B", "bt") for _ in range(3)]
        entries = [[f"a{i}", f"a{j}", 0.1] for i, j in
                   itertools.combinations(range(5), 2)]
        cands = candidates(pairs)
        best = select_best(score_answers(cands, pair_table(entries),
                                         GenerationConfig(lambda_weight=1.0)))
        assert best.answer == "A"

    def test_lambda_zero_is_trace_coherence(self):
        pairs = [("A", f"a{i}") for i in range(5)] + \
               [("B", "bt") for _ in range(3)]
        entries = [[f"a{i}", f"a{j}", 0.1] for i, j in
                   itertools.combinations(range(5), 2)]
        cands = candidates(pairs)
        best = select_best(score_answers(cands, pair_table(entries),
                                         GenerationConfig(lambda_weight=0.0)))
        assert best.answer == "B"


class TestSelectBest:
    def test_worked_example(self):
        cands, gw = six_two_fixture()
        best = select_best(score_answers(cands, gw,
                                         GenerationConfig(lambda_weight=0.3)))
        assert best.answer == "A"

    def test_tie_broken_by_agreement(self):
        from videoekg.generation import ConsistencyScore
        scores = [ConsistencyScore("A", s_a=0.5, s_r=0.5, s_final=0.7, k=4),
                  ConsistencyScore("B", s_a=0.25, s_r=0.9, s_final=0.7, k=2)]
        assert select_best(scores).answer == "A"

    def test_single_candidate(self):
        from videoekg.generation import ConsistencyScore
        only = ConsistencyScore("C", 1.0, 1.0, 1.0, 8)
        assert select_best([only]) is only


def leaf_for(node_id, context, event_ids):
    return SALeaf(node_id=node_id, context_text=context, depth=3,
                  path=("F", "SA"), event_ids=event_ids,
                  empty_evidence=not event_ids)


class TestCheckFrames:
    def _graph(self):
        graph, _ = build_chain(4, with_frames=True)
        return graph

    def test_all_agree_skips_vision(self, prompts):
        graph = self._graph()
        gw = MockGateway(script={"rules": [
            {"kind": "chat", "role": "sa_reasoner",
             "response": "Reasoning.\nAnswer: A"}]}, dim=DIM)
        gen = ConsistencyGenerator(graph, gw, GenerationConfig(), prompts)
        result = SearchResult(sa_leaves=[
            leaf_for("SA", "ctx-one", ["e1"]),
            leaf_for("F/SA", "ctx-two", ["e2"])])
        final, audit = gen.answer_query("q", result)
        assert final.answer == "A"
        assert audit["ca"]["skipped"] is True
        assert gw.call_count("vision_chat") == 0

    def test_differing_answers_ca_decides(self, prompts):
        graph = self._graph()
        rules = [
            {"kind": "chat", "role": "sa_reasoner", "contains": "ctx-one",
             "response": "R1.\nAnswer: A"},
            {"kind": "chat", "role": "sa_reasoner", "contains": "ctx-two",
             "response": "R2.\nAnswer: B"},
            {"kind": "vision_chat", "contains": "synthetic://s/e2",
             "response": "Frames settle it.\nAnswer: B"},
        ]
        for i in range(8):
            rules.append({"kind": "vision_chat", "contains": "synthetic://s/e1",
                          "tag_contains": f"#s{i}",
                          "response": f"Wobbly.\nAnswer: {'A' if i < 4 else 'C'}"})
        gw = MockGateway(script={"rules": rules}, dim=DIM)
        gen = ConsistencyGenerator(graph, gw, GenerationConfig(), prompts)
        result = SearchResult(sa_leaves=[
            leaf_for("SA", "ctx-one", ["e1"]),
            leaf_for("F/SA", "ctx-two", ["e2"])])
        final, audit = gen.answer_query("q", result)
        assert final.source == "ca"
        assert final.answer == "B"
        assert gw.call_count("vision_chat") == 16
        assert audit["ca"]["winner_node"] == "F/SA"

    def test_missing_frames_degraded_fallback(self, prompts):
        graph, _ = build_chain(3)   # events carry no frames
        rules = [
            {"kind": "chat", "role": "sa_reasoner", "contains": "ctx-one",
             "response": "R1.\nAnswer: A"},
            {"kind": "chat", "role": "sa_reasoner", "contains": "ctx-two",
             "response": "R2.\nAnswer: B"},
        ]
        gw = MockGateway(script={"rules": rules}, dim=DIM)
        gen = ConsistencyGenerator(graph, gw, GenerationConfig(), prompts)
        result = SearchResult(sa_leaves=[
            leaf_for("SA", "ctx-one", ["e1"]),
            leaf_for("F/SA", "ctx-two", ["e2"])])
        final, audit = gen.answer_query("q", result)
        assert final.degraded
        assert final.source == "sa"
        assert final.answer in ("A", "B")


class TestAnswerQuery:
    def test_single_leaf_equals_select_best(self, prompts):
        graph, _ = build_chain(2, with_frames=True)
        gw = MockGateway(script={"rules": [
            {"kind": "chat", "response": "Steady.\nAnswer: D"}]}, dim=DIM)
        gen = ConsistencyGenerator(graph, gw, GenerationConfig(), prompts)
        result = SearchResult(sa_leaves=[leaf_for("SA", "ctx", ["e1"])])
        final, audit = gen.answer_query("q", result)
        assert final.answer == "D"
        assert audit["ca"]["skipped"] is True
        assert len(audit["leaves"]) == 1

    def test_all_sentinel_leaves(self, prompts):
        graph, _ = build_chain(1)
        gen = ConsistencyGenerator(graph, MockGateway(dim=DIM),
                                   GenerationConfig(), prompts)
        result = SearchResult(sa_leaves=[leaf_for("SA", "", []),
                                         leaf_for("F/SA", "", [])])
        final, audit = gen.answer_query("q", result)
        assert final.answer == SENTINEL_ANSWER
        assert final.degraded

    def test_thirteen_leaf_deterministic_audit(self, prompts):
        def run():
            graph, _ = build_chain(6, with_frames=True)
            gw = MockGateway(script={"rules": [
                {"kind": "chat", "contains": "Suggest up to",
                 "response": '["pond"]'},
                {"kind": "chat", "response": "Chain.\nAnswer: A"}]}, dim=DIM)
            from videoekg.retrieval import Retriever, RetrievalConfig
            from videoekg.search import SearchConfig, SearchEngine
            from videoekg.store import VectorIndex
            retriever = Retriever(graph, VectorIndex(graph), gw,
                                  RetrievalConfig(k_per_view=4))
            engine = SearchEngine(graph, retriever, gw, SearchConfig(), prompts)
            result = engine.search("what happened")
            gen = ConsistencyGenerator(graph, gw, GenerationConfig(), prompts)
            return gen.answer_query("what happened", result)

        final_a, audit_a = run()
        final_b, audit_b = run()
        assert len(audit_a["leaves"]) == 13
        assert final_a.answer == final_b.answer == "A"
        assert audit_a == audit_b
