"""Consistency-scored answer generation over the search leaves.

Each leaf's context is answered ``n`` times with chain-of-thought sampling.
Samples sharing a canonical answer are grouped; the group's agreement score
is its share of the n samples, its trace-consistency score is the mean
pairwise text similarity of its reasoning traces (zero for singletons), and
the final score blends the two with weight ``lambda``. The best-scoring
answer per leaf competes across leaves; when the winners disagree, the two
strongest nodes with differing answers are re-answered from their raw
frames (check-frames-and-answer) under the same scoring, and the best
refined answer wins. When every leaf agrees, no vision call is made.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

from .errors import GatewayError, MissingFrames
from .gateway import ModelGateway
from .graph import EventGraph
from .search import SALeaf, SearchResult
from .store import fetch_frames

logger = logging.getLogger(__name__)

SENTINEL_ANSWER = "insufficient evidence"


@dataclass
class GenerationConfig:
    n_samples: int = 8
    temperature: float = 0.6
    lambda_weight: float = 0.3
    ca_top_m: int = 2

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not 0.0 <= self.lambda_weight <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.ca_top_m < 1:
            raise ValueError("ca_top_m must be at least 1")


@dataclass
class CandidateAnswer:
    answer: str            # canonical form
    trace: str
    sample_index: int
    raw_answer: str = ""


@dataclass
class ConsistencyScore:
    answer: str
    s_a: float
    s_r: float
    s_final: float
    k: int


@dataclass
class LeafOutcome:
    leaf: SALeaf
    scores: list[ConsistencyScore]
    best: ConsistencyScore


@dataclass
class FinalAnswer:
    answer: str
    score: float
    source: str            # "sa" or "ca"
    degraded: bool = False


_OPTION_LETTER = re.compile(r"^\(?([A-Za-z])\)?[.):]?$")
_ANSWER_MARKER = re.compile(r"answer\s*[:：]", re.IGNORECASE)


def canonicalize_answer(text: str) -> str:
    """Trim, case-fold, and collapse a bare option letter to its upper form."""
    cleaned = " ".join(text.split())
    match = _OPTION_LETTER.match(cleaned)
    if match:
        return match.group(1).upper()
    return cleaned.casefold()


def parse_cot_reply(text: str) -> tuple[str, str] | None:
    """Split a chain-of-thought reply into (final answer, reasoning trace)."""
    matches = list(_ANSWER_MARKER.finditer(text))
    if not matches:
        return None
    last = matches[-1]
    answer = text[last.end():].strip()
    trace = text[:last.start()].strip()
    if not answer:
        return None
    return answer, trace


def sample_answers(context: str, query: str, gateway: ModelGateway,
                   config: GenerationConfig, prompts, role: str = "sa_reasoner",
                   tag_prefix: str = "") -> list[CandidateAnswer]:
    """n chain-of-thought samples; unparseable replies record the sentinel."""
    if not context.strip():
        raise ValueError("cannot sample answers over an empty context")
    prompt = prompts.render("cot_answer", query=query, context=context)
    candidates: list[CandidateAnswer] = []
    for i in range(config.n_samples):
        reply = gateway.chat(role, [{"role": "user", "content": prompt}],
                             temperature=config.temperature,
                             tag=f"{tag_prefix}#s{i}")
        parsed = parse_cot_reply(reply)
        if parsed is None:
            logger.warning("sample %d produced no parseable answer", i)
            candidates.append(CandidateAnswer(SENTINEL_ANSWER, reply.strip(), i, reply))
        else:
            answer, trace = parsed
            candidates.append(CandidateAnswer(canonicalize_answer(answer), trace,
                                              i, answer))
    return candidates


def score_answers(candidates: list[CandidateAnswer], gateway: ModelGateway,
                  config: GenerationConfig) -> list[ConsistencyScore]:
    """Agreement and trace-consistency scores per unique answer.

    A singleton answer has no trace pair to compare, so its trace score is
    zero, which deliberately penalizes uncorroborated answers.
    """
    if not candidates:
        raise ValueError("no candidates to score")
    n = len(candidates)
    groups: dict[str, list[CandidateAnswer]] = {}
    for cand in candidates:
        groups.setdefault(cand.answer, []).append(cand)
    lam = config.lambda_weight
    scores: list[ConsistencyScore] = []
    for answer, members in groups.items():
        k = len(members)
        s_a = k / n
        if k == 1:
            s_r = 0.0
        else:
            total = 0.0
            for i in range(k):
                for j in range(i + 1, k):
                    total += gateway.pair_score("scorer", members[i].trace,
                                                members[j].trace)
            s_r = 2.0 * total / (k * (k - 1))
        scores.append(ConsistencyScore(answer=answer, s_a=s_a, s_r=s_r,
                                       s_final=lam * s_a + (1.0 - lam) * s_r, k=k))
    return scores


def select_best(scores: list[ConsistencyScore]) -> ConsistencyScore:
    """Highest final score; ties fall to higher agreement, then answer text."""
    if not scores:
        raise ValueError("no scores to select from")
    return min(scores, key=lambda s: (-s.s_final, -s.s_a, s.answer))


class ConsistencyGenerator:
    """Per-leaf answering, cross-leaf selection, and frame-checked refinement."""

    def __init__(self, graph: EventGraph, gateway: ModelGateway,
                 config: GenerationConfig, prompts):
        self.graph = graph
        self.gateway = gateway
        self.config = config
        self.prompts = prompts

    def answer_leaf(self, leaf: SALeaf, query: str) -> LeafOutcome:
        if leaf.empty_evidence:
            sentinel = ConsistencyScore(SENTINEL_ANSWER, 0.0, 0.0, 0.0, 0)
            return LeafOutcome(leaf=leaf, scores=[sentinel], best=sentinel)
        candidates = sample_answers(leaf.context_text, query, self.gateway,
                                    self.config, self.prompts,
                                    tag_prefix=f"sa:{leaf.node_id}")
        scores = score_answers(candidates, self.gateway, self.config)
        return LeafOutcome(leaf=leaf, scores=scores, best=select_best(scores))

    def _pick_differing(self, outcomes: list[LeafOutcome]) -> list[LeafOutcome]:
        """Strongest node per distinct answer, best nodes first."""
        real = [o for o in outcomes if o.best.answer != SENTINEL_ANSWER]
        pool = real if real else outcomes
        ordered = sorted(pool, key=lambda o: (-o.best.s_final, -o.best.s_a,
                                              o.leaf.node_id))
        picked: list[LeafOutcome] = []
        seen_answers: set[str] = set()
        for outcome in ordered:
            if outcome.best.answer in seen_answers:
                continue
            seen_answers.add(outcome.best.answer)
            picked.append(outcome)
            if len(picked) == self.config.ca_top_m:
                break
        return picked

    def check_frames_answer(self, outcomes: list[LeafOutcome],
                            query: str) -> tuple[FinalAnswer, dict]:
        """Re-answer the top differing nodes from raw frames; fall back to the
        best text answer when frames or the vision endpoint are unavailable."""
        if not outcomes:
            raise ValueError("no scored nodes")
        picked = self._pick_differing(outcomes)
        audit: dict = {"skipped": False, "nodes": [o.leaf.node_id for o in picked]}
        if len(picked) == 1:
            best = picked[0].best
            audit["skipped"] = True
            audit["reason"] = "all nodes agree"
            return FinalAnswer(best.answer, best.s_final, "sa"), audit
        try:
            ca_scores: list[tuple[str, ConsistencyScore]] = []
            records = []
            for outcome in picked:
                frames = fetch_frames(self.graph, outcome.leaf.event_ids)
                if not frames:
                    raise MissingFrames(f"node {outcome.leaf.node_id} has no frames")
                prompt = self.prompts.render("ca_vision", query=query)
                candidates: list[CandidateAnswer] = []
                for i in range(self.config.n_samples):
                    reply = self.gateway.vision_chat(
                        "ca_reasoner", [f.locator for f in frames], prompt,
                        temperature=self.config.temperature,
                        tag=f"ca:{outcome.leaf.node_id}#s{i}")
                    parsed = parse_cot_reply(reply)
                    if parsed is None:
                        candidates.append(CandidateAnswer(SENTINEL_ANSWER,
                                                          reply.strip(), i, reply))
                    else:
                        answer, trace = parsed
                        candidates.append(CandidateAnswer(canonicalize_answer(answer),
                                                          trace, i, answer))
                scores = score_answers(candidates, self.gateway, self.config)
                best = select_best(scores)
                ca_scores.append((outcome.leaf.node_id, best))
                records.append({"node_id": outcome.leaf.node_id,
                                "scores": [vars(s) for s in sorted(
                                    scores, key=lambda s: (-s.s_final, s.answer))]})
            winner_node, winner = min(
                ca_scores, key=lambda ns: (-ns[1].s_final, -ns[1].s_a, ns[1].answer))
            audit["ca_nodes"] = records
            audit["winner_node"] = winner_node
            return FinalAnswer(winner.answer, winner.s_final, "ca"), audit
        except (GatewayError, MissingFrames) as exc:
            logger.warning("check-frames refinement unavailable (%s); "
                           "falling back to text answer", exc)
            best = picked[0].best
            audit["degraded"] = str(exc)
            return FinalAnswer(best.answer, best.s_final, "sa", degraded=True), audit

    def answer_query(self, query: str,
                     search_result: SearchResult) -> tuple[FinalAnswer, dict]:
        """Full pipeline for one query, with a deterministic audit record."""
        if not search_result.sa_leaves:
            raise ValueError("search produced no leaves")
        outcomes = [self.answer_leaf(leaf, query) for leaf in search_result.sa_leaves]
        leaf_records = []
        for outcome in outcomes:
            leaf_records.append({
                "node_id": outcome.leaf.node_id,
                "path": list(outcome.leaf.path),
                "depth": outcome.leaf.depth,
                "event_ids": outcome.leaf.event_ids,
                "empty_evidence": outcome.leaf.empty_evidence,
                "scores": [vars(s) for s in sorted(outcome.scores,
                                                   key=lambda s: (-s.s_final, s.answer))],
                "selected": outcome.best.answer,
            })
        if all(o.best.answer == SENTINEL_ANSWER for o in outcomes):
            final = FinalAnswer(SENTINEL_ANSWER, 0.0, "sa", degraded=True)
            ca_audit: dict = {"skipped": True, "reason": "no evidence on any path"}
        else:
            final, ca_audit = self.check_frames_answer(outcomes, query)
        audit = {
            "query": query,
            "leaves": leaf_records,
            "ca": ca_audit,
            "final": {"answer": final.answer, "score": final.score,
                      "source": final.source, "degraded": final.degraded},
        }
        return final, audit
