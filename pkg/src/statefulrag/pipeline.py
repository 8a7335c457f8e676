"""Verifier-guided retrieval loop over an abstraction tree.

One query runs as: planner -> navigator (tree traversal) -> retriever ->
verifier, repeated at most ``max_iterations`` times with a query rewrite
between rounds, then a single reasoner call on the merged evidence. Small
trees (fewer than ``tau`` leaves) skip the loop entirely. Every hand-off
between roles goes through task memory, under the access policy.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Optional, Sequence

from .errors import BackendError, InvalidInputError
from .gateway import Backends, ChatReply, ChatRequest, ModelRole, count_tokens
from .memory import AccessRequest, MemoryPool, Op, Tier
from .metrics import exact_match
from .parsing import parse_navigator, parse_planner, parse_retriever, parse_rewriter, parse_verifier
from .prompts import PromptLibrary, default_library, flatten
from .state import (
    AgentTranscript,
    EvidenceItem,
    EvidenceSet,
    IterationRecord,
    QueryReport,
    RetrievalState,
    TraversalPath,
    Verdict,
    VerificationSignal,
    merge_evidence,
    new_state,
)
from .tree import TamTree, TraversalConfig, flat_rank, retrieve

logger = logging.getLogger(__name__)


@dataclass
class LoopConfig:
    max_iterations: int = 2
    gamma: float = 0.7
    tau: int = 5
    bypass: bool = True
    select_k: int = 4
    navigator_rescoring: bool = False
    path_score_floor: float = 0.2
    reasoner_token_budget: int = 2000
    write_artifacts: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidInputError("gamma must lie in [0, 1]")
        if self.tau < 1:
            raise InvalidInputError("tau must be a positive integer")
        if self.select_k < 1 or self.reasoner_token_budget < 1:
            raise InvalidInputError("select_k and reasoner_token_budget must be positive")


def _item_to_dict(item: EvidenceItem) -> dict[str, Any]:
    return asdict(item)


def _items_from(value: Optional[Sequence[dict[str, Any]]]) -> list[EvidenceItem]:
    return [EvidenceItem(**d) for d in (value or [])]


def _timed_chat(backends: Backends, request: ChatRequest) -> tuple[ChatReply, float]:
    start = time.perf_counter()
    reply = backends.chat(request)
    return reply, time.perf_counter() - start


def rewrite_query(
    original: str,
    previous: str,
    signal: VerificationSignal,
    evidence: Sequence[EvidenceItem],
    backends: Backends,
    prompts: Optional[PromptLibrary] = None,
    iteration: int = 0,
) -> tuple[str, AgentTranscript]:
    """Reformulate ``previous`` from the verifier's feedback.

    Only valid after a failed verification. On a backend failure the
    original query is returned; on an unusable reply the feedback text is
    appended to the previous query.
    """
    if signal.verdict is not Verdict.FAIL:
        raise InvalidInputError("rewrite_query requires a failed verification")
    prompts = prompts or default_library()
    prompt = prompts.rewriter(original, previous, signal.reason, list(evidence))
    transcript = AgentTranscript("rewrite", ModelRole.PLANNER.value, prompt, "", None, iteration=iteration)
    try:
        reply, elapsed = _timed_chat(backends, ChatRequest(ModelRole.PLANNER, prompt))
    except BackendError as exc:
        logger.warning("rewrite failed, reverting to original query: %s", exc)
        transcript.fallback = "backend_error"
        return original, transcript
    transcript.reply = reply.text
    transcript.prompt_tokens, transcript.completion_tokens = reply.prompt_tokens, reply.completion_tokens
    transcript.wall_time_s = elapsed
    new = parse_rewriter(reply.text)
    if not new or new == flatten(previous):
        new = flatten(f"{previous} {signal.reason}")
        if new == flatten(previous):
            new = f"{new} details"
        transcript.fallback = "append_reason"
    transcript.parsed = {"query": new}
    return new, transcript


class Pipeline:
    """Runs queries against a tree with one set of backends and one memory pool."""

    def __init__(
        self,
        backends: Backends,
        memory: MemoryPool,
        traversal: Optional[TraversalConfig] = None,
        loop: Optional[LoopConfig] = None,
        prompts: Optional[PromptLibrary] = None,
    ):
        self.backends = backends
        self.memory = memory
        self.traversal = traversal or TraversalConfig()
        self.loop = loop or LoopConfig()
        self.prompts = prompts or default_library()

    # memory helpers -----------------------------------------------------
    def _put(self, agent: str, key: str, value: Any, tier: Tier = Tier.TASK, owner: Optional[str] = None) -> bool:
        return self.memory.write(AccessRequest(agent, tier, Op.WRITE, key, value, owner))

    def _get(self, agent: str, key: str, tier: Tier = Tier.TASK, owner: Optional[str] = None) -> Any:
        return self.memory.read(AccessRequest(agent, tier, Op.READ, key, None, owner))

    def _chat(self, stage: str, role: ModelRole, user: str, iteration: int,
              system: Optional[str] = None) -> tuple[str, AgentTranscript]:
        reply, elapsed = _timed_chat(self.backends, ChatRequest(role, user, system))
        prompt = user if system is None else f"{system}\n\n{user}"
        transcript = AgentTranscript(
            stage, role.value, prompt, reply.text, None,
            reply.prompt_tokens, reply.completion_tokens, iteration, None, elapsed,
        )
        return reply.text, transcript

    # stages -------------------------------------------------------------
    def _navigate(self, query: str, tree: TamTree, iteration: int) -> tuple[EvidenceSet, TraversalPath, AgentTranscript]:
        result = retrieve(tree, query, self.traversal, self.backends.embedder)
        parsed = {
            "reached_leaves": len(result.path.reached_leaves),
            "comparisons": result.comparisons,
            "max_beam": result.max_beam,
            "candidates": result.evidence.keys(),
        }
        evidence = result.evidence
        if not self.loop.navigator_rescoring or not len(evidence):
            return evidence, result.path, AgentTranscript("navigate", "navigator", "", "", parsed, iteration=iteration)
        descriptions = _describe_paths(tree, evidence)
        text, transcript = self._chat("navigate", ModelRole.NAVIGATOR,
                                      self.prompts.navigator(query, descriptions), iteration)
        scores = parse_navigator(text, len(descriptions))
        if scores is None:
            transcript.fallback = "keep_all_paths"
        else:
            kept = [it for it, s in zip(evidence, scores) if s >= self.loop.path_score_floor]
            if kept:
                evidence = EvidenceSet(kept)
            else:
                transcript.fallback = "all_below_floor"
            parsed["path_scores"] = scores
        parsed["candidates"] = evidence.keys()
        transcript.parsed = parsed
        return evidence, result.path, transcript

    def _select(self, query: str, candidates: list[EvidenceItem], iteration: int) -> tuple[EvidenceSet, AgentTranscript]:
        k = self.loop.select_k
        text, transcript = self._chat("retrieve", ModelRole.RETRIEVER,
                                      self.prompts.retriever(query, candidates, k), iteration)
        sel = parse_retriever(text, len(candidates), k, [c.score for c in candidates])
        transcript.fallback = sel.fallback
        transcript.parsed = {"selected": sel.selected, "scores": {str(i): s for i, s in sel.scores.items()}}
        chosen = []
        for number in sel.selected:
            item = candidates[number - 1]
            chosen.append(item.rescored(sel.scores[number]) if number in sel.scores else item)
        return EvidenceSet(chosen), transcript

    def _verify(self, query: str, evidence: list[EvidenceItem], iteration: int) -> tuple[VerificationSignal, AgentTranscript]:
        text, transcript = self._chat("verify", ModelRole.VERIFIER, self.prompts.verifier(query, evidence), iteration)
        signal, fell_back = parse_verifier(text)
        stated = signal.verdict
        verdict = Verdict.PASS if signal.aggregate >= self.loop.gamma else Verdict.FAIL
        signal = VerificationSignal(signal.relevance, signal.sufficiency, signal.consistency, verdict, signal.reason)
        transcript.fallback = "default_scores" if fell_back else None
        transcript.parsed = {
            "relevance": signal.relevance, "sufficiency": signal.sufficiency,
            "consistency": signal.consistency, "alpha": signal.aggregate,
            "stated_verdict": stated.value, "verdict": verdict.value, "reason": signal.reason,
        }
        return signal, transcript

    def _reason(self, query: str, evidence: EvidenceSet, report: QueryReport) -> str:
        fitted, truncated = _fit_budget(list(evidence), self.loop.reasoner_token_budget)
        report.truncated = truncated
        system, user = self.prompts.reasoner(query, fitted)
        text, transcript = self._chat("answer", ModelRole.REASONER, user, report.n_iterations, system)
        report.transcripts.append(transcript)
        answer = " ".join(text.strip().splitlines()[0].split()) if text.strip() else ""
        transcript.parsed = {"answer": answer}
        report.evidence = [
            {"key": it.key, "doc_id": it.doc_id, "chunk_index": it.chunk_index, "score": it.score, "node_id": it.node_id}
            for it in fitted
        ]
        return answer

    # driver -------------------------------------------------------------
    def run(self, query: str, tree: TamTree, query_id: str = "",
            gold: Optional[Sequence[str]] = None) -> tuple[QueryReport, RetrievalState]:
        state = new_state(query, self.loop.max_iterations)
        golds = [g for g in (gold or []) if g is not None]
        report = QueryReport(query_id=query_id or _qid(query), query=query,
                             leaf_count=tree.leaf_count, gold=golds or None)
        try:
            if self.loop.bypass and tree.leaf_count < self.loop.tau:
                report.routing = "bypass"
                state.evidence = flat_rank(tree, query, self.backends.embedder, self.traversal.top_k)
                report.answer = self._reason(query, state.evidence, report)
            else:
                self._loop(query, tree, state, report)
                evidence = EvidenceSet(_items_from(self._get("reasoner", "evidence:all")))
                report.answer = self._reason(query, evidence, report)
                if self.loop.write_artifacts:
                    key = f"artifact:evidence:{_qid(query)}"
                    if self._put("reasoner", key, evidence.keys(), tier=Tier.GLOBAL):
                        state.artifacts.add(key)
        except BackendError as exc:
            logger.error("query %s aborted: %s", report.query_id, exc)
            report.error = f"{type(exc).__name__}: {exc}"
        finally:
            self.memory.clear_query_scope()
        report.recompute_tokens()
        if golds and report.error is None:
            report.recovery = report.n_iterations >= 2 and any(exact_match(g, report.answer) for g in golds)
        return report, state

    def _loop(self, query: str, tree: TamTree, state: RetrievalState, report: QueryReport) -> None:
        current = query
        merged = EvidenceSet()
        for t in range(1, self.loop.max_iterations + 1):
            state.advance()
            text, tr = self._chat("plan", ModelRole.PLANNER, self.prompts.planner(current), t)
            plan, fell_back = parse_planner(text, current)
            tr.fallback = "whole_query" if fell_back else None
            tr.parsed = {"intent": plan.intent, "sub_queries": plan.sub_queries,
                         "entities": plan.entities, "type": plan.query_type.value}
            report.transcripts.append(tr)
            state.plan = plan
            self._put("planner", f"plan:{t}", tr.parsed)
            self._put("planner", f"planner_log:{t}", tr.parsed, tier=Tier.AGENT, owner="planner")

            candidates, path, tr = self._navigate(current, tree, t)
            report.transcripts.append(tr)
            state.path = path
            self._put("navigator", f"candidates:{t}", [_item_to_dict(c) for c in candidates])
            self._put("navigator", f"path:{t}", [asdict(s) for s in path.steps])

            cands = _items_from(self._get("retriever", f"candidates:{t}"))
            selected, tr = self._select(current, cands, t)
            report.transcripts.append(tr)
            self._put("retriever", f"evidence:{t}", [_item_to_dict(e) for e in selected])

            checked = _items_from(self._get("verifier", f"evidence:{t}"))
            signal, tr = self._verify(query, checked, t)
            report.transcripts.append(tr)
            state.verification = signal
            self._put("verifier", f"verification:{t}", {
                "alpha": signal.aggregate, "reason": signal.reason, "verdict": signal.verdict.value,
                "scores": [signal.relevance, signal.sufficiency, signal.consistency],
            })

            merged = merge_evidence(merged, selected)
            state.evidence = merged
            self._put("retriever", "evidence:all", [_item_to_dict(e) for e in merged])
            report.iterations.append(IterationRecord(
                t, current, signal.relevance, signal.sufficiency, signal.consistency,
                signal.aggregate, signal.verdict.value, signal.reason, selected.keys(),
            ))

            if signal.aggregate >= self.loop.gamma:
                break
            if t < self.loop.max_iterations:
                feedback = self._get("planner", f"verification:{t}") or {}
                fb_signal = VerificationSignal(
                    signal.relevance, signal.sufficiency, signal.consistency,
                    Verdict.FAIL, feedback.get("reason", signal.reason),
                )
                current, tr = rewrite_query(query, current, fb_signal, list(selected),
                                            self.backends, self.prompts, t)
                report.transcripts.append(tr)


def run_query(
    query: str,
    tree: TamTree,
    memory: MemoryPool,
    backends: Backends,
    traversal: Optional[TraversalConfig] = None,
    loop: Optional[LoopConfig] = None,
    gold: Optional[Sequence[str]] = None,
    query_id: str = "",
) -> QueryReport:
    report, _ = Pipeline(backends, memory, traversal, loop).run(query, tree, query_id, gold)
    return report


def _qid(query: str) -> str:
    return hashlib.sha256(query.encode("utf-8")).hexdigest()[:16]


def _fit_budget(items: list[EvidenceItem], budget: int) -> tuple[list[EvidenceItem], bool]:
    """Keep highest-scored evidence until the whitespace-token budget is spent."""
    kept, used = [], 0
    for it in items:
        cost = count_tokens(it.text)
        if used + cost > budget:
            if not kept:
                words = it.text.split()[:budget]
                kept.append(EvidenceItem(it.key, " ".join(words), it.doc_id, it.chunk_index, it.score, it.node_id))
            return kept, True
        kept.append(it)
        used += cost
    return kept, False


def _describe_paths(tree: TamTree, evidence: EvidenceSet) -> list[str]:
    parents: dict[str, str] = {}
    for node in tree.nodes.values():
        for c in node.children:
            parents[c] = node.id
    out = []
    for it in evidence:
        chain, nid = [], it.node_id
        while nid in parents:
            nid = parents[nid]
            chain.append(f"{tree.nodes[nid].level}:{flatten(tree.nodes[nid].text)[:60]}")
        chain.reverse()
        chain.append(f"leaf:{flatten(it.text)[:120]}")
        out.append(" > ".join(chain) + " (evidence 1)")
    return out
