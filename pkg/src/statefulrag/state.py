"""Per-query retrieval state and the records emitted for each query."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional

from .errors import InvalidInputError


class QueryType(str, Enum):
    FACTUAL = "factual"
    MULTI_HOP = "multi_hop"
    SUMMARIZATION = "summarization"
    REASONING = "reasoning"


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"


def evidence_key(doc_id: str, chunk_index: int) -> str:
    """Content-addressed key for a chunk, stable across iterations and cache reuse."""
    raw = f"{doc_id}\x1f{chunk_index}".encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:20]


@dataclass
class QueryPlan:
    intent: str = ""
    sub_queries: list[str] = field(default_factory=list)
    entities: list[str] = field(default_factory=list)
    query_type: QueryType = QueryType.FACTUAL


@dataclass(frozen=True)
class PathStep:
    node_id: str
    level: str
    score: float


@dataclass
class TraversalPath:
    steps: list[PathStep] = field(default_factory=list)
    reached_leaves: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class EvidenceItem:
    key: str
    text: str
    doc_id: str
    chunk_index: int
    score: float
    node_id: str = ""

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise InvalidInputError(f"evidence score {self.score} outside [0, 1]")

    def rescored(self, score: float) -> "EvidenceItem":
        return EvidenceItem(self.key, self.text, self.doc_id, self.chunk_index, score, self.node_id)


class EvidenceSet:
    """Ordered evidence collection with unique keys."""

    def __init__(self, items: Iterable[EvidenceItem] = ()) -> None:
        self.items: list[EvidenceItem] = list(items)
        keys = [it.key for it in self.items]
        if len(set(keys)) != len(keys):
            raise InvalidInputError("evidence set contains duplicate keys")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EvidenceSet) and self.items == other.items

    def __repr__(self) -> str:
        inner = ", ".join(f"{it.key[:8]}:{it.score:.3f}" for it in self.items)
        return f"EvidenceSet([{inner}])"

    def keys(self) -> list[str]:
        return [it.key for it in self.items]

    def top(self, n: int) -> "EvidenceSet":
        return EvidenceSet(self.items[:n])


def merge_evidence(accumulated: EvidenceSet, new: EvidenceSet) -> EvidenceSet:
    """Union two evidence sets by key.

    On a key collision the higher-scored entry wins; on equal scores the
    accumulated entry is kept. The result is ordered by descending score,
    with insertion order (accumulated first) breaking ties.
    """
    chosen: dict[str, tuple[int, EvidenceItem]] = {}
    order = 0
    for item in list(accumulated) + list(new):
        prev = chosen.get(item.key)
        if prev is None:
            chosen[item.key] = (order, item)
            order += 1
        elif item.score > prev[1].score:
            chosen[item.key] = (prev[0], item)
    ranked = sorted(chosen.values(), key=lambda pair: (-pair[1].score, pair[0]))
    return EvidenceSet(item for _, item in ranked)


@dataclass(frozen=True)
class VerificationSignal:
    relevance: float
    sufficiency: float
    consistency: float
    verdict: Verdict
    reason: str

    @property
    def aggregate(self) -> float:
        return (self.relevance + self.sufficiency + self.consistency) / 3.0


@dataclass
class RetrievalState:
    """Mutable state for one query: plan, path, evidence, verification, artifacts."""

    query: str
    max_iterations: int
    plan: QueryPlan = field(default_factory=QueryPlan)
    path: TraversalPath = field(default_factory=TraversalPath)
    evidence: EvidenceSet = field(default_factory=EvidenceSet)
    verification: Optional[VerificationSignal] = None
    artifacts: set[str] = field(default_factory=set)
    iteration: int = 0

    def advance(self) -> int:
        if self.iteration >= self.max_iterations:
            raise InvalidInputError(
                f"iteration budget exhausted ({self.max_iterations})"
            )
        self.iteration += 1
        return self.iteration


def new_state(query: str, max_iterations: int = 2) -> RetrievalState:
    if not query or not query.strip():
        raise InvalidInputError("query must be non-empty")
    if max_iterations < 1:
        raise InvalidInputError("max_iterations must be positive")
    return RetrievalState(query=query, max_iterations=max_iterations)


@dataclass
class AgentTranscript:
    stage: str
    role: str
    prompt: str
    reply: str
    parsed: Optional[dict[str, Any]]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    iteration: int = 0
    fallback: Optional[str] = None
    wall_time_s: float = 0.0

    def to_dict(self, timings: bool = False) -> dict[str, Any]:
        out = asdict(self)
        if not timings:
            out.pop("wall_time_s")
        return out


@dataclass
class IterationRecord:
    iteration: int
    query: str
    relevance: float
    sufficiency: float
    consistency: float
    alpha: float
    verdict: str
    reason: str
    evidence_keys: list[str]


@dataclass
class QueryReport:
    """Everything recorded about one answered query.

    Serialized as one JSON object per line; see ``REPORT_FIELDS`` for the
    field list. ``recovery`` is ``None`` unless a gold answer was supplied.
    """

    query_id: str
    query: str
    answer: str = ""
    routing: str = "loop"
    leaf_count: int = 0
    iterations: list[IterationRecord] = field(default_factory=list)
    transcripts: list[AgentTranscript] = field(default_factory=list)
    evidence: list[dict[str, Any]] = field(default_factory=list)
    large_tokens: int = 0
    small_tokens: int = 0
    mg_lookups: int = 0
    mg_hits: int = 0
    truncated: bool = False
    recovery: Optional[bool] = None
    gold: Optional[list[str]] = None
    error: Optional[str] = None

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)

    def recompute_tokens(self) -> None:
        self.large_tokens = sum(
            t.prompt_tokens + t.completion_tokens for t in self.transcripts if t.role == "reasoner"
        )
        self.small_tokens = sum(
            t.prompt_tokens + t.completion_tokens for t in self.transcripts if t.role != "reasoner"
        )

    def to_dict(self, timings: bool = False) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "answer": self.answer,
            "routing": self.routing,
            "leaf_count": self.leaf_count,
            "n_iterations": self.n_iterations,
            "iterations": [asdict(it) for it in self.iterations],
            "transcripts": [t.to_dict(timings) for t in self.transcripts],
            "evidence": self.evidence,
            "large_tokens": self.large_tokens,
            "small_tokens": self.small_tokens,
            "mg_lookups": self.mg_lookups,
            "mg_hits": self.mg_hits,
            "truncated": self.truncated,
            "recovery": self.recovery,
            "gold": self.gold,
            "error": self.error,
        }

    def to_json(self, timings: bool = False) -> str:
        return json.dumps(self.to_dict(timings), sort_keys=True, ensure_ascii=False)


REPORT_FIELDS = (
    "query_id", "query", "answer", "routing", "leaf_count", "n_iterations",
    "iterations", "transcripts", "evidence", "large_tokens", "small_tokens",
    "mg_lookups", "mg_hits", "truncated", "recovery", "gold", "error",
)
