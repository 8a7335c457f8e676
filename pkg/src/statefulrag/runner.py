"""Batch evaluation over line-delimited question files.

Each question record is ``{"query": ..., "gold": ..., "gold_aliases": [...],
"query_id": ..., "documents": [{"doc_id": ..., "text": ...}, ...]}``; only
``query`` is required. Records with ``documents`` get their own tree built
through the shard's global memory, so repeated documents are served from
cache. Records without ``documents`` use the shared prebuilt index.

With ``workers > 1`` the question list is split round-robin into that many
shards, each with its own global memory, run concurrently. Results are
always returned in input order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .config import RunConfig
from .errors import BackendError, InvalidInputError, StatefulRAGError
from .gateway import Backends
from .memory import MemoryPool, Tier, TierStats
from .metrics import MetricRecord, aggregate_report, score_answer
from .pipeline import Pipeline
from .prompts import PromptLibrary
from .state import QueryReport
from .tree import Document, TamTree, build_tree

logger = logging.getLogger(__name__)


@dataclass
class QARecord:
    query: str
    gold: list[str] = field(default_factory=list)
    query_id: str = ""
    documents: Optional[list[Document]] = None

    @classmethod
    def from_dict(cls, record: dict[str, Any], index: int) -> "QARecord":
        query = record.get("query") or record.get("question")
        if not isinstance(query, str) or not query.strip():
            raise InvalidInputError("record lacks a non-empty 'query'")
        gold = record.get("gold", record.get("answer"))
        golds = [gold] if isinstance(gold, str) else list(gold or [])
        golds += [a for a in record.get("gold_aliases") or [] if isinstance(a, str)]
        docs = record.get("documents")
        documents = [Document.from_record(d) for d in docs] if docs is not None else None
        return cls(query, golds, str(record.get("query_id", record.get("id", f"q{index:05d}"))), documents)


def read_jsonl(path: str | Path) -> tuple[list[dict[str, Any]], int]:
    """Parse a JSON-lines file; returns the objects and the count of skipped lines."""
    records, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError:
                skipped += 1
                continue
            if isinstance(obj, dict):
                records.append(obj)
            else:
                skipped += 1
    return records, skipped


def load_corpus(path: str | Path) -> tuple[list[Document], int]:
    raw, skipped = read_jsonl(path)
    docs = []
    for rec in raw:
        try:
            docs.append(Document.from_record(rec))
        except InvalidInputError:
            skipped += 1
    return docs, skipped


def load_questions(path: str | Path) -> tuple[list[QARecord], int]:
    raw, skipped = read_jsonl(path)
    out = []
    for rec in raw:
        try:
            out.append(QARecord.from_dict(rec, len(out)))
        except (InvalidInputError, TypeError):
            skipped += 1
    return out, skipped


@dataclass
class EvalResult:
    reports: list[QueryReport]
    metrics: list[MetricRecord]
    summary: dict[str, Any]
    memory_stats: dict[str, Any]


def _merge_stats(pools: list[MemoryPool]) -> dict[str, Any]:
    total = {t: TierStats() for t in Tier}
    for pool in pools:
        for tier, s in pool.stats.items():
            agg = total[tier]
            agg.lookups += s.lookups
            agg.hits += s.hits
            agg.writes += s.writes
            agg.denials += s.denials
            agg.evictions += s.evictions
    return {t.value: s.to_dict() for t, s in total.items()}


class Evaluator:
    def __init__(self, config: RunConfig, backends: Optional[Backends] = None, tree: Optional[TamTree] = None):
        self.config = config
        self.backends = backends or config.make_backends()
        self.tree = tree
        self.prompts = PromptLibrary(config.prompts_dir)

    def new_memory(self) -> MemoryPool:
        pool = self.config.make_memory()
        if self.config.mg_snapshot and Path(self.config.mg_snapshot).exists():
            pool.load_global(self.config.mg_snapshot)
        return pool

    def answer(self, record: QARecord, memory: MemoryPool) -> QueryReport:
        pipeline = Pipeline(self.backends, memory, self.config.traversal, self.config.loop, self.prompts)
        if self.config.mg_mode == "per_query":
            memory.reset_global()
        lookups = hits = 0
        tree = self.tree
        if record.documents is not None:
            try:
                tree, stats = build_tree(record.documents, self.backends.embedder, self.backends.summarizer,
                                         memory, self.config.chunking)
            except (StatefulRAGError, BackendError) as exc:
                report = QueryReport(record.query_id, record.query, gold=record.gold or None,
                                     error=f"{type(exc).__name__}: {exc}")
                return report
            lookups, hits = stats.mg_lookups, stats.mg_hits
        if tree is None:
            return QueryReport(record.query_id, record.query, gold=record.gold or None,
                               error="InvalidInputError: no documents and no index")
        report, _ = pipeline.run(record.query, tree, record.query_id, record.gold)
        report.mg_lookups += lookups
        report.mg_hits += hits
        return report

    def _run_shard(self, items: list[tuple[int, QARecord]], memory: MemoryPool) -> list[tuple[int, QueryReport]]:
        return [(i, self.answer(rec, memory)) for i, rec in items]

    def run(self, records: list[QARecord]) -> EvalResult:
        n_shards = max(1, min(self.config.workers, len(records) or 1))
        shards: list[list[tuple[int, QARecord]]] = [[] for _ in range(n_shards)]
        for i, rec in enumerate(records):
            shards[i % n_shards].append((i, rec))
        pools = [self.new_memory() for _ in range(n_shards)]
        if n_shards == 1:
            results = self._run_shard(shards[0], pools[0])
        else:
            with ThreadPoolExecutor(max_workers=n_shards) as ex:
                futures = [ex.submit(self._run_shard, s, p) for s, p in zip(shards, pools)]
                results = [pair for f in futures for pair in f.result()]
        reports = [r for _, r in sorted(results, key=lambda pair: pair[0])]
        if self.config.mg_snapshot and n_shards == 1:
            pools[0].save_global(self.config.mg_snapshot)
        metrics = [metric_record(r, self.config.anls) for r in reports]
        summary = aggregate_report(metrics)
        memory_stats = _merge_stats(pools)
        summary["memory"] = memory_stats
        return EvalResult(reports, metrics, summary, memory_stats)


def metric_record(report: QueryReport, with_anls: bool = False) -> MetricRecord:
    return score_answer(
        report.query_id, report.gold or [], report.answer, report.large_tokens, with_anls,
        routing=report.routing, iterations=report.n_iterations, recovery=report.recovery,
        mg_lookups=report.mg_lookups, mg_hits=report.mg_hits, error=report.error,
    )


def metric_record_from_dict(rec: dict[str, Any], with_anls: bool = False) -> MetricRecord:
    """Rebuild a metric record from a serialized query report."""
    return score_answer(
        str(rec.get("query_id", "")), rec.get("gold") or [], rec.get("answer") or "",
        int(rec.get("large_tokens", 0)), with_anls,
        routing=rec.get("routing", "loop"), iterations=int(rec.get("n_iterations", 0)),
        recovery=rec.get("recovery"), mg_lookups=int(rec.get("mg_lookups", 0)),
        mg_hits=int(rec.get("mg_hits", 0)), error=rec.get("error"),
    )
