"""Line-oriented parsers for agent replies, each with a fixed fallback.

None of these raise on malformed input: a parse that cannot recover the
required fields returns the documented fallback and flags it.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .state import QueryPlan, QueryType, Verdict, VerificationSignal

_NUMBER = re.compile(r"[-+]?(?:\d+\.\d*|\.\d+|\d+)")
_INT = re.compile(r"\d+")
_INDEXED_KEY = re.compile(r"^(CANDIDATE|PATH_SCORE)[_\s]*(\d+)$")

UNPARSEABLE = "unparseable"


def _fields(raw: str) -> dict[str, str]:
    """Map upper-cased ``KEY: value`` lines to values; first occurrence wins."""
    out: dict[str, str] = {}
    for line in raw.splitlines():
        line = line.replace("*", "").replace("`", "").strip().lstrip("#-> ").strip()
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        key = re.sub(r"\s+", "_", key.strip().upper())
        if key and key not in out:
            out[key] = value.strip()
    return out


def _score(value: Optional[str]) -> Optional[float]:
    if value is None:
        return None
    m = _NUMBER.search(value)
    if not m:
        return None
    return min(1.0, max(0.0, float(m.group(0))))


def _split_list(value: str) -> list[str]:
    parts = re.split(r"[,;]|\|", value)
    return [p.strip().strip("\"'[]") for p in parts if p.strip().strip("\"'[]")]


_TYPE_ALIASES = {
    "factual": QueryType.FACTUAL,
    "fact": QueryType.FACTUAL,
    "multi_hop": QueryType.MULTI_HOP,
    "multihop": QueryType.MULTI_HOP,
    "summarization": QueryType.SUMMARIZATION,
    "summary": QueryType.SUMMARIZATION,
    "reasoning": QueryType.REASONING,
}


def parse_query_type(value: str) -> QueryType:
    token = re.sub(r"[\s-]+", "_", value.strip().lower()).strip("._")
    return _TYPE_ALIASES.get(token, QueryType.FACTUAL)


def parse_planner(raw: str, query: str) -> tuple[QueryPlan, bool]:
    """Returns the plan and whether the fallback (whole query as intent) was used."""
    f = _fields(raw)
    intent = f.get("INTENT", "").strip()
    if not intent:
        return QueryPlan(intent=query, sub_queries=[query], entities=[], query_type=QueryType.FACTUAL), True
    subs = _split_list(f.get("SUB_QUERIES", f.get("SUBQUERIES", "")))
    ents = _split_list(f.get("ENTITIES", ""))
    if any(e.lower() in ("none", "n/a") for e in ents):
        ents = [e for e in ents if e.lower() not in ("none", "n/a")]
    return QueryPlan(
        intent=intent,
        sub_queries=subs,
        entities=ents,
        query_type=parse_query_type(f.get("TYPE", "")),
    ), False


@dataclass
class RetrieverSelection:
    selected: list[int]
    scores: dict[int, float] = field(default_factory=dict)
    fallback: Optional[str] = None


def parse_retriever(
    raw: str, n_candidates: int, k: int, cosine_scores: Optional[Sequence[float]] = None
) -> RetrieverSelection:
    """Candidate numbers are 1-based, as shown in the prompt.

    Order of preference: explicit SELECTED list, then the top-k of the
    parsed CANDIDATE scores, then the top-k by ``cosine_scores`` (or prompt
    order when those are absent).
    """
    f = _fields(raw)
    scores: dict[int, float] = {}
    for key, value in f.items():
        m = _INDEXED_KEY.match(key)
        if m and m.group(1) == "CANDIDATE":
            idx, s = int(m.group(2)), _score(value)
            if 1 <= idx <= n_candidates and s is not None:
                scores[idx] = s
    selected: list[int] = []
    for tok in _INT.findall(f.get("SELECTED", "")):
        idx = int(tok)
        if 1 <= idx <= n_candidates and idx not in selected:
            selected.append(idx)
    if selected:
        return RetrieverSelection(selected[:k], scores)
    if scores:
        ranked = sorted(scores, key=lambda i: (-scores[i], i))
        return RetrieverSelection(ranked[:k], scores, fallback="candidate_scores")
    if cosine_scores is not None:
        ranked = sorted(range(1, n_candidates + 1), key=lambda i: (-cosine_scores[i - 1], i))
    else:
        ranked = list(range(1, n_candidates + 1))
    return RetrieverSelection(ranked[:k], {}, fallback="cosine")


def verifier_fallback() -> VerificationSignal:
    return VerificationSignal(0.5, 0.5, 0.5, Verdict.FAIL, UNPARSEABLE)


def parse_verifier(raw: str) -> tuple[VerificationSignal, bool]:
    f = _fields(raw)
    r = _score(f.get("RELEVANCE"))
    s = _score(f.get("SUFFICIENCY"))
    c = _score(f.get("CONSISTENCY"))
    if r is None or s is None or c is None:
        return verifier_fallback(), True
    verdict_text = f.get("VERDICT", "").upper()
    verdict = Verdict.PASS if re.search(r"\bPASS\b", verdict_text) else Verdict.FAIL
    return VerificationSignal(r, s, c, verdict, f.get("REASON", "").strip()), False


def parse_navigator(raw: str, n_paths: int) -> Optional[list[float]]:
    """Per-path scores, or ``None`` when nothing usable was returned."""
    f = _fields(raw)
    scores: dict[int, float] = {}
    for key, value in f.items():
        m = _INDEXED_KEY.match(key)
        if m and m.group(1) == "PATH_SCORE":
            idx, s = int(m.group(2)), _score(value)
            if 1 <= idx <= n_paths and s is not None:
                scores[idx] = s
    if len(scores) == n_paths:
        return [scores[i] for i in range(1, n_paths + 1)]
    if "PATH_SCORE" in f:
        values = [min(1.0, max(0.0, float(v))) for v in _NUMBER.findall(f["PATH_SCORE"])]
        if len(values) == n_paths:
            return values
        if len(values) == 1:
            return values * n_paths
    return None


def parse_rewriter(raw: str) -> Optional[str]:
    f = _fields(raw)
    text = f.get("REWRITTEN", "").strip()
    if not text:
        lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
        text = lines[0] if len(lines) == 1 else ""
    return " ".join(text.split()) or None
